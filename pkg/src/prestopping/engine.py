"""Two-phase training: standard SGD until the stop point, then safe-set-only updates.

Phase I trains normally while a stop heuristic watches epoch-end errors. The
validation heuristic trains all epochs and rewinds to the checkpoint with the
lowest validation error (first epoch on ties); the noise-rate heuristic stops
at the first epoch whose training error drops to the noise rate. Phase II
resumes from the checkpoint and, per mini-batch, takes gradients only over the
currently-memorized members of the batch, dividing by their count. Every batch
sample is still forward-passed and recorded, so the safe set can grow.

This module never sees true labels; evaluation against them happens in the
instrumentation layer through the observer callback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn, rng
from .data import DataView
from .memorization import PredictionHistory


@dataclass
class StopHeuristic:
    """Phase I stop rule: kind "validation" (needs a view) or "noise_rate" (needs tau)."""
    kind: str
    tau: Optional[float] = None
    validation: Optional[DataView] = None

    def __post_init__(self):
        if self.kind == "validation":
            if self.validation is None:
                raise ValueError("validation heuristic needs a validation view")
        elif self.kind == "noise_rate":
            if self.tau is None:
                raise ValueError("noise_rate heuristic needs the noise rate tau")
            if not 0.0 <= float(self.tau) < 1.0:
                raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        else:
            raise ValueError(f"unknown heuristic kind {self.kind!r}")


@dataclass
class Checkpoint:
    """Network plus prediction histories frozen at the stop epoch."""
    state: nn.NetworkState
    histories: PredictionHistory
    epoch: int
    trigger_value: float


@dataclass
class MaximalSafeSet:
    """Indices whose histories currently vote for their own training label."""
    indices: np.ndarray  # sorted int64
    n_total: int

    @property
    def size(self) -> int:
        return len(self.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_total, dtype=bool)
        m[self.indices] = True
        return m


@dataclass
class EpochContext:
    """Observer payload at each epoch end; state and histories are live references."""
    phase: str
    epoch: int
    state: nn.NetworkState
    histories: PredictionHistory
    lr: float
    train_error: float
    validation_error: Optional[float] = None
    no_update_epoch: bool = False


@dataclass
class StepRecord:
    """Per-mini-batch trace of a safe-set update, for exact replay checks."""
    epoch: int
    indices: np.ndarray
    member_mask: np.ndarray
    n_used: int
    lr: float
    weights_before: list
    biases_before: list
    vel_w_before: list
    vel_b_before: list
    weights_after: list
    biases_after: list


class StopPointNotReached(RuntimeError):
    """noise_rate heuristic never saw train_error <= tau within the epoch budget."""

    def __init__(self, final_train_error: float, tau: float, epochs: int):
        self.final_train_error = final_train_error
        super().__init__(f"training error never reached tau={tau} within {epochs} "
                         f"epochs (final {final_train_error:.4f})")


Observer = Callable[[EpochContext], None]
StepHook = Callable[[StepRecord], None]


def is_improvement(value: float, best: Optional[float]) -> bool:
    """Strict improvement, so the first epoch attaining a minimum wins ties."""
    return best is None or value < best


def _make_batches(n: int, batch_size: int, shuffle_rng: np.random.Generator):
    """Seeded shuffle partitioned into consecutive batches (last one may be short)."""
    order = shuffle_rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _standard_epoch(view: DataView, state, histories, config, epoch: int, seed: int):
    """One epoch of plain mini-batch SGD, recording every forward prediction."""
    shuffle = rng.stream(seed, "shuffle", epoch)
    for idx in _make_batches(view.n, config.batch_size, shuffle):
        _, grads, _, probs = nn.loss_grad_probs(view.features[idx], view.labels[idx], state)
        histories.record_batch(idx, np.argmax(probs, axis=1))
        nn.sgd_step(state, grads, config, epoch)
    state.epoch = epoch


def _snapshot_params(state):
    return ([w.copy() for w in state.weights], [b.copy() for b in state.biases],
            [v.copy() for v in state.vel_w], [v.copy() for v in state.vel_b])


def _safe_set_epoch(view: DataView, state, histories, config, epoch: int, seed: int,
                    step_hook: Optional[StepHook] = None) -> bool:
    """One Phase II epoch: gradients restricted to memorized batch members.

    Membership is evaluated against the histories as they stand before the
    batch's own predictions are recorded. Returns False when no batch in the
    epoch contained a safe sample (no parameter update happened).
    """
    shuffle = rng.stream(seed, "shuffle", epoch)
    updated = False
    for idx in _make_batches(view.n, config.batch_size, shuffle):
        labels = view.labels[idx]
        mask = histories.memorized_mask(labels, idx)
        n_used = int(mask.sum())
        before = _snapshot_params(state) if step_hook is not None else None
        if n_used > 0:
            _, grads, _, probs = nn.loss_grad_probs(view.features[idx], labels, state,
                                                    sample_mask=mask, denom=n_used)
        else:
            probs = nn.forward(view.features[idx], state)
        histories.record_batch(idx, np.argmax(probs, axis=1))
        if n_used > 0:
            nn.sgd_step(state, grads, config, epoch)
            updated = True
        if step_hook is not None:
            after = _snapshot_params(state)
            step_hook(StepRecord(epoch, idx.copy(), mask.copy(), n_used,
                                 config.lr_at(epoch), *before, after[0], after[1]))
    state.epoch = epoch
    return updated


def compute_safe_set(histories: PredictionHistory, noisy_labels) -> MaximalSafeSet:
    """Current maximal safe set over the whole training set."""
    mask = histories.memorized_mask(noisy_labels)
    return MaximalSafeSet(np.nonzero(mask)[0].astype(np.int64), histories.n_samples)


# ----- phase I -----

def phase1_train(view: DataView, heuristic: StopHeuristic, net_spec: nn.NetworkSpec,
                 config: nn.OptimizerConfig, q: int, seed: int,
                 observer: Optional[Observer] = None) -> Checkpoint:
    """Standard training with the stop heuristic watching epoch-end errors."""
    state = nn.init_state(net_spec, rng.stream(seed, "init"), rng_seed=seed)
    histories = PredictionHistory(view.n, q, view.n_classes)
    best: Optional[Checkpoint] = None
    train_err = 1.0
    for epoch in range(1, config.total_epochs + 1):
        _standard_epoch(view, state, histories, config, epoch, seed)
        train_err = nn.evaluate_error(view.features, view.labels, state)
        val_err = None
        if heuristic.kind == "validation":
            v = heuristic.validation
            val_err = nn.evaluate_error(v.features, v.labels, state)
        if observer is not None:
            observer(EpochContext("phase1", epoch, state, histories,
                                  config.lr_at(epoch), train_err, val_err))
        if heuristic.kind == "validation":
            if is_improvement(val_err, best.trigger_value if best else None):
                best = Checkpoint(state.copy(), histories.copy(), epoch, val_err)
        elif train_err <= heuristic.tau:
            return Checkpoint(state.copy(), histories.copy(), epoch, train_err)
    if heuristic.kind == "validation":
        return best
    raise StopPointNotReached(train_err, heuristic.tau, config.total_epochs)


def run_default(view: DataView, net_spec: nn.NetworkSpec, config: nn.OptimizerConfig,
                q: int, seed: int, observer: Optional[Observer] = None):
    """Plain training for all epochs; bitwise identical to Phase I's trajectory."""
    state = nn.init_state(net_spec, rng.stream(seed, "init"), rng_seed=seed)
    histories = PredictionHistory(view.n, q, view.n_classes)
    for epoch in range(1, config.total_epochs + 1):
        _standard_epoch(view, state, histories, config, epoch, seed)
        if observer is not None:
            train_err = nn.evaluate_error(view.features, view.labels, state)
            observer(EpochContext("phase1", epoch, state, histories,
                                  config.lr_at(epoch), train_err, None))
    return state, histories


# ----- phase II -----

def phase2_train(checkpoint: Checkpoint, view: DataView, config: nn.OptimizerConfig,
                 seed: int, observer: Optional[Observer] = None,
                 step_hook: Optional[StepHook] = None):
    """Resume from the checkpoint, training on safe-set members only.

    The epoch counter resumes at the checkpoint epoch and the LR comes from
    the global schedule, so the LR at resumption equals its value when the
    checkpoint was taken. The checkpoint itself is left untouched.
    """
    if checkpoint.epoch > config.total_epochs:
        raise ValueError(f"checkpoint epoch {checkpoint.epoch} is past "
                         f"total_epochs {config.total_epochs}")
    state = checkpoint.state.copy()
    histories = checkpoint.histories.copy()
    for epoch in range(checkpoint.epoch, config.total_epochs + 1):
        updated = _safe_set_epoch(view, state, histories, config, epoch, seed, step_hook)
        if not updated:
            warnings.warn(f"epoch {epoch}: safe set empty for every batch, "
                          f"no parameter update", RuntimeWarning)
        if observer is not None:
            train_err = nn.evaluate_error(view.features, view.labels, state)
            observer(EpochContext("phase2", epoch, state, histories,
                                  config.lr_at(epoch), train_err, None,
                                  no_update_epoch=not updated))
    return state, compute_safe_set(histories, view.labels), histories


@dataclass
class PrestopResult:
    checkpoint: Checkpoint
    final_state: nn.NetworkState
    safe_set: MaximalSafeSet
    histories: PredictionHistory


def run_prestopping(view: DataView, heuristic: StopHeuristic, net_spec: nn.NetworkSpec,
                    config: nn.OptimizerConfig, q: int, seed: int,
                    observer: Optional[Observer] = None,
                    step_hook: Optional[StepHook] = None) -> PrestopResult:
    """Full two-phase run: Phase I to the stop point, Phase II to the end."""
    ckpt = phase1_train(view, heuristic, net_spec, config, q, seed, observer)
    state, safe, histories = phase2_train(ckpt, view, config, seed, observer, step_hook)
    return PrestopResult(ckpt, state, safe, histories)
