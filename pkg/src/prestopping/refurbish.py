"""Label refurbishment on top of the safe set: the Prestopping+ second run.

A fresh network retrains from scratch. Samples outside the trusted set whose
prediction history has collapsed onto one label (normalized entropy <= epsilon)
get that label substituted in; trusted samples keep their training labels.
Each mini-batch update sums the losses of both groups and divides by the
number of participating samples. Everything else is excluded but still
forward-passed so histories keep growing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn, rng
from .data import DataView
from .engine import EpochContext, Observer, _make_batches
from .memorization import PredictionHistory


@dataclass
class RefurbishConfig:
    """Entropy threshold plus the trusted sample mask (the safe set at t_end)."""
    epsilon: float
    trusted_mask: np.ndarray  # (n,) bool

    def __post_init__(self):
        self.trusted_mask = np.asarray(self.trusted_mask, dtype=bool)
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.trusted_mask.ndim != 1:
            raise ValueError("trusted_mask must be one-dimensional")


@dataclass
class RefurbishedSet:
    """Per-sample refurbishment outcome; label -1 marks non-members."""
    labels: np.ndarray   # (n,) int64, most frequent history label or -1
    entropy: np.ndarray  # (n,) float64, normalized history entropy (nan if empty)
    mask: np.ndarray     # (n,) bool

    @classmethod
    def empty(cls, n: int) -> "RefurbishedSet":
        return cls(np.full(n, -1, dtype=np.int64), np.full(n, np.nan),
                   np.zeros(n, dtype=bool))

    @property
    def size(self) -> int:
        return int(self.mask.sum())


def normalized_entropy(counts: np.ndarray, n_classes: int) -> np.ndarray:
    """-sum p ln p / ln k per row of history label counts; nan for empty rows."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1)
    out = np.full(len(counts), np.nan)
    filled = totals > 0
    p = counts[filled] / totals[filled, None]
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    out[filled] = -plogp.sum(axis=1) / np.log(n_classes)
    return out


def refurbish_candidates(histories: PredictionHistory,
                         config: RefurbishConfig) -> RefurbishedSet:
    """Non-trusted samples whose history entropy is at most epsilon."""
    n = histories.n_samples
    if len(config.trusted_mask) != n:
        raise ValueError(f"trusted_mask covers {len(config.trusted_mask)} samples, "
                         f"histories cover {n}")
    counts = histories.label_counts()
    ent = normalized_entropy(counts, histories.n_classes)
    filled = counts.sum(axis=1) > 0
    mask = (~config.trusted_mask) & filled & (np.nan_to_num(ent, nan=2.0) <= config.epsilon)
    labels = np.full(n, -1, dtype=np.int64)
    labels[mask] = np.argmax(counts[mask], axis=1)  # ties: smallest class index
    return RefurbishedSet(labels, ent, mask)


def prestopping_plus_step(batch: nn.Batch, refurb: RefurbishedSet, trusted_mask,
                          state: nn.NetworkState, config: nn.OptimizerConfig,
                          epoch: int):
    """One mixed update: refurbished labels for refurbished samples, training
    labels for trusted ones, loss divided by the union's batch count.

    Returns (state, n_used, loss, probs); probs cover the whole batch so the
    caller can record predictions. Skips the update when the union is empty.
    """
    trusted_mask = np.asarray(trusted_mask, dtype=bool)
    if np.any(refurb.mask & trusted_mask):
        raise ValueError("refurbished set overlaps the trusted set")
    idx = batch.indices
    r_here = refurb.mask[idx]
    t_here = trusted_mask[idx]
    labels = batch.labels.copy()
    labels[r_here] = refurb.labels[idx][r_here]
    union = r_here | t_here
    n_used = int(union.sum())
    if n_used == 0:
        return state, 0, 0.0, nn.forward(batch.features, state)
    loss, grads, _, probs = nn.loss_grad_probs(batch.features, labels, state,
                                               sample_mask=union, denom=n_used)
    nn.sgd_step(state, grads, config, epoch)
    return state, n_used, loss, probs


@dataclass
class PlusResult:
    final_state: nn.NetworkState
    histories: PredictionHistory
    refurbished: RefurbishedSet  # recomputed from the final histories


def run_prestopping_plus(view: DataView, trusted_indices, net_spec: nn.NetworkSpec,
                         config: nn.OptimizerConfig, q: int, epsilon: float,
                         seed: int, observer: Optional[Observer] = None) -> PlusResult:
    """Second run from a fresh network, mixing trusted and refurbished samples.

    Histories start empty, so early epochs train on the trusted set alone; the
    refurbished set is recomputed at each epoch start from current histories.
    """
    trusted_mask = np.zeros(view.n, dtype=bool)
    trusted_mask[np.asarray(trusted_indices, dtype=np.int64)] = True
    rcfg = RefurbishConfig(epsilon, trusted_mask)
    state = nn.init_state(net_spec, rng.stream(seed, "plus_init"), rng_seed=seed)
    histories = PredictionHistory(view.n, q, view.n_classes)
    for epoch in range(1, config.total_epochs + 1):
        refurb = refurbish_candidates(histories, rcfg)
        shuffle = rng.stream(seed, "shuffle", epoch)
        updated = False
        for idx in _make_batches(view.n, config.batch_size, shuffle):
            batch = nn.Batch(idx, view.features[idx], view.labels[idx])
            _, n_used, _, probs = prestopping_plus_step(batch, refurb, trusted_mask,
                                                        state, config, epoch)
            histories.record_batch(idx, np.argmax(probs, axis=1))
            updated = updated or n_used > 0
        state.epoch = epoch
        if not updated:
            warnings.warn(f"epoch {epoch}: trusted and refurbished sets both empty "
                          f"for every batch", RuntimeWarning)
        if observer is not None:
            train_err = nn.evaluate_error(view.features, view.labels, state)
            observer(EpochContext("plus", epoch, state, histories,
                                  config.lr_at(epoch), train_err, None,
                                  no_update_epoch=not updated))
    return PlusResult(state, histories, refurbish_candidates(histories, rcfg))
