"""Small ReLU MLP classifier: exact backprop, momentum SGD, step-decay LR.

All math is float64. The forward pass is pure; training mutates a
NetworkState that is exclusively owned by one training run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"PSTP1"


# ----- configuration types -----

@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths input..output; hidden activations are ReLU, output is softmax."""
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output widths")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer widths must be positive, got {sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class OptimizerConfig:
    """Momentum SGD with the LR divided by decay_factor at each decay point."""
    base_lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    total_epochs: int = 120
    decay_points: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 5.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.total_epochs <= 0:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        pts = tuple(float(p) for p in self.decay_points)
        object.__setattr__(self, "decay_points", pts)
        if any(not 0.0 < p < 1.0 for p in pts) or list(pts) != sorted(set(pts)):
            raise ValueError(f"decay_points must be strictly increasing in (0, 1), got {pts}")
        if self.decay_factor <= 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")

    def lr_at(self, epoch: int) -> float:
        """LR for a 1-indexed epoch on the global schedule clock."""
        passed = sum(1 for p in self.decay_points if epoch >= p * self.total_epochs)
        return self.base_lr / self.decay_factor ** passed


@dataclass
class Batch:
    """Mini-batch with the dataset indices it was drawn from."""
    indices: np.ndarray   # (b,) int
    features: np.ndarray  # (b, d) float64
    labels: np.ndarray    # (b,) int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b = len(self.indices)
        if self.features.ndim != 2 or self.features.shape[0] != b or len(self.labels) != b:
            raise ValueError("batch arrays disagree on length")
        if len(np.unique(self.indices)) != b:
            raise ValueError("batch indices must be distinct")
        if b and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")


@dataclass
class NetworkState:
    """Parameters plus momentum buffers; exclusively owned by one training run."""
    spec: NetworkSpec
    weights: list            # per layer (fan_in, fan_out)
    biases: list             # per layer (fan_out,)
    vel_w: list              # momentum buffers, same shapes as weights
    vel_b: list
    epoch: int = 0
    rng_seed: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            vel_w=[v.copy() for v in self.vel_w],
            vel_b=[v.copy() for v in self.vel_b],
            epoch=self.epoch,
            rng_seed=self.rng_seed,
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_state(spec: NetworkSpec, rng: np.random.Generator, rng_seed: int = 0) -> NetworkState:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases and momentum."""
    weights, biases, vel_w, vel_b = [], [], [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        vel_w.append(np.zeros((fan_in, fan_out)))
        vel_b.append(np.zeros(fan_out))
    return NetworkState(spec, weights, biases, vel_w, vel_b, epoch=0, rng_seed=rng_seed)


# ----- forward / loss / gradient -----

def _check_features(features: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected features of shape (n, {spec.input_dim}), got {x.shape}")
    return x


def _forward_cache(features, state: NetworkState):
    """Logits plus every layer's post-activation (acts[0] is the input)."""
    x = _check_features(features, state.spec)
    acts = [x]
    a = x
    for w, b in zip(state.weights[:-1], state.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        acts.append(a)
    logits = a @ state.weights[-1] + state.biases[-1]
    return logits, acts


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _per_sample_ce(logits, labels):
    # log-sum-exp guarded cross-entropy: lse(z) - z[y]
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(len(labels)), labels]


def forward(features, state: NetworkState) -> np.ndarray:
    """Class probabilities, shape (n, k); pure, no side effects."""
    logits, _ = _forward_cache(features, state)
    return _softmax(logits)


def _check_labels(labels, k: int):
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def _backprop(acts, delta, state: NetworkState):
    """Gradients from the output-layer delta (delta already carries loss scaling)."""
    n_layers = state.n_layers
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for layer in reversed(range(n_layers)):
        grad_w[layer] = acts[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            # acts[layer] > 0 is the ReLU mask of this layer's preactivation
            delta = (delta @ state.weights[layer].T) * (acts[layer] > 0.0)
    return grad_w, grad_b


def _loss_grad_core(features, labels, state: NetworkState, sample_mask=None, denom=None):
    """Shared gradient path for plain and sample-masked batches.

    Plain: mean cross-entropy over the batch. Masked: excluded samples
    contribute exactly zero and the sum is divided by denom instead of the
    batch size, which realizes training restricted to a sample subset.
    Returns (loss, (grad_w, grad_b), per_sample_losses, probs).
    """
    labels = _check_labels(labels, state.spec.n_classes)
    logits, acts = _forward_cache(features, state)
    probs = _softmax(logits)
    per_sample = _per_sample_ce(logits, labels)
    n = len(labels)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    if sample_mask is None:
        loss = float(per_sample.mean())
        delta /= float(n)
    else:
        sample_mask = np.asarray(sample_mask)
        if sample_mask.shape != (n,):
            raise ValueError(f"sample_mask must have shape ({n},), got {sample_mask.shape}")
        if denom is None or denom <= 0:
            raise ValueError(f"masked gradient needs a positive denom, got {denom}")
        delta *= sample_mask.astype(np.float64)[:, None]
        delta /= float(denom)
        loss = float(per_sample[sample_mask.astype(bool)].sum()) / float(denom)
    grad_w, grad_b = _backprop(acts, delta, state)
    return loss, (grad_w, grad_b), per_sample, probs


def loss_grad_probs(features, labels, state: NetworkState, sample_mask=None, denom=None):
    """Training-loop entry point: gradient terms plus the forward probabilities."""
    return _loss_grad_core(features, labels, state, sample_mask, denom)


def loss_and_grad(batch: Batch, state: NetworkState):
    """Mean cross-entropy loss, its exact gradient, and per-sample losses."""
    if len(batch.labels) == 0:
        raise ValueError("cannot take a gradient over an empty batch")
    loss, grads, per_sample, _ = _loss_grad_core(batch.features, batch.labels, state)
    return loss, grads, per_sample


def masked_loss_and_grad(features, labels, sample_mask, denom, state: NetworkState):
    """Gradient of the summed loss over mask members divided by denom."""
    loss, grads, per_sample, _ = _loss_grad_core(features, labels, state, sample_mask, denom)
    return loss, grads, per_sample


def sgd_step(state: NetworkState, grads, config: OptimizerConfig, epoch: int) -> NetworkState:
    """v <- momentum*v + grad; params <- params - lr(epoch)*v. Mutates state."""
    grad_w, grad_b = grads
    lr = config.lr_at(epoch)
    for layer in range(state.n_layers):
        if grad_w[layer].shape != state.weights[layer].shape:
            raise ValueError(f"layer {layer} gradient shape {grad_w[layer].shape} "
                             f"!= weight shape {state.weights[layer].shape}")
        state.vel_w[layer] *= config.momentum
        state.vel_w[layer] += grad_w[layer]
        state.vel_b[layer] *= config.momentum
        state.vel_b[layer] += grad_b[layer]
        state.weights[layer] -= lr * state.vel_w[layer]
        state.biases[layer] -= lr * state.vel_b[layer]
    return state


def per_sample_losses(features, labels, state: NetworkState) -> np.ndarray:
    """Cross-entropy of each sample against the given labels; no gradients."""
    labels = _check_labels(labels, state.spec.n_classes)
    logits, _ = _forward_cache(features, state)
    return _per_sample_ce(logits, labels)


def predict_labels(features, state: NetworkState) -> np.ndarray:
    """Argmax class per row; ties break to the smallest class index."""
    return np.argmax(forward(features, state), axis=1)


def evaluate_error(features, labels, state: NetworkState) -> float:
    """0-1 error of argmax predictions against the given labels."""
    labels = _check_labels(labels, state.spec.n_classes)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict_labels(features, state) != labels))


# ----- checkpoint file format -----
# header: magic "PSTP1", u32 layer count, u32 layer sizes
# body:   per layer W row-major then b, as little-endian f64; then the
#         momentum buffers in the same order

def save_network(state: NetworkState, path) -> None:
    """Write parameters + momentum buffers in the binary checkpoint format."""
    sizes = state.spec.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(state.weights, state.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        for vw, vb in zip(state.vel_w, state.vel_b):
            fh.write(np.ascontiguousarray(vw, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(vb, dtype="<f8").tobytes())


def load_network(path, epoch: int = 0, rng_seed: int = 0) -> NetworkState:
    """Read a checkpoint written by save_network."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    (n_sizes,) = struct.unpack_from("<I", raw, 5)
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, 9)
    spec = NetworkSpec(tuple(int(s) for s in sizes))
    off = 9 + 4 * n_sizes

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        return arr

    shapes = list(zip(sizes[:-1], sizes[1:]))
    weights = []
    biases = []
    for fan_in, fan_out in shapes:
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    vel_w, vel_b = [], []
    for fan_in, fan_out in shapes:
        vel_w.append(take((fan_in, fan_out)))
        vel_b.append(take((fan_out,)))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return NetworkState(spec, weights, biases, vel_w, vel_b, epoch=epoch, rng_seed=rng_seed)
