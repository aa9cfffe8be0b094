"""Per-sample prediction histories and the memorization diagnostic.

A sample counts as memorized when the most frequent label in its recent
prediction history equals its (noisy) training label. Histories are ring
buffers of the last q predicted labels; until q predictions exist, label
frequencies use the current history length as denominator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HISTORY_MAGIC = b"PSTH1"


class PredictionHistory:
    """Fixed-capacity prediction ring buffers for n_samples samples."""

    def __init__(self, n_samples: int, q: int, n_classes: int):
        if n_samples < 1 or q < 1:
            raise ValueError(f"need n_samples >= 1 and q >= 1, got {n_samples}, {q}")
        if not 2 <= n_classes <= 256:
            raise ValueError(f"n_classes must be in [2, 256], got {n_classes}")
        if q > 255:
            raise ValueError(f"q must fit in a byte, got {q}")
        self.n_samples = int(n_samples)
        self.q = int(q)
        self.n_classes = int(n_classes)
        self._buf = np.zeros((n_samples, q), dtype=np.uint8)
        self._fill = np.zeros(n_samples, dtype=np.int64)
        self._pos = np.zeros(n_samples, dtype=np.int64)

    # ----- recording -----

    def record(self, index: int, label: int) -> None:
        """Append one predicted label, evicting the oldest once q are stored."""
        self.record_batch(np.array([index]), np.array([label]))

    def record_batch(self, indices, labels) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if indices.shape != labels.shape:
            raise ValueError("indices and labels disagree on shape")
        if len(indices) == 0:
            return
        if indices.min() < 0 or indices.max() >= self.n_samples:
            raise ValueError(f"sample index out of range [0, {self.n_samples})")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"label out of range [0, {self.n_classes})")
        if len(np.unique(indices)) != len(indices):
            raise ValueError("duplicate sample indices in one recording call")
        self._buf[indices, self._pos[indices]] = labels
        self._pos[indices] = (self._pos[indices] + 1) % self.q
        self._fill[indices] = np.minimum(self._fill[indices] + 1, self.q)

    # ----- queries -----

    def history_length(self, index: int) -> int:
        return int(self._fill[index])

    def history_of(self, index: int) -> np.ndarray:
        """Recorded labels oldest to newest."""
        fill = self._fill[index]
        if fill < self.q:
            return self._buf[index, :fill].astype(np.int64)
        pos = self._pos[index]
        return np.concatenate([self._buf[index, pos:], self._buf[index, :pos]]).astype(np.int64)

    def label_counts(self, indices=None) -> np.ndarray:
        """(m, n_classes) occurrence counts over each sample's current history."""
        if indices is None:
            indices = np.arange(self.n_samples)
        indices = np.asarray(indices, dtype=np.int64)
        counts = np.zeros((len(indices), self.n_classes), dtype=np.int64)
        buf = self._buf[indices]
        fill = self._fill[indices]
        valid = np.arange(self.q)[None, :] < fill[:, None]  # ring order irrelevant for counts
        rows = np.repeat(np.arange(len(indices)), self.q)[valid.ravel()]
        vals = buf.ravel()[valid.ravel()]
        np.add.at(counts, (rows, vals), 1)
        return counts

    def label_probability(self, index: int, label: int) -> float:
        """Frequency of label in the sample's history; error when history is empty."""
        if not 0 <= label < self.n_classes:
            raise ValueError(f"label out of range [0, {self.n_classes})")
        fill = self._fill[index]
        if fill == 0:
            raise ValueError(f"sample {index} has an empty history")
        counts = self.label_counts(np.array([index]))[0]
        return float(counts[label]) / float(fill)

    def probabilities(self, index: int) -> np.ndarray:
        """Full label-frequency vector for one sample (sums to 1)."""
        if self._fill[index] == 0:
            raise ValueError(f"sample {index} has an empty history")
        counts = self.label_counts(np.array([index]))[0]
        return counts / float(self._fill[index])

    def is_memorized(self, index: int, noisy_label: int) -> bool:
        """Most frequent history label equals the training label (ties: smallest)."""
        return bool(self.memorized_mask(np.array([noisy_label]), np.array([index]))[0])

    def memorized_mask(self, noisy_labels, indices=None) -> np.ndarray:
        """Vectorized memorization predicate; empty histories are never memorized."""
        if indices is None:
            indices = np.arange(self.n_samples)
        indices = np.asarray(indices, dtype=np.int64)
        noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
        if len(noisy_labels) != len(indices):
            raise ValueError("noisy_labels must align with indices")
        counts = self.label_counts(indices)
        top = np.argmax(counts, axis=1)  # first max = smallest class index on ties
        return (self._fill[indices] > 0) & (top == noisy_labels)

    # ----- lifecycle -----

    def copy(self) -> "PredictionHistory":
        dup = PredictionHistory(self.n_samples, self.q, self.n_classes)
        dup._buf = self._buf.copy()
        dup._fill = self._fill.copy()
        dup._pos = self._pos.copy()
        return dup

    # ----- sidecar file format -----
    # header: magic "PSTH1", u32 n_samples, u32 q; then per sample a u8 length
    # followed by that many u8 labels, oldest first

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(HISTORY_MAGIC)
            fh.write(struct.pack("<II", self.n_samples, self.q))
            for i in range(self.n_samples):
                seq = self.history_of(i)
                fh.write(struct.pack("<B", len(seq)))
                fh.write(seq.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path, n_classes: int) -> "PredictionHistory":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:5] != HISTORY_MAGIC:
            raise ValueError(f"{path}: bad magic {raw[:5]!r}, expected {HISTORY_MAGIC!r}")
        n, q = struct.unpack_from("<II", raw, 5)
        hist = cls(n, q, n_classes)
        off = 13
        for i in range(n):
            if off >= len(raw):
                raise ValueError(f"{path}: truncated at sample {i}")
            (length,) = struct.unpack_from("<B", raw, off)
            off += 1
            if length > q:
                raise ValueError(f"{path}: sample {i} claims {length} entries, q={q}")
            seq = np.frombuffer(raw, dtype=np.uint8, count=length, offset=off)
            off += length
            if len(seq) and seq.max() >= n_classes:
                raise ValueError(f"{path}: sample {i} has label {seq.max()} "
                                 f">= n_classes {n_classes}")
            for label in seq:
                hist.record(i, int(label))
        if off != len(raw):
            raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
        return hist


@dataclass
class MemorizationState:
    """Memorization snapshot over a training set at one point in time."""
    memorized: np.ndarray            # (n,) bool
    label_probs: np.ndarray | None = None  # (n, k) history frequencies, optional


def compute_memorization(history: PredictionHistory, noisy_labels,
                         with_probs: bool = False) -> MemorizationState:
    """Memorization mask (and optionally frequency vectors) for the whole set."""
    mask = history.memorized_mask(noisy_labels)
    probs = None
    if with_probs:
        counts = history.label_counts()
        fill = np.maximum(history._fill, 1)  # empty rows stay all-zero
        probs = counts / fill[:, None]
    return MemorizationState(mask, probs)


def mp_mr(memorized, noisy_labels, true_labels) -> tuple[float, float]:
    """Memorization precision and recall against the true labels.

    Precision: fraction of memorized samples whose noisy label is correct
    (defined as 1.0 when nothing is memorized). Recall: fraction of
    correctly-labeled samples that are memorized.
    """
    memorized = np.asarray(memorized, dtype=bool)
    noisy_labels = np.asarray(noisy_labels)
    true_labels = np.asarray(true_labels)
    clean = noisy_labels == true_labels
    hit = int(np.count_nonzero(memorized & clean))
    m_count = int(np.count_nonzero(memorized))
    c_count = int(np.count_nonzero(clean))
    precision = hit / m_count if m_count else 1.0
    recall = hit / c_count if c_count else 1.0
    return precision, recall
