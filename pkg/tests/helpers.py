"""Independent straight-line oracles shared across test modules.

These deliberately avoid calling library code: explicit numpy on the same
array shapes the trainer uses, so exact (bitwise) comparisons are meaningful.
"""

from collections import Counter

import numpy as np


def straight_line_forward(weights, biases, x):
    """Explicit relu-MLP forward; returns (probs, per-layer activations)."""
    acts = [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        acts.append(a)
    logits = a @ weights[-1] + biases[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), acts


def straight_line_step(weights, biases, vel_w, vel_b, x, labels, mask, n_used,
                       lr, momentum):
    """Recompute one masked momentum-SGD update with explicit numpy.

    Returns (weights, biases, vel_w, vel_b, predicted_labels). When n_used is
    zero the parameters pass through unchanged (the step is skipped).
    """
    probs, acts = straight_line_forward(weights, biases, x)
    preds = np.argmax(probs, axis=1)
    if n_used == 0:
        return weights, biases, vel_w, vel_b, preds
    delta = probs.copy()
    delta[np.arange(len(labels)), labels] -= 1.0
    delta *= np.asarray(mask).astype(np.float64)[:, None]
    delta /= float(n_used)
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for layer in reversed(range(len(weights))):
        gw[layer] = acts[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer].T) * (acts[layer] > 0.0)
    new_w, new_b, new_vw, new_vb = [], [], [], []
    for w, b, vw, vb, dw, db in zip(weights, biases, vel_w, vel_b, gw, gb):
        vw = momentum * vw + dw
        vb = momentum * vb + db
        new_vw.append(vw)
        new_vb.append(vb)
        new_w.append(w - lr * vw)
        new_b.append(b - lr * vb)
    return new_w, new_b, new_vw, new_vb, preds


def window_memorized(log, q, noisy_label):
    """Memorization predicate over a full prediction log's trailing window."""
    w = log[-q:]
    if not w:
        return False
    counts = Counter(w)
    best = max(counts.values())
    return min(lbl for lbl, c in counts.items() if c == best) == noisy_label
