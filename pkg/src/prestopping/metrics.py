"""Run instrumentation: per-epoch metrics, loss histograms, run summaries.

True labels cross into the pipeline here and only here. The trainer hands an
EpochContext to a MetricsCollector, which joins it against the full dataset
(noisy and true labels) to score memorization precision/recall and test error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import nn
from .data import DataView, NoisyDataset
from .engine import EpochContext
from .memorization import mp_mr

CSV_FIELDS = ("epoch", "train_error", "validation_error", "test_error", "mp", "mr",
              "safe_set_size", "memorized_true_count", "memorized_false_count",
              "safe_set_precision", "lr", "phase")


@dataclass
class EpochMetrics:
    epoch: int
    train_error: float
    validation_error: Optional[float]
    test_error: float
    mp: float
    mr: float
    safe_set_size: int
    memorized_true_count: int
    memorized_false_count: int
    safe_set_precision: float
    lr: float
    phase: str


def snapshot_epoch(ctx: EpochContext, train_ds: NoisyDataset,
                   test_view: DataView) -> EpochMetrics:
    """Score one epoch: errors plus the memorized-set composition."""
    mask = ctx.histories.memorized_mask(train_ds.noisy_labels)
    mp, mr = mp_mr(mask, train_ds.noisy_labels, train_ds.true_labels)
    clean = train_ds.noisy_labels == train_ds.true_labels
    true_count = int(np.count_nonzero(mask & clean))
    false_count = int(np.count_nonzero(mask & ~clean))
    size = int(np.count_nonzero(mask))
    precision = true_count / size if size else 1.0
    test_error = nn.evaluate_error(test_view.features, test_view.labels, ctx.state)
    return EpochMetrics(ctx.epoch, ctx.train_error, ctx.validation_error, test_error,
                        mp, mr, size, true_count, false_count, precision,
                        ctx.lr, ctx.phase)


@dataclass
class LossHistogram:
    """Normalized per-group loss densities over shared log-spaced bins."""
    epoch: int
    edges: np.ndarray          # (bins + 1,)
    clean_counts: np.ndarray   # (bins,) raw counts, correctly-labeled samples
    noisy_counts: np.ndarray   # (bins,) raw counts, mislabeled samples

    @property
    def clean_density(self) -> np.ndarray:
        total = self.clean_counts.sum()
        return self.clean_counts / total if total else np.zeros_like(self.clean_counts, float)

    @property
    def noisy_density(self) -> np.ndarray:
        total = self.noisy_counts.sum()
        return self.noisy_counts / total if total else np.zeros_like(self.noisy_counts, float)


def loss_histogram(train_ds: NoisyDataset, state, epoch: int, bins: int = 50,
                   lo: float = 1e-6, hi: float = 20.0) -> LossHistogram:
    """Training-loss histograms split by label correctness.

    Losses are taken against the noisy labels (the ones trained on) and
    clipped into [lo, hi], so each group's counts sum to its group size.
    """
    losses = nn.per_sample_losses(train_ds.features, train_ds.noisy_labels, state)
    losses = np.clip(losses, lo, hi)
    edges = np.logspace(math.log10(lo), math.log10(hi), bins + 1)
    clean = train_ds.noisy_labels == train_ds.true_labels
    clean_counts, _ = np.histogram(losses[clean], bins=edges)
    noisy_counts, _ = np.histogram(losses[~clean], bins=edges)
    return LossHistogram(epoch, edges, clean_counts, noisy_counts)


class MetricsCollector:
    """Observer that accumulates EpochMetrics rows for one run.

    Captures a loss histogram once, at the first epoch whose training
    accuracy exceeds 50%.
    """

    def __init__(self, train_ds: NoisyDataset, test_view: DataView):
        self.train_ds = train_ds
        self.test_view = test_view
        self.rows: list[EpochMetrics] = []
        self.histogram: Optional[LossHistogram] = None

    def __call__(self, ctx: EpochContext) -> None:
        self.rows.append(snapshot_epoch(ctx, self.train_ds, self.test_view))
        if self.histogram is None and (1.0 - ctx.train_error) > 0.5:
            self.histogram = loss_histogram(self.train_ds, ctx.state, ctx.epoch)

    @property
    def best_test_error(self) -> float:
        if not self.rows:
            raise ValueError("no epochs recorded")
        return min(r.test_error for r in self.rows)


# ----- file formats -----

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_metrics_csv(rows: list[EpochMetrics], path) -> None:
    """Header plus one row per epoch, full float precision, stable ordering."""
    with open(path, "w") as fh:
        fh.write(",".join(CSV_FIELDS) + "\n")
        for r in rows:
            d = asdict(r)
            fh.write(",".join(_fmt(d[f]) for f in CSV_FIELDS) + "\n")


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != list(CSV_FIELDS):
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(CSV_FIELDS):
                raise ValueError(f"{path}: line {lineno}: expected "
                                 f"{len(CSV_FIELDS)} cells, got {len(cells)}")
            rows.append(EpochMetrics(
                epoch=int(cells[0]),
                train_error=float(cells[1]),
                validation_error=float(cells[2]) if cells[2] else None,
                test_error=float(cells[3]),
                mp=float(cells[4]),
                mr=float(cells[5]),
                safe_set_size=int(cells[6]),
                memorized_true_count=int(cells[7]),
                memorized_false_count=int(cells[8]),
                safe_set_precision=float(cells[9]),
                lr=float(cells[10]),
                phase=cells[11],
            ))
    return rows


def write_histogram_csv(hist: LossHistogram, path) -> None:
    """Columns: bin_left, bin_right, clean_density, noisy_density."""
    cd, nd = hist.clean_density, hist.noisy_density
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,clean_density,noisy_density\n")
        for i in range(len(cd)):
            fh.write(f"{_fmt(float(hist.edges[i]))},{_fmt(float(hist.edges[i + 1]))},"
                     f"{_fmt(float(cd[i]))},{_fmt(float(nd[i]))}\n")


# ----- run summaries -----

@dataclass
class RunSummary:
    method: str
    heuristic: Optional[str]
    noise: str
    tau: float
    q: int
    seed: int
    best_test_error: float
    stop_epoch: Optional[int]
    wall_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def summarize(runs: list[RunSummary]) -> dict:
    """Per-run records plus grouped aggregates keyed by configuration.

    Groups preserve (method, heuristic, noise, tau, q). Standard error is the
    sample standard deviation over sqrt(n), defined as 0 when n = 1.
    """
    groups = {}
    for r in runs:
        groups.setdefault((r.method, r.heuristic, r.noise, r.tau, r.q), []).append(r)
    grouped = []
    for key in sorted(groups, key=lambda k: tuple(str(p) for p in k)):
        method, heuristic, noise, tau, q = key
        errs = np.array([r.best_test_error for r in groups[key]])
        n = len(errs)
        se = float(errs.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        grouped.append({
            "method": method, "heuristic": heuristic, "noise": noise,
            "tau": tau, "q": q, "n_runs": n,
            "mean_best_test_error": float(errs.mean()),
            "se_best_test_error": se,
        })
    return {"runs": [r.to_dict() for r in runs], "groups": grouped}


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_summary_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ----- plotting convenience -----

PLOTS_GP = """\
# gnuplot script for one run directory; expects metrics.csv alongside
set datafile separator ","
set key autotitle columnhead outside
set term pngcairo size 1200,480
set output "curves.png"
set multiplot layout 1,2
set xlabel "epoch"
set ylabel "error"
plot "metrics.csv" using 1:2 with lines title "train", \\
     "metrics.csv" using 1:4 with lines title "test"
set ylabel "memorization precision / recall"
set yrange [0:1]
plot "metrics.csv" using 1:5 with lines title "MP", \\
     "metrics.csv" using 1:6 with lines title "MR"
unset multiplot
"""


def write_plots_gp(path) -> None:
    with open(path, "w") as fh:
        fh.write(PLOTS_GP)
