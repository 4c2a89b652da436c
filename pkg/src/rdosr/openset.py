"""Evaluation harness: openness, ROC/AUC over unknownness scores, score
histograms, the leave-one-class-out sweep, and the text export formats.

Unknown is the positive class everywhere: a true positive is an unknown
pixel whose score clears the threshold.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import HsiDataset
from .diffcore import DomainError, ShapeError, require_finite
from .models import TrainConfig, train_pipeline

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

__all__ = [
    "openness",
    "RocCurve",
    "roc",
    "histogram",
    "SweepRow",
    "SweepReport",
    "sweep",
    "export_roc",
    "export_histogram",
    "export_sweep",
]


def openness(n_train: int, n_test: int, n_target: int) -> float:
    """Openness of an evaluation: 1 - sqrt(2*n_train / (n_test + n_target))."""
    if min(n_train, n_test, n_target) < 1:
        raise DomainError("openness: all class counts must be >= 1")
    if 2 * n_train > n_test + n_target:
        raise DomainError(
            f"openness: 2*{n_train} exceeds {n_test} + {n_target}; result would be negative"
        )
    return 1.0 - math.sqrt(2.0 * n_train / (n_test + n_target))


@dataclass(frozen=True)
class RocCurve:
    """Threshold-ordered (FPR, TPR) points from (0,0) to (1,1), plus AUC."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.fpr, self.tpr])


def roc(scores_known, scores_unknown) -> RocCurve:
    """ROC of unknown-vs-known detection as the threshold sweeps the observed
    scores from maximum to minimum.

    At threshold t the detection rule is score > t, so tied scores enter the
    curve together and the trapezoid AUC matches the Mann-Whitney statistic
    (ties counting one half).
    """
    k = np.asarray(scores_known, dtype=np.float64).ravel()
    u = np.asarray(scores_unknown, dtype=np.float64).ravel()
    if k.size == 0 or u.size == 0:
        raise ShapeError("roc: both score vectors must be non-empty")
    require_finite(k, "scores_known")
    require_finite(u, "scores_unknown")

    scores = np.concatenate([k, u])
    is_unknown = np.zeros(scores.size, dtype=bool)
    is_unknown[k.size :] = True
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    u_sorted = is_unknown[order]

    # last index of each tied group; the final group closes the curve at (1,1)
    ends = np.append(np.flatnonzero(np.diff(s_sorted)), scores.size - 1)
    cum_u = np.cumsum(u_sorted)
    cum_k = np.cumsum(~u_sorted)
    tpr = np.concatenate([[0.0], cum_u[ends] / u.size])
    fpr = np.concatenate([[0.0], cum_k[ends] / k.size])
    return RocCurve(fpr=fpr, tpr=tpr, auc=float(_trapezoid(tpr, fpr)))


def histogram(scores, bins: int, lo: float, hi: float) -> np.ndarray:
    """Equal-width counts over [lo, hi]; out-of-range values are clamped into
    the end bins, so the counts always sum to the input length."""
    if bins < 1:
        raise DomainError("histogram: bins must be >= 1")
    if not lo < hi:
        raise DomainError(f"histogram: invalid range ({lo}, {hi})")
    s = np.clip(np.asarray(scores, dtype=np.float64).ravel(), lo, hi)
    counts, _ = np.histogram(s, bins=bins, range=(lo, hi))
    return counts


# ---------------------------------------------------------------------------
# leave-one-class-out sweep


@dataclass(frozen=True)
class SweepRow:
    unknown_class: int
    auc: float | None
    error: str | None = None


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    average_auc: float
    openness: float

    @property
    def failed(self) -> tuple:
        return tuple(r for r in self.rows if r.auc is None)


def _sweep_one(dataset: HsiDataset, config: TrainConfig, train_fraction: float, unknown_class: int) -> float:
    # per-run seed depends only on the held-out class, not scheduling order
    run_config = replace(config, seed=config.seed + unknown_class)
    model, _, parts = train_pipeline(dataset, {unknown_class}, run_config, train_fraction)
    known_scores = model.open_score(parts.test_known.pixels)
    unknown_scores = model.open_score(parts.unknown_pool.pixels)
    return roc(known_scores, unknown_scores).auc


def sweep(
    dataset: HsiDataset,
    config: TrainConfig,
    train_fraction: float = 0.5,
    jobs: int = 1,
) -> SweepReport:
    """Hold out each class in turn, retrain both stages on the rest, and score
    the held-out pixels against the known test pixels.

    Runs are independent; with jobs > 1 they execute in separate processes.
    A failed run becomes a row with auc=None annotated with the class and
    message; the average is over the successful rows.
    """
    if dataset.class_count < 2:
        raise DomainError("sweep needs at least 2 classes")
    classes = list(range(1, dataset.class_count + 1))
    results: dict[int, SweepRow] = {}
    if jobs <= 1:
        for cls in classes:
            results[cls] = _guarded_run(dataset, config, train_fraction, cls)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                cls: pool.submit(_sweep_one, dataset, config, train_fraction, cls)
                for cls in classes
            }
            for cls, fut in futures.items():
                try:
                    results[cls] = SweepRow(cls, float(fut.result()))
                except Exception as exc:  # noqa: BLE001 - annotate and continue
                    results[cls] = SweepRow(cls, None, f"class {cls}: {exc}")

    rows = tuple(results[cls] for cls in classes)
    aucs = [r.auc for r in rows if r.auc is not None]
    average = float(np.mean(aucs)) if aucs else float("nan")
    l_total = dataset.class_count
    return SweepReport(
        rows=rows,
        average_auc=average,
        openness=openness(l_total - 1, l_total, l_total - 1),
    )


def _guarded_run(dataset, config, train_fraction, cls) -> SweepRow:
    try:
        return SweepRow(cls, float(_sweep_one(dataset, config, train_fraction, cls)))
    except Exception as exc:  # noqa: BLE001
        return SweepRow(cls, None, f"class {cls}: {exc}")


# ---------------------------------------------------------------------------
# text exports


def export_roc(path, curve: RocCurve) -> None:
    """Comma-separated curve points with the AUC comment ahead of the final
    point, which is always (1,1)."""
    lines = ["fpr,tpr"]
    lines += [f"{f:.6f},{t:.6f}" for f, t in zip(curve.fpr[:-1], curve.tpr[:-1])]
    lines.append(f"# auc={curve.auc:.6f}")
    lines.append(f"{curve.fpr[-1]:.6f},{curve.tpr[-1]:.6f}")
    _write_lines(path, lines)


def export_histogram(path, scores_known, scores_unknown, bins: int, lo: float, hi: float) -> None:
    """Shared-bin counts for the known and unknown score distributions."""
    counts_k = histogram(scores_known, bins, lo, hi)
    counts_u = histogram(scores_unknown, bins, lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    lines = ["bin_lo,bin_hi,count_known,count_unknown"]
    lines += [
        f"{edges[i]:.6g},{edges[i + 1]:.6g},{counts_k[i]},{counts_u[i]}"
        for i in range(bins)
    ]
    _write_lines(path, lines)


def export_sweep(path, report: SweepReport) -> None:
    lines = ["unknown_class,auc"]
    for row in report.rows:
        lines.append(f"{row.unknown_class},failed" if row.auc is None else f"{row.unknown_class},{row.auc:.6f}")
    lines.append(f"average,{report.average_auc:.6f}")
    _write_lines(path, lines)


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
