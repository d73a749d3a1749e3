"""Error metrics and the analysis suite: interval calibration, the
structure-dependent bias curve, concept correlations, and the ID/OOD
variant comparison.

Record-level convention throughout: a record's predicted value is the mean
of its per-pixel medians over the valid task mask, and its observed value
is the mean of the labels over the same pixels.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

VARIANTS = ("pgcbm", "vanilla", "blackbox")


class MissingVariantError(KeyError):
    pass


@dataclass
class MetricReport:
    rmsd: float
    mean_bias: float
    mean_abs_bias: float
    relative_mean_bias: float  # percent
    n: int
    variant: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class IntervalStats:
    coverage: float
    mean_rel_width: float
    std_rel_width: float
    n: int
    n_excluded: int  # records dropped for a non-positive median


@dataclass
class RecordSeries:
    """Per-record aggregates of one variant's task predictions."""

    predicted: np.ndarray  # mean of per-pixel medians over the valid mask
    observed: np.ndarray
    lower: np.ndarray  # bottom-quantile record means
    upper: np.ndarray

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.predicted - self.observed)


def record_series(pred_values: np.ndarray, labels: np.ndarray,
                  masks: np.ndarray, quantiles) -> RecordSeries:
    """Aggregate (N, K, H, W) predictions to record level over valid pixels.

    Records whose mask is entirely empty are skipped.
    """
    med = len(quantiles) // 2
    rows = {k: [] for k in ("predicted", "observed", "lower", "upper")}
    for i in range(pred_values.shape[0]):
        m = masks[i]
        if not m.any():
            continue
        rows["predicted"].append(float(pred_values[i, med][m].mean()))
        rows["observed"].append(float(labels[i][m].mean()))
        rows["lower"].append(float(pred_values[i, 0][m].mean()))
        rows["upper"].append(float(pred_values[i, -1][m].mean()))
    return RecordSeries(**{k: np.array(v) for k, v in rows.items()})


def compute_metrics(predicted, observed, variant: str = "") -> MetricReport:
    """RMSD, mean bias, mean absolute bias, and relative mean bias (%)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.shape != observed.shape or predicted.ndim != 1:
        raise ValueError("predicted and observed must be equal-length 1-D series")
    if predicted.size == 0:
        raise ValueError("cannot score an empty series")
    diff = predicted - observed
    mean_obs = float(observed.mean())
    if mean_obs == 0.0:
        raise ZeroDivisionError("mean of observed values is zero; relative bias undefined")
    bias = float(diff.mean())
    return MetricReport(
        rmsd=float(np.sqrt(np.mean(diff * diff))),
        mean_bias=bias,
        mean_abs_bias=float(np.abs(diff).mean()),
        relative_mean_bias=100.0 * bias / mean_obs,
        n=int(predicted.size),
        variant=variant,
    )


def interval_stats(series: RecordSeries) -> IntervalStats:
    """Empirical [q10, q90] coverage and relative width statistics."""
    inside = (series.observed >= series.lower) & (series.observed <= series.upper)
    coverage = float(inside.mean()) if series.observed.size else 0.0
    keep = series.predicted > 0
    n_excluded = int((~keep).sum())
    width = (series.upper[keep] - series.lower[keep]) / series.predicted[keep]
    return IntervalStats(
        coverage=coverage,
        mean_rel_width=float(width.mean()) if width.size else 0.0,
        std_rel_width=float(width.std()) if width.size else 0.0,
        n=int(series.observed.size),
        n_excluded=n_excluded,
    )


def structure_bias_curve(abs_errors, stems, n_bins: int = 5) -> tuple:
    """Equal-count bins of absolute error along the stems gradient.

    Returns (rows, flatness): rows of (bin center, mean abs error, count)
    ordered by stems, and flatness = (max bin mean - min bin mean) divided
    by the overall mean absolute error.
    """
    abs_errors = np.asarray(abs_errors, dtype=np.float64)
    stems = np.asarray(stems, dtype=np.float64)
    if n_bins < 3:
        raise ValueError("need at least 3 bins")
    if abs_errors.size < n_bins:
        raise ValueError("fewer records than bins")
    order = np.argsort(stems, kind="stable")
    rows = []
    means = []
    for chunk in np.array_split(order, n_bins):
        rows.append((float(stems[chunk].mean()), float(abs_errors[chunk].mean()),
                     int(chunk.size)))
        means.append(rows[-1][1])
    overall = float(abs_errors.mean())
    flatness = (max(means) - min(means)) / overall if overall > 0 else 0.0
    return rows, float(flatness)


CORRELATION_NAMES = ("z_cover", "z_height", "z_stems", "y_pred", "y_obs")


def concept_correlation_matrix(z_cover, z_height, z_stems, y_pred, y_obs) -> np.ndarray:
    """5x5 Pearson matrix over record-level series."""
    series = [np.asarray(s, dtype=np.float64)
              for s in (z_cover, z_height, z_stems, y_pred, y_obs)]
    n = series[0].size
    if n < 3 or any(s.size != n for s in series):
        raise ValueError("need at least 3 records with equal-length series")
    if any(s.std() == 0 for s in series):
        raise ValueError("zero-variance series has no defined correlation")
    m = np.corrcoef(np.stack(series))
    np.fill_diagonal(m, 1.0)
    return m


def ood_comparison(errors_by_variant: dict) -> tuple:
    """Per-variant ID/OOD mean absolute error and inflation ratio.

    `errors_by_variant` maps each of the three variant names to a pair of
    per-record absolute-error arrays (id, ood).  Returns (rows, ordering)
    where ordering reports whether pgcbm <= vanilla <= blackbox held.
    """
    missing = [v for v in VARIANTS if v not in errors_by_variant]
    if missing:
        raise MissingVariantError(f"missing variant results: {', '.join(missing)}")
    rows = {}
    for v in VARIANTS:
        id_err, ood_err = (np.asarray(e, dtype=np.float64)
                           for e in errors_by_variant[v])
        if id_err.size == 0 or ood_err.size == 0:
            raise ValueError(f"empty error series for variant {v}")
        id_mae = float(id_err.mean())
        ood_mae = float(ood_err.mean())
        rows[v] = {"id_mae": id_mae, "ood_mae": ood_mae,
                   "inflation": ood_mae / id_mae}
    ordering = (rows["pgcbm"]["inflation"] <= rows["vanilla"]["inflation"]
                <= rows["blackbox"]["inflation"])
    return rows, bool(ordering)


# -- report emission -------------------------------------------------------


def write_report_json(path, reports: dict, extras: dict | None = None) -> None:
    doc = {"variants": {v: r.to_dict() for v, r in reports.items()}}
    if extras:
        doc.update(extras)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_structure_csv(path, rows_by_variant: dict, flatness: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "bin_center_stems", "mean_abs_error", "count",
                    "flatness"])
        for v, rows in rows_by_variant.items():
            for center, err, count in rows:
                w.writerow([v, center, err, count, flatness[v]])


def write_intervals_csv(path, stats_by_variant: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "coverage", "mean_rel_width", "std_rel_width",
                    "n", "n_excluded"])
        for v, s in stats_by_variant.items():
            w.writerow([v, s.coverage, s.mean_rel_width, s.std_rel_width,
                        s.n, s.n_excluded])


def write_correlations_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series"] + list(CORRELATION_NAMES))
        for name, row in zip(CORRELATION_NAMES, matrix):
            w.writerow([name] + [float(x) for x in row])


def write_ood_csv(path, rows: dict, ordering: bool) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "id_mae", "ood_mae", "inflation",
                    "ordering_held"])
        for v, r in rows.items():
            w.writerow([v, r["id_mae"], r["ood_mae"], r["inflation"], ordering])
