"""Coverage, efficiency and point-accuracy summaries.

Reports pair a coverage estimate with the five-number efficiency
summary of region measures, a size-adaptivity rank correlation, and
point metrics (mean Euclidean error, success-rate-within-threshold
curves). When examples carry landmark labels the report is produced
pooled and per landmark.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import LengthMismatch, MissingField

__all__ = [
    "coverage",
    "efficiency_stats",
    "spearman",
    "point_metrics",
    "EvaluationReport",
    "build_report",
    "build_reports",
    "reports_to_json",
    "reports_from_json",
    "render_text",
    "DEFAULT_SDR_THRESHOLDS",
]

DEFAULT_SDR_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)


def coverage(regions, truths) -> float:
    """Fraction of truths inside their paired region."""
    regions = list(regions)
    truths = list(truths)
    if len(regions) != len(truths):
        raise LengthMismatch(
            f"{len(regions)} regions vs {len(truths)} truths")
    if not regions:
        raise LengthMismatch("cannot compute coverage of zero pairs")
    hits = sum(1 for r, y in zip(regions, truths) if r.contains(y))
    return hits / len(regions)


def efficiency_stats(measures) -> dict:
    """Five-number summary of region measures.

    ``std`` is the population standard deviation; quartiles use linear
    interpolation between order statistics.
    """
    arr = np.asarray(list(measures), dtype=float)
    if arr.size == 0:
        raise LengthMismatch("cannot summarize zero measures")
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=0)),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
    }


def spearman(sizes, errors) -> tuple[float, bool]:
    """Spearman rank correlation with average ranks for ties.

    Returns ``(r_s, degenerate)``. When either input is constant the
    correlation is undefined; a warning is emitted and ``(0.0, True)``
    is returned.
    """
    a = np.asarray(list(sizes), dtype=float)
    b = np.asarray(list(errors), dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} sizes vs {b.size} errors")
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        warnings.warn("rank correlation undefined for constant input; "
                      "reporting 0.0", stacklevel=2)
        return 0.0, True
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = float(np.sqrt((ra @ ra) * (rb @ rb)))
    if denom == 0.0:
        warnings.warn("rank correlation undefined (zero rank variance); "
                      "reporting 0.0", stacklevel=2)
        return 0.0, True
    return float((ra @ rb) / denom), False


def point_metrics(points, truths, thresholds=DEFAULT_SDR_THRESHOLDS) -> dict:
    """Mean Euclidean point error and success rates below thresholds.

    A detection succeeds at threshold ``t`` when its distance is
    strictly below ``t`` mm.
    """
    P = np.asarray(list(points), dtype=float)
    T = np.asarray(list(truths), dtype=float)
    if P.shape != T.shape:
        raise LengthMismatch(f"points shape {P.shape} vs truths shape {T.shape}")
    if P.size == 0:
        raise LengthMismatch("cannot compute point metrics of zero pairs")
    dist = np.linalg.norm(P - T, axis=1)
    return {
        "pe_mean": float(dist.mean()),
        "sdr": {float(t): float(np.mean(dist < t)) for t in thresholds},
    }


@dataclass(eq=False)
class EvaluationReport:
    """Summary of one method at one miscoverage level."""

    n: int
    coverage: float
    efficiency: dict
    adaptivity: float
    adaptivity_degenerate: bool
    pe_mean: float
    sdr: dict

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "coverage": self.coverage,
            "efficiency": dict(self.efficiency),
            "adaptivity": self.adaptivity,
            "adaptivity_degenerate": self.adaptivity_degenerate,
            "pe_mean": self.pe_mean,
            "sdr": {repr(float(t)): v for t, v in self.sdr.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvaluationReport":
        return cls(
            n=int(obj["n"]),
            coverage=float(obj["coverage"]),
            efficiency={k: float(v) for k, v in obj["efficiency"].items()},
            adaptivity=float(obj["adaptivity"]),
            adaptivity_degenerate=bool(obj["adaptivity_degenerate"]),
            pe_mean=float(obj["pe_mean"]),
            sdr={float(t): float(v) for t, v in obj["sdr"].items()},
        )


def build_report(regions, examples, sdr_thresholds=DEFAULT_SDR_THRESHOLDS
                 ) -> EvaluationReport:
    """Report for aligned ``(region, example)`` pairs.

    Examples must carry point estimates (used for the error side of the
    adaptivity correlation and the point metrics).
    """
    regions = list(regions)
    examples = list(examples)
    if len(regions) != len(examples):
        raise LengthMismatch(
            f"{len(regions)} regions vs {len(examples)} examples")
    for ex in examples:
        if ex.point is None:
            raise MissingField(f"example {ex.id}: report needs a point estimate")
    truths = [ex.truth for ex in examples]
    points = [ex.point for ex in examples]
    cov = coverage(regions, truths)
    measures = [r.measure() for r in regions]
    eff = efficiency_stats(measures)
    errors = np.linalg.norm(np.asarray(points) - np.asarray(truths), axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r_s, degenerate = spearman(measures, errors)
    pm = point_metrics(points, truths, sdr_thresholds)
    return EvaluationReport(
        n=len(examples),
        coverage=cov,
        efficiency=eff,
        adaptivity=r_s,
        adaptivity_degenerate=degenerate,
        pe_mean=pm["pe_mean"],
        sdr=pm["sdr"],
    )


def build_reports(regions, examples, sdr_thresholds=DEFAULT_SDR_THRESHOLDS) -> dict:
    """Pooled report plus one per landmark label when labels exist.

    Returns ``{"pooled": report, "per_landmark": {label: report}}``;
    ``per_landmark`` is empty when no example carries a label.
    """
    regions = list(regions)
    examples = list(examples)
    pooled = build_report(regions, examples, sdr_thresholds)
    per_landmark: dict = {}
    labels = sorted({ex.landmark for ex in examples if ex.landmark is not None})
    for label in labels:
        idx = [i for i, ex in enumerate(examples) if ex.landmark == label]
        per_landmark[label] = build_report(
            [regions[i] for i in idx], [examples[i] for i in idx], sdr_thresholds)
    return {"pooled": pooled, "per_landmark": per_landmark}


def reports_to_json(reports: dict, method: str, alpha: float) -> dict:
    return {
        "method": method,
        "alpha": alpha,
        "pooled": reports["pooled"].to_json(),
        "per_landmark": {str(k): v.to_json()
                         for k, v in reports["per_landmark"].items()},
    }


def reports_from_json(obj: dict) -> dict:
    return {
        "pooled": EvaluationReport.from_json(obj["pooled"]),
        "per_landmark": {int(k): EvaluationReport.from_json(v)
                         for k, v in obj["per_landmark"].items()},
    }


def render_text(reports: dict, method: str, alpha: float) -> str:
    """Fixed-width table over pooled and per-landmark rows."""
    header = (f"method: {method}  alpha: {alpha:.3f}  "
              f"n: {reports['pooled'].n}")
    cols = (f"{'':14s}{'Cover%':>8s}{'Mean':>12s}{'Std':>12s}"
            f"{'Median':>12s}{'Q1':>12s}{'Q3':>12s}{'r_s':>8s}{'PE':>8s}")
    lines = [header, cols]

    def row(label: str, rep: EvaluationReport) -> str:
        e = rep.efficiency
        r_s = "n/a" if rep.adaptivity_degenerate else f"{rep.adaptivity:.3f}"
        return (f"{label:14s}{100 * rep.coverage:8.2f}{e['mean']:12.3f}"
                f"{e['std']:12.3f}{e['median']:12.3f}{e['q1']:12.3f}"
                f"{e['q3']:12.3f}{r_s:>8s}{rep.pe_mean:8.3f}")

    lines.append(row("pooled", reports["pooled"]))
    for label in sorted(reports["per_landmark"]):
        lines.append(row(f"landmark {label}", reports["per_landmark"][label]))
    sdr = reports["pooled"].sdr
    sdr_txt = "  ".join(f"{t:g}mm: {100 * v:.1f}" for t, v in sorted(sdr.items()))
    lines.append(f"SDR% (pooled): {sdr_txt}")
    return "\n".join(lines) + "\n"
