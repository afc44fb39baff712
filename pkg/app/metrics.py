from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CorrespondenceMap, MatchabilityMask

DEFAULT_PCK_THRESHOLDS = (1.0, 3.0, 5.0)
MATCHABILITY_THRESHOLD = 0.5
EVAL_COLUMNS = ("pair_id", "aepe", "pck1", "pck3", "pck5", "jaccard", "n_valid")
AGGREGATE_ID = "ALL"


def _check_shapes(est: CorrespondenceMap, gt: CorrespondenceMap, mask: MatchabilityMask) -> None:
    if est.data.shape != gt.data.shape:
        raise ValueError("estimated and ground-truth maps differ in resolution")
    if (mask.height, mask.width) != (gt.height, gt.width):
        raise ValueError("mask resolution does not match the maps")


def endpoint_errors(est: CorrespondenceMap, gt: CorrespondenceMap, mask: MatchabilityMask) -> np.ndarray:
    """Pixel-space endpoint errors at mask-true locations (align-corners unit conversion)."""
    _check_shapes(est, gt, mask)
    if not mask.data.any():
        raise ValueError("empty mask")
    delta = est.data.astype(np.float64) - gt.data.astype(np.float64)
    du = delta[..., 0] * (gt.width - 1) / 2.0
    dv = delta[..., 1] * (gt.height - 1) / 2.0
    return np.hypot(du, dv)[mask.data]


def aepe(est: CorrespondenceMap, gt: CorrespondenceMap, mask: MatchabilityMask) -> float:
    return float(np.mean(endpoint_errors(est, gt, mask)))


def pck(
    est: CorrespondenceMap,
    gt: CorrespondenceMap,
    mask: MatchabilityMask,
    thresholds: Sequence[float] = DEFAULT_PCK_THRESHOLDS,
) -> Dict[float, float]:
    if any(float(t) <= 0 for t in thresholds):
        raise ValueError("pck thresholds must be positive")
    errors = endpoint_errors(est, gt, mask)
    return {float(t): float(np.count_nonzero(errors <= t)) / errors.size for t in thresholds}


def jaccard(pred_mask: MatchabilityMask, gt_mask: MatchabilityMask) -> float:
    if pred_mask.data.shape != gt_mask.data.shape:
        raise ValueError("masks differ in resolution")
    union = int(np.count_nonzero(pred_mask.data | gt_mask.data))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pred_mask.data & gt_mask.data)) / union


def binarize_matchability(probabilities: np.ndarray, threshold: float = MATCHABILITY_THRESHOLD) -> MatchabilityMask:
    return MatchabilityMask(np.asarray(probabilities) >= threshold)


def cumulative_histogram(values: Iterable[float], thresholds: Sequence[float]) -> List[Tuple[float, float]]:
    """(threshold, fraction of values <= threshold) rows; non-finite values count toward the total only."""
    array = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64).reshape(-1)
    total = max(array.size, 1)
    return [(float(t), float(np.count_nonzero(array <= t)) / total) for t in thresholds]


@dataclass
class EvalReport:
    pair_id: str
    aepe: float
    pck: Dict[float, float] = field(default_factory=dict)
    jaccard: Optional[float] = None
    n_valid: int = 0

    def as_row(self) -> Dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "aepe": self.aepe,
            "pck1": self.pck.get(1.0, float("nan")),
            "pck3": self.pck.get(3.0, float("nan")),
            "pck5": self.pck.get(5.0, float("nan")),
            "jaccard": "" if self.jaccard is None else self.jaccard,
            "n_valid": self.n_valid,
        }


def evaluate_pair(
    pair_id: str,
    est: CorrespondenceMap,
    gt: CorrespondenceMap,
    gt_mask: MatchabilityMask,
    *,
    probabilities: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = DEFAULT_PCK_THRESHOLDS,
    masked: bool = True,
) -> EvalReport:
    region = gt_mask if masked else MatchabilityMask(np.ones_like(gt_mask.data))
    iou = None
    if probabilities is not None:
        iou = jaccard(binarize_matchability(probabilities), gt_mask)
    return EvalReport(
        pair_id=pair_id,
        aepe=aepe(est, gt, region),
        pck=pck(est, gt, region, thresholds),
        jaccard=iou,
        n_valid=int(np.count_nonzero(region.data)),
    )


def summarize_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise ValueError("no reports to summarize")
    thresholds = sorted({t for report in reports for t in report.pck})
    ious = [report.jaccard for report in reports if report.jaccard is not None]
    return EvalReport(
        pair_id=AGGREGATE_ID,
        aepe=float(np.mean([report.aepe for report in reports])),
        pck={t: float(np.mean([report.pck.get(t, 0.0) for report in reports])) for t in thresholds},
        jaccard=float(np.mean(ious)) if ious else None,
        n_valid=sum(report.n_valid for report in reports),
    )


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(column, "")) for column in columns])


def write_eval_csv(path: Path, reports: Sequence[EvalReport]) -> EvalReport:
    summary = summarize_reports(reports)
    write_csv(path, EVAL_COLUMNS, [report.as_row() for report in [*reports, summary]])
    return summary


def write_histogram_csv(path: Path, rows: Sequence[Tuple[float, float]]) -> None:
    write_csv(path, ("threshold", "cumulative_fraction"), [{"threshold": t, "cumulative_fraction": f} for t, f in rows])


def _float(value: Any) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float("nan")


def read_eval_csv(path: Path) -> List[Dict[str, Any]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    parsed: List[Dict[str, Any]] = []
    for row in rows:
        parsed.append(
            {
                "pair_id": str(row.get("pair_id") or "").strip(),
                "aepe": _float(row.get("aepe")),
                "pck1": _float(row.get("pck1")),
                "pck3": _float(row.get("pck3")),
                "pck5": _float(row.get("pck5")),
                "jaccard": _float(row.get("jaccard")) if str(row.get("jaccard") or "").strip() else None,
                "n_valid": int(_float(row.get("n_valid")) if row.get("n_valid") else 0),
            }
        )
    return parsed


@dataclass(frozen=True)
class AcceptanceThresholds:
    min_aepe_reduction: float = 0.5
    min_pck3: float = 0.5
    min_jaccard: float = 0.6


def evaluate_acceptance(
    summary: Dict[str, Any],
    *,
    baseline_aepe: Optional[float] = None,
    thresholds: AcceptanceThresholds | None = None,
) -> Dict[str, Any]:
    """Named pass/fail checks on an aggregate eval row.

    `summary` carries `aepe`, `pck3` and optionally `jaccard`; the AEPE check is only produced
    when an untrained baseline is supplied.
    """
    limits = thresholds or AcceptanceThresholds()
    checks: List[Dict[str, Any]] = []
    aepe_value = float(summary.get("aepe") or 0.0)
    if baseline_aepe is not None and baseline_aepe > 0:
        reduction = 1.0 - aepe_value / float(baseline_aepe)
        checks.append(
            {
                "name": "aepe_reduction",
                "ok": reduction >= float(limits.min_aepe_reduction),
                "actual": reduction,
                "expected": float(limits.min_aepe_reduction),
                "direction": ">=",
            }
        )
    pck3 = float(summary.get("pck3") or 0.0)
    checks.append(
        {
            "name": "pck3",
            "ok": pck3 > float(limits.min_pck3),
            "actual": pck3,
            "expected": float(limits.min_pck3),
            "direction": ">",
        }
    )
    if summary.get("jaccard") not in (None, ""):
        iou = float(summary["jaccard"])
        checks.append(
            {
                "name": "jaccard",
                "ok": iou > float(limits.min_jaccard),
                "actual": iou,
                "expected": float(limits.min_jaccard),
                "direction": ">",
            }
        )
    return {
        "ready": all(bool(check["ok"]) for check in checks),
        "checks": checks,
        "thresholds": {
            "min_aepe_reduction": float(limits.min_aepe_reduction),
            "min_pck3": float(limits.min_pck3),
            "min_jaccard": float(limits.min_jaccard),
        },
    }
