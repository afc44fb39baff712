from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, Optional

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from app.metrics import AGGREGATE_ID, AcceptanceThresholds, evaluate_acceptance, read_eval_csv  # noqa: E402
from app.run_config import resolve_path  # noqa: E402


def _format_percent(value: float) -> str:
    return f"{float(value or 0.0) * 100:.1f}%"


def _summary_row(path: Path) -> Dict[str, Any]:
    rows = read_eval_csv(path)
    for row in rows:
        if row.get("pair_id") == AGGREGATE_ID:
            return row
    raise ValueError(f"no {AGGREGATE_ID} row in {path}")


def _baseline(args: argparse.Namespace) -> Optional[float]:
    if args.baseline_aepe is not None:
        return float(args.baseline_aepe)
    if args.baseline_csv:
        return float(_summary_row(resolve_path(args.baseline_csv))["aepe"])
    return None


def _print_text_report(path: Path, summary: Dict[str, Any], readiness: Dict[str, Any]) -> None:
    print(f"[{path}]")
    jaccard = summary.get("jaccard")
    print(
        "  aepe={aepe:.4f} pck1={pck1} pck3={pck3} pck5={pck5} jaccard={jaccard} n_valid={n_valid}".format(
            aepe=float(summary.get("aepe") or 0.0),
            pck1=_format_percent(float(summary.get("pck1") or 0.0)),
            pck3=_format_percent(float(summary.get("pck3") or 0.0)),
            pck5=_format_percent(float(summary.get("pck5") or 0.0)),
            jaccard="-" if jaccard is None else _format_percent(float(jaccard)),
            n_valid=int(summary.get("n_valid") or 0),
        )
    )
    print(f"  accepted={'YES' if readiness.get('ready') else 'NO'}")
    for check in list(readiness.get("checks") or []):
        status = "OK" if check.get("ok") else "FAIL"
        print(
            f"    - {status} {check.get('name')}: {_format_percent(check.get('actual'))} "
            f"{check.get('direction')} {_format_percent(check.get('expected'))}"
        )


def main() -> int:
    parser = argparse.ArgumentParser(description="Check an eval.csv aggregate row against acceptance thresholds.")
    parser.add_argument("eval_csv", help="eval.csv written by `python -m app eval`.")
    parser.add_argument("--baseline-aepe", type=float, default=None, help="AEPE of an untrained model on the same split.")
    parser.add_argument("--baseline-csv", default="", help="eval.csv of an untrained model; its ALL row supplies the baseline.")
    parser.add_argument("--min-pck3", type=float, default=AcceptanceThresholds.min_pck3)
    parser.add_argument("--min-jaccard", type=float, default=AcceptanceThresholds.min_jaccard)
    parser.add_argument("--json", action="store_true", help="Print JSON instead of a text summary.")
    args = parser.parse_args()

    path = resolve_path(args.eval_csv)
    summary = _summary_row(path)
    limits = AcceptanceThresholds(min_pck3=args.min_pck3, min_jaccard=args.min_jaccard)
    readiness = evaluate_acceptance(summary, baseline_aepe=_baseline(args), thresholds=limits)
    if args.json:
        print(json.dumps({"eval_csv": str(path), "summary": summary, "readiness": readiness}, ensure_ascii=False, indent=2))
    else:
        _print_text_report(path, summary, readiness)
    return 0 if readiness.get("ready") else 1


if __name__ == "__main__":
    raise SystemExit(main())
