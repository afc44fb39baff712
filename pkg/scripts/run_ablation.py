from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from app.build_info import configure_logging  # noqa: E402
from app.experiments import ABLATION_VARIANTS, run_ablation  # noqa: E402
from app.metrics import write_csv  # noqa: E402
from app.model import PyramidConfig  # noqa: E402
from app.run_config import log_level, resolve_path  # noqa: E402
from app.synth_data import dataset_resolution, load_dataset  # noqa: E402
from app.training import TrainConfig  # noqa: E402


def _print_text_report(report: Dict[str, Any]) -> None:
    print(f"[{report['data']}] seeds={report['seeds']}")
    for variant, value in report["means"].items():
        print(f"  {variant:<10} mean_val_aepe={value:.4f}")
    for check in report["checks"]:
        status = "OK" if check.get("ok") else "FAIL"
        print(f"    - {status} {check.get('name')}: wins {check.get('actual')} {check.get('direction')} {check.get('expected')}")


def main() -> int:
    parser = argparse.ArgumentParser(description="Train correlation/normalisation/parametrisation variants and compare validation AEPE.")
    parser.add_argument("--data", required=True, help="Dataset directory with train and val splits.")
    parser.add_argument("--out", default="", help="Optional ablation.csv destination directory.")
    parser.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--levels", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--radius", type=int, default=1, help="Local correlation radius for the local variant.")
    parser.add_argument("--json", action="store_true", help="Print JSON instead of a text summary.")
    args = parser.parse_args()

    configure_logging(log_level())
    data_dir = resolve_path(args.data)
    train_pairs = load_dataset(data_dir, split="train")
    val_pairs = load_dataset(data_dir, split="val")
    base = PyramidConfig.for_levels(args.levels, dataset_resolution(data_dir))
    opt_cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size)
    seeds = [int(part) for part in args.seeds.split(",") if part.strip()]
    variants = [part.strip() for part in args.variants.split(",") if part.strip()]
    result = run_ablation(train_pairs, val_pairs, base, opt_cfg, variants=variants, seeds=seeds, local_radius=args.radius)

    if args.out:
        out_dir = resolve_path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "ablation.csv", ("variant", "seed", "val_aepe"), result.rows())
        logging.getLogger("dgc-desk.experiments").info("Wrote %s", out_dir / "ablation.csv")

    report = {
        "data": str(data_dir),
        "seeds": seeds,
        "means": {variant: result.mean(variant) for variant in variants},
        "checks": result.ordering_checks(),
    }
    if args.json:
        print(json.dumps(report, ensure_ascii=False, indent=2))
    else:
        _print_text_report(report)
    return 0 if all(check["ok"] for check in report["checks"]) else 1


if __name__ == "__main__":
    raise SystemExit(main())
