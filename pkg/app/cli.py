from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .build_info import APP_VERSION, RunLog, build_info_payload, configure_logging
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import CorrespondenceMap
from .metrics import (
    EVAL_COLUMNS,
    EvalReport,
    cumulative_histogram,
    evaluate_acceptance,
    evaluate_pair,
    write_csv,
    write_eval_csv,
    write_histogram_csv,
)
from .model import ModelState, PyramidConfig, init_model_state, predict_batch
from .pose import (
    ANGLE_THRESHOLDS,
    EPIPOLAR_THRESHOLDS,
    InsufficientMatchesError,
    PoseResult,
    estimate_pair_pose,
    inject_outliers,
    matches_from_map,
)
from .pose_scene import generate_pose_dataset, pose_path, read_pose, write_pose_files
from .report_excel import build_experiment_xlsx
from .run_config import (
    RunConfig,
    apply_overrides,
    format_value,
    load_config,
    log_level,
    render_config,
    resolve_path,
)
from .synth_data import (
    MANIFEST_NAME,
    DataError,
    TrainingPair,
    dataset_resolution,
    generate_dataset,
    load_dataset,
    parse_kinds,
    write_dataset,
)
from .training import TraceRow, train, write_trace_csv

logger = logging.getLogger("dgc-desk")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
CHECKPOINT_NAME = "checkpoint.ckpt"
POSE_COLUMNS = ("pair_id", "rot_err_deg", "trans_err_deg", "inliers", "matches", "median_epi_px")
PREDICT_CHUNK = 8


class UsageError(Exception):
    pass


class CliArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# flag dest -> config key; flags default to None so unset flags never override the config file
_FLAG_KEYS: Dict[str, str] = {
    "n": "dataset.size",
    "kinds": "dataset.kinds",
    "strength": "dataset.strength",
    "data_seed": "dataset.seed",
    "resolution": "dataset.resolution",
    "val_fraction": "dataset.val_fraction",
    "noise_std": "dataset.noise_std",
    "pose_scenes": "dataset.pose",
    "correlation": "model.correlation",
    "radius": "model.local_radius",
    "l2norm": "model.l2norm_correlation",
    "parametrization": "model.parametrization",
    "matchability": "model.use_matchability",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "train_seed": "train.seed",
    "beta": "train.beta",
    "freeze_encoder": "train.freeze_encoder",
    "thresholds": "eval.thresholds",
    "masked": "eval.masked",
    "split": "eval.split",
    "iters": "pose.iters",
    "restarts": "pose.restarts",
    "inlier_thresh": "pose.inlier_thresh_px",
    "stride": "pose.stride",
    "conf_threshold": "pose.conf_threshold",
    "outlier_fraction": "pose.outlier_fraction",
    "pose_seed": "pose.seed",
}


def _add_common(parser: argparse.ArgumentParser, *, out_required: bool = True) -> None:
    parser.add_argument("--config", default=None, help="key=value config file (group.field=value lines)")
    parser.add_argument("--out", required=out_required, help="Output directory (relative paths go under DGC_STORAGE_ROOT)")


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(prog="dgc-desk", description="Dense geometric correspondence pipeline at desk scale.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=CliArgumentParser)

    gen = sub.add_parser("gen-data", help="Generate a synthetic training or pose dataset")
    _add_common(gen)
    gen.add_argument("--n", type=int, default=None, help="Number of pairs")
    gen.add_argument("--kinds", default=None, help="Comma list of affine,tps,homo (round-robin)")
    gen.add_argument("--strength", type=float, default=None, help="Transformation strength in [0, 0.4]")
    gen.add_argument("--seed", dest="data_seed", type=int, default=None)
    gen.add_argument("--resolution", type=int, default=None)
    gen.add_argument("--val-fraction", type=float, default=None)
    gen.add_argument("--noise-std", type=float, default=None)
    gen.add_argument("--pose", dest="pose_scenes", action="store_const", const="true", default=None, help="Render calibrated two-view scenes with recorded poses")

    tr = sub.add_parser("train", help="Train a model, optionally over a curriculum of datasets")
    _add_common(tr)
    tr.add_argument("--data", action="append", required=True, help="Dataset directory; repeat for a curriculum")
    tr.add_argument("--resume", default=None, help="Checkpoint to continue from")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--seed", dest="train_seed", type=int, default=None)
    tr.add_argument("--beta", type=float, default=None, help="Matchability loss weight")
    tr.add_argument("--freeze-encoder", action="store_const", const="true", default=None)
    tr.add_argument("--levels", type=int, default=None, help="Pyramid levels (rebuilds per-level defaults)")
    tr.add_argument("--correlation", choices=("global", "local"), default=None)
    tr.add_argument("--radius", type=int, default=None, help="Local correlation radius")
    tr.add_argument("--no-l2norm", dest="l2norm", action="store_const", const="false", default=None)
    tr.add_argument("--parametrization", choices=("map", "flow"), default=None)
    tr.add_argument("--matchability", action="store_const", const="true", default=None)

    ev = sub.add_parser("eval", help="Evaluate AEPE / PCK / Jaccard on a dataset")
    _add_common(ev)
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--split", choices=("train", "val", "all"), default=None)
    ev.add_argument("--unmasked", dest="masked", action="store_const", const="false", default=None)
    ev.add_argument("--thresholds", default=None, help="Comma list of PCK pixel thresholds")
    ev.add_argument("--use-gt-map", action="store_true", help="Evaluate ground truth against itself")
    ev.add_argument("--xlsx", action="store_true", help="Also write eval.xlsx")

    po = sub.add_parser("pose", help="Relative pose estimation on a pose dataset")
    _add_common(po)
    po.add_argument("--data", required=True)
    po.add_argument("--checkpoint", default=None)
    po.add_argument("--iters", type=int, default=None)
    po.add_argument("--restarts", type=int, default=None)
    po.add_argument("--inlier-thresh", type=float, default=None)
    po.add_argument("--stride", type=int, default=None)
    po.add_argument("--conf-threshold", type=float, default=None)
    po.add_argument("--outlier-fraction", type=float, default=None)
    po.add_argument("--seed", dest="pose_seed", type=int, default=None)
    po.add_argument("--use-gt-map", action="store_true", help="Use ground-truth maps instead of the network")
    po.add_argument("--xlsx", action="store_true", help="Also write pose.xlsx")

    sub.add_parser("version", help="Print release and commit")
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, str]]:
    grouped: Dict[str, Dict[str, str]] = {}
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        group, name = key.split(".", 1)
        grouped.setdefault(group, {})[name] = value if isinstance(value, str) else format_value(value)
    return grouped


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config_path = resolve_path(args.config) if getattr(args, "config", None) else None
    if config_path is not None and not config_path.exists():
        raise FileNotFoundError(config_path)
    return apply_overrides(load_config(config_path), _flag_overrides(args))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir: Path, run_log: RunLog) -> int:
    ds = cfg.dataset
    if ds.pose:
        items = generate_pose_dataset(ds.size, seed=ds.seed, resolution=ds.resolution, val_fraction=ds.val_fraction, noise_std=ds.noise_std)
        with run_log.timed("write"):
            write_dataset(out_dir, [pair for pair, _ in items], extra={"kinds": "scene"})
            write_pose_files(out_dir, items)
    else:
        kinds = parse_kinds(ds.kinds)
        pairs = generate_dataset(
            ds.size,
            kinds,
            seed=ds.seed,
            strength=ds.strength,
            resolution=ds.resolution,
            val_fraction=ds.val_fraction,
            noise_std=ds.noise_std,
        )
        with run_log.timed("write"):
            write_dataset(out_dir, pairs, extra={"kinds": ",".join(kinds), "strength": repr(ds.strength)})
    logger.info("Dataset written to %s", out_dir)
    return EXIT_OK


def _split_pairs(data_dir: Path) -> Tuple[List[TrainingPair], List[TrainingPair]]:
    train_pairs = load_dataset(data_dir, split="train")
    val_pairs = load_dataset(data_dir, split="val")
    if not train_pairs:
        raise DataError(f"no training pairs in {data_dir}")
    return train_pairs, val_pairs


_LEVEL_FREE_FIELDS = (
    "use_matchability",
    "correlation",
    "local_radius",
    "l2norm_correlation",
    "parametrization",
    "matchability_channels",
)


def _model_for(cfg: PyramidConfig, resolution: int, levels: Optional[int]) -> PyramidConfig:
    try:
        if levels is None:
            return cfg.with_resolution(resolution)
        keep = {name: getattr(cfg, name) for name in _LEVEL_FREE_FIELDS}
        return PyramidConfig.for_levels(levels, resolution, **keep)
    except ValueError as exc:
        raise DataError(f"dataset/model resolution mismatch: {exc}") from exc


def prepare_training(
    cfg: RunConfig,
    data_dirs: Sequence[Path],
    resume: Optional[Path],
    levels: Optional[int] = None,
) -> Tuple[RunConfig, ModelState, int]:
    """Pick the model (fresh or resumed) and check it against the curriculum's resolution."""
    resolutions = {dataset_resolution(data_dir) for data_dir in data_dirs}
    if len(resolutions) != 1:
        raise DataError("curriculum datasets differ in resolution")
    resolution = resolutions.pop()
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        model_cfg, state, epochs_done = checkpoint.cfg, checkpoint.state, checkpoint.epochs_done
        if levels is not None or model_cfg != cfg.model.with_resolution(model_cfg.base_resolution):
            logger.warning("Model flags are ignored when resuming; using the checkpoint configuration")
    else:
        model_cfg = _model_for(cfg.model, resolution, levels)
        state = init_model_state(model_cfg, cfg.train.seed)
        epochs_done = 0
    if model_cfg.base_resolution != resolution:
        raise DataError(f"dataset/model resolution mismatch: {resolution} vs {model_cfg.base_resolution}")
    return replace(cfg, model=model_cfg), state, epochs_done


def run_training(cfg: RunConfig, state: ModelState, epochs_done: int, out_dir: Path, data_dirs: Sequence[Path]) -> int:
    trace: List[TraceRow] = []
    for phase, data_dir in enumerate(data_dirs):
        train_pairs, val_pairs = _split_pairs(data_dir)
        logger.info("Phase %d dataset=%s train=%d val=%d", phase, data_dir, len(train_pairs), len(val_pairs))
        result = train(
            train_pairs,
            state,
            cfg.model,
            cfg.train,
            val_pairs=val_pairs or None,
            epoch_offset=epochs_done,
            step_offset=trace[-1].step + 1 if trace else 0,
        )
        trace.extend(result.trace)
        epochs_done = result.epochs_done
    save_checkpoint(out_dir / CHECKPOINT_NAME, state, cfg.model, epochs_done=epochs_done)
    write_trace_csv(out_dir / "loss_trace.csv", trace)
    return EXIT_OK


def _predictions(
    cfg: RunConfig,
    pairs: Sequence[TrainingPair],
    checkpoint_path: Optional[Path],
    use_gt_map: bool,
) -> List[Tuple[CorrespondenceMap, Optional[np.ndarray]]]:
    if use_gt_map:
        return [(pair.gt_map, pair.gt_mask.data.astype(np.float64)) for pair in pairs]
    if checkpoint_path is None:
        raise UsageError("--checkpoint is required unless --use-gt-map is given")
    checkpoint = load_checkpoint(checkpoint_path)
    if pairs and checkpoint.cfg.base_resolution != pairs[0].resolution:
        raise DataError(f"dataset/model resolution mismatch: {pairs[0].resolution} vs {checkpoint.cfg.base_resolution}")
    results: List[Tuple[CorrespondenceMap, Optional[np.ndarray]]] = []
    for start in range(0, len(pairs), PREDICT_CHUNK):
        chunk = pairs[start : start + PREDICT_CHUNK]
        results.extend(predict_batch(checkpoint.state, checkpoint.cfg, [p.source_image for p in chunk], [p.target_image for p in chunk]))
    return results


def cmd_eval(cfg: RunConfig, out_dir: Path, data_dir: Path, checkpoint: Optional[Path], *, use_gt_map: bool, xlsx: bool) -> int:
    pairs = load_dataset(data_dir, split=cfg.eval.split)
    if not pairs:
        raise DataError(f"no pairs in split {cfg.eval.split}")
    reports: List[EvalReport] = []
    for pair, (estimate, probabilities) in zip(pairs, _predictions(cfg, pairs, checkpoint, use_gt_map)):
        if cfg.eval.masked and not pair.gt_mask.data.any():
            logger.warning("Skipping pair %s with an empty mask", pair.pair_id)
            continue
        reports.append(
            evaluate_pair(
                pair.pair_id,
                estimate,
                pair.gt_map,
                pair.gt_mask,
                probabilities=probabilities,
                thresholds=cfg.eval.thresholds,
                masked=cfg.eval.masked,
            )
        )
    if not reports:
        raise DataError("no evaluable pairs")
    summary = write_eval_csv(out_dir / "eval.csv", reports)
    logger.info("eval pairs=%d aepe=%.4f pck=%s jaccard=%s", len(reports), summary.aepe, summary.pck, summary.jaccard)
    if xlsx:
        rows = [report.as_row() for report in [*reports, summary]]
        checks = evaluate_acceptance(summary.as_row())["checks"]
        payload = build_experiment_xlsx(run_label=str(out_dir), eval_columns=EVAL_COLUMNS, eval_rows=rows, checks=checks)
        (out_dir / "eval.xlsx").write_bytes(payload)
    return EXIT_OK


def _median(values: Sequence[float]) -> float:
    finite = [v for v in values if np.isfinite(v)]
    return float(np.median(finite)) if finite else float("nan")


def cmd_pose(cfg: RunConfig, out_dir: Path, data_dir: Path, checkpoint: Optional[Path], *, use_gt_map: bool, xlsx: bool) -> int:
    pose_cfg = cfg.pose
    pairs = load_dataset(data_dir, split="all")
    if not pairs:
        raise DataError("pose dataset is empty")
    cameras = [read_pose(pose_path(data_dir, pair.pair_id)) for pair in pairs]
    predictions = _predictions(cfg, pairs, checkpoint, use_gt_map)
    results: List[PoseResult] = []
    distances: List[np.ndarray] = []
    for index, (pair, (camera1, camera2), (estimate, confidence)) in enumerate(zip(pairs, cameras, predictions)):
        try:
            matches = matches_from_map(estimate, confidence, threshold=pose_cfg.conf_threshold, stride=pose_cfg.stride)
        except InsufficientMatchesError as exc:
            logger.warning("pose failed pair=%s reason=%s", pair.pair_id, exc)
            results.append(PoseResult(pair_id=pair.pair_id, error=str(exc)))
            continue
        if pose_cfg.outlier_fraction > 0:
            matches, _ = inject_outliers(
                matches,
                pose_cfg.outlier_fraction,
                np.random.default_rng([pose_cfg.seed, index, 0]),
                pair.resolution,
                pair.resolution,
            )
        result, summary = estimate_pair_pose(
            pair.pair_id,
            matches,
            camera1,
            camera2,
            iters=pose_cfg.iters,
            restarts=pose_cfg.restarts,
            inlier_thresh_px=pose_cfg.inlier_thresh_px,
            rng=np.random.default_rng([pose_cfg.seed, index, 1]),
        )
        results.append(result)
        if summary is not None:
            distances.append(summary.distances)

    rows = [result.as_row() for result in results]
    write_csv(out_dir / "pose.csv", POSE_COLUMNS, rows)
    all_distances = np.concatenate(distances) if distances else np.zeros(0)
    write_histogram_csv(out_dir / "epipolar_hist.csv", cumulative_histogram(all_distances, EPIPOLAR_THRESHOLDS))
    write_histogram_csv(out_dir / "rot_err_hist.csv", cumulative_histogram([r.rot_err_deg for r in results], ANGLE_THRESHOLDS))
    write_histogram_csv(out_dir / "trans_err_hist.csv", cumulative_histogram([r.trans_err_deg for r in results], ANGLE_THRESHOLDS))
    failed = sum(1 for result in results if not result.ok)
    logger.info(
        "pose pairs=%d failed=%d median_rot_deg=%.4f median_trans_deg=%.4f",
        len(results),
        failed,
        _median([r.rot_err_deg for r in results]),
        _median([r.trans_err_deg for r in results]),
    )
    if xlsx:
        payload = build_experiment_xlsx(run_label=str(out_dir), pose_columns=POSE_COLUMNS, pose_rows=rows)
        (out_dir / "pose.xlsx").write_bytes(payload)
    return EXIT_OK


def cmd_version() -> int:
    info = build_info_payload()
    print(f"release_id={info['release_id']}")
    print(f"app_version={APP_VERSION}")
    print(f"git_commit={info['git_commit'] or '-'}")
    return EXIT_OK


def _dispatch(args: argparse.Namespace) -> int:
    if args.verb == "version":
        return cmd_version()
    cfg = resolve_config(args)
    out_dir = resolve_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_log = RunLog(out_dir, args.verb)

    if args.verb == "gen-data":
        parse_kinds(cfg.dataset.kinds)
        run_log.header(config_text=render_config(cfg))
        with run_log.capture(), run_log.timed("total"):
            return cmd_gen_data(cfg, out_dir, run_log)

    if args.verb == "train":
        data_dirs = [resolve_path(raw) for raw in args.data]
        resume = resolve_path(args.resume) if args.resume else None
        cfg, state, epochs_done = prepare_training(cfg, data_dirs, resume, args.levels)
        run_log.header(config_text=render_config(cfg), manifests=[d / MANIFEST_NAME for d in data_dirs])
        with run_log.capture(), run_log.timed("total"):
            return run_training(cfg, state, epochs_done, out_dir, data_dirs)

    data_dir = resolve_path(args.data)
    checkpoint = resolve_path(args.checkpoint) if args.checkpoint else None
    run_log.header(config_text=render_config(cfg), manifests=[data_dir / MANIFEST_NAME])
    with run_log.capture(), run_log.timed("total"):
        if args.verb == "eval":
            return cmd_eval(cfg, out_dir, data_dir, checkpoint, use_gt_map=args.use_gt_map, xlsx=args.xlsx)
        return cmd_pose(cfg, out_dir, data_dir, checkpoint, use_gt_map=args.use_gt_map, xlsx=args.xlsx)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging(log_level())
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        return _dispatch(args)
    except UsageError as exc:
        print(f"dgc-desk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, int) else EXIT_USAGE
    except (DataError, FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"dgc-desk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

