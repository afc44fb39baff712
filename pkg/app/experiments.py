from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .model import PyramidConfig, init_model_state
from .synth_data import TrainingPair
from .training import TrainConfig, train, validation_aepe

logger = logging.getLogger("dgc-desk.experiments")

ABLATION_VARIANTS = ("global", "local", "no-l2norm", "flow")
BASELINE_VARIANT = "global"
# (better, worse) orderings expected to hold by majority over seeds
EXPECTED_ORDERINGS: Tuple[Tuple[str, str], ...] = (("global", "local"), ("global", "no-l2norm"))


def variant_config(base: PyramidConfig, variant: str, *, local_radius: int = 1) -> PyramidConfig:
    if variant == "global":
        return replace(base, correlation="global")
    if variant == "local":
        return replace(base, correlation="local", local_radius=local_radius)
    if variant == "no-l2norm":
        return replace(base, l2norm_correlation=False)
    if variant == "flow":
        return replace(base, parametrization="flow")
    raise ValueError(f"unknown ablation variant: {variant}")


@dataclass
class AblationResult:
    val_aepe: Dict[str, List[float]] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.val_aepe[variant]))

    def wins(self, better: str, worse: str) -> int:
        return sum(1 for a, b in zip(self.val_aepe[better], self.val_aepe[worse]) if a < b)

    def ordering_checks(self) -> List[Dict[str, object]]:
        checks: List[Dict[str, object]] = []
        for better, worse in EXPECTED_ORDERINGS:
            if better not in self.val_aepe or worse not in self.val_aepe:
                continue
            wins = self.wins(better, worse)
            needed = len(self.seeds) // 2 + 1
            checks.append(
                {
                    "name": f"{better}<{worse}",
                    "ok": wins >= needed,
                    "actual": wins,
                    "expected": needed,
                    "direction": ">=",
                }
            )
        return checks

    def rows(self) -> List[Dict[str, object]]:
        out: List[Dict[str, object]] = []
        for variant, values in self.val_aepe.items():
            for seed, value in zip(self.seeds, values):
                out.append({"variant": variant, "seed": seed, "val_aepe": value})
        return out


def run_ablation(
    train_pairs: Sequence[TrainingPair],
    val_pairs: Sequence[TrainingPair],
    base: PyramidConfig,
    opt_cfg: TrainConfig,
    *,
    variants: Sequence[str] = ABLATION_VARIANTS,
    seeds: Sequence[int] = (0, 1, 2),
    local_radius: int = 1,
) -> AblationResult:
    """Train each variant from the same initial seed on the same data and record validation AEPE."""
    if not val_pairs:
        raise ValueError("ablation needs validation pairs")
    result = AblationResult(val_aepe={variant: [] for variant in variants}, seeds=list(seeds))
    for seed in seeds:
        for variant in variants:
            cfg = variant_config(base, variant, local_radius=local_radius)
            state = init_model_state(cfg, seed)
            train(train_pairs, state, cfg, replace(opt_cfg, seed=seed))
            value = validation_aepe(state, cfg, val_pairs)
            result.val_aepe[variant].append(value)
            logger.info("ablation variant=%s seed=%d val_aepe=%.4f", variant, seed, value)
    return result
