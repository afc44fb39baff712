from __future__ import annotations

from typing import List

import pytest
from conftest import make_tiny_config

from app.experiments import AblationResult, run_ablation, variant_config
from app.synth_data import TrainingPair
from app.training import TrainConfig


def test_variant_configs() -> None:
    base = make_tiny_config()

    assert variant_config(base, "local", local_radius=2).local_radius == 2
    assert variant_config(base, "no-l2norm").l2norm_correlation is False
    assert variant_config(base, "flow").parametrization == "flow"
    assert variant_config(base, "global") == base
    with pytest.raises(ValueError, match="unknown ablation variant"):
        variant_config(base, "deeper")


def test_ordering_checks_need_a_majority_of_seeds() -> None:
    result = AblationResult(
        val_aepe={"global": [1.0, 1.0, 3.0], "local": [2.0, 2.0, 2.0], "no-l2norm": [0.5, 2.0, 0.5]},
        seeds=[0, 1, 2],
    )

    checks = {check["name"]: check for check in result.ordering_checks()}

    assert checks["global<local"]["ok"] is True
    assert checks["global<local"]["actual"] == 2
    assert checks["global<no-l2norm"]["ok"] is False
    assert result.mean("local") == 2.0
    assert result.rows()[0] == {"variant": "global", "seed": 0, "val_aepe": 1.0}


def test_run_ablation_records_every_variant_and_seed(affine_pairs: List[TrainingPair]) -> None:
    train_pairs = [pair for pair in affine_pairs if pair.split == "train"][:2]
    val_pairs = [pair for pair in affine_pairs if pair.split == "val"]

    result = run_ablation(
        train_pairs,
        val_pairs,
        make_tiny_config(),
        TrainConfig(epochs=1, batch_size=2),
        variants=("global", "local"),
        seeds=(0, 1),
    )

    assert result.seeds == [0, 1]
    assert {name: len(values) for name, values in result.val_aepe.items()} == {"global": 2, "local": 2}
    assert len(result.ordering_checks()) == 1
    with pytest.raises(ValueError, match="validation"):
        run_ablation(train_pairs, [], make_tiny_config(), TrainConfig(epochs=1))
