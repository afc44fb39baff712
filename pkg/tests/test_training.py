from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import List

import numpy as np
import pytest
from conftest import make_tiny_config

from app.model import init_model_state, predict_batch
from app.synth_data import TrainingPair
from app.training import DivergenceError, TrainConfig, train, validation_aepe, write_trace_csv


def _train_split(pairs: List[TrainingPair]) -> List[TrainingPair]:
    return [pair for pair in pairs if pair.split == "train"]


def _snapshot(state) -> dict:
    return {name: np.array(values, copy=True) for name, values in state.tensors()}


def test_zero_learning_rate_leaves_state_unchanged(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config(use_matchability=True)
    state = init_model_state(cfg, 0)
    before = _snapshot(state)
    pairs = _train_split(affine_pairs)[:2]
    untrained = predict_batch(state, cfg, [p.source_image for p in pairs], [p.target_image for p in pairs])

    result = train(pairs, state, cfg, TrainConfig(lr=0.0, epochs=1, batch_size=2))

    assert len(result.trace) == 1
    after = _snapshot(state)
    assert sorted(after) == sorted(before)
    assert any(".bn.mean" in name for name in after)
    for name, values in before.items():
        assert np.array_equal(after[name], values), name
    again = predict_batch(state, cfg, [p.source_image for p in pairs], [p.target_image for p in pairs])
    for (map_a, prob_a), (map_b, prob_b) in zip(untrained, again):
        assert np.array_equal(map_a.data, map_b.data)
        assert np.array_equal(prob_a, prob_b)


def test_training_is_deterministic_for_a_seed(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()
    opt = TrainConfig(lr=1e-3, epochs=2, batch_size=2, seed=5)

    first = train(_train_split(affine_pairs), init_model_state(cfg, 0), cfg, opt)
    second = train(_train_split(affine_pairs), init_model_state(cfg, 0), cfg, opt)

    assert [row.as_row() for row in first.trace] == [row.as_row() for row in second.trace]
    for (name, a), (_, b) in zip(first.state.tensors(), second.state.tensors()):
        assert np.array_equal(a, b), name


def test_correspondence_loss_decreases_on_a_small_set(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()
    state = init_model_state(cfg, 0)

    result = train(_train_split(affine_pairs), state, cfg, TrainConfig(lr=3e-3, epochs=15, batch_size=2))

    means = result.epoch_means()
    assert sorted(means) == list(range(15))
    assert means[14] < means[0]
    assert result.epochs_done == 15


def test_offsets_continue_epoch_and_step_counters(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()

    result = train(
        _train_split(affine_pairs)[:4],
        init_model_state(cfg, 0),
        cfg,
        TrainConfig(epochs=1, batch_size=2),
        epoch_offset=3,
        step_offset=10,
    )

    assert [(row.epoch, row.step) for row in result.trace] == [(3, 10), (3, 11)]
    assert result.epochs_done == 4


def test_non_finite_input_raises_divergence(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()
    broken = replace(affine_pairs[0], source_image=np.full_like(affine_pairs[0].source_image, np.nan))

    with pytest.raises(DivergenceError):
        train([broken], init_model_state(cfg, 0), cfg, TrainConfig(epochs=1, batch_size=1))
    assert issubclass(DivergenceError, FloatingPointError)


def test_frozen_encoder_keeps_encoder_weights_and_statistics(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()
    state = init_model_state(cfg, 0)
    before = _snapshot(state)

    train(_train_split(affine_pairs)[:2], state, cfg, TrainConfig(lr=1e-2, epochs=1, batch_size=2, freeze_encoder=True))

    after = _snapshot(state)
    for name, values in before.items():
        if name.startswith("enc."):
            assert np.array_equal(after[name], values), name
    assert not np.array_equal(after["dec.1.0.bn.mean"], before["dec.1.0.bn.mean"])
    assert not np.array_equal(after["dec.1.out.w"], before["dec.1.out.w"])


def test_matchability_term_is_traced(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config(use_matchability=True)

    result = train(_train_split(affine_pairs)[:2], init_model_state(cfg, 0), cfg, TrainConfig(epochs=1, batch_size=2))

    row = result.trace[0]
    assert row.loss_m > 0.0
    assert row.loss_total == pytest.approx(row.loss_c + row.loss_m, rel=1e-5)

    plain = train(_train_split(affine_pairs)[:2], init_model_state(make_tiny_config(), 0), make_tiny_config(), TrainConfig(epochs=1, batch_size=2))
    assert plain.trace[0].loss_m == 0.0


def test_validation_history_and_trace_csv(affine_pairs: List[TrainingPair], tmp_path: Path) -> None:
    cfg = make_tiny_config()
    val = [pair for pair in affine_pairs if pair.split == "val"]
    state = init_model_state(cfg, 0)

    result = train(_train_split(affine_pairs)[:2], state, cfg, TrainConfig(epochs=2, batch_size=2), val_pairs=val)

    assert len(result.val_aepe) == 2
    assert result.val_aepe[-1] == pytest.approx(validation_aepe(state, cfg, val))

    path = tmp_path / "loss_trace.csv"
    write_trace_csv(path, result.trace)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,step,L_c,L_m,L_total"
    assert len(lines) == 1 + len(result.trace)


def test_train_rejects_bad_settings(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config()
    state = init_model_state(cfg, 0)

    with pytest.raises(ValueError, match="empty"):
        train([], state, cfg, TrainConfig())
    with pytest.raises(ValueError, match="learning rate"):
        train(affine_pairs[:1], state, cfg, TrainConfig(lr=-1.0, epochs=1))
    with pytest.raises(ValueError):
        train(affine_pairs[:1], init_model_state(make_tiny_config(use_matchability=True), 0), cfg, TrainConfig(epochs=1))
