from __future__ import annotations

import numpy as np
import pytest
from conftest import make_tiny_config

from app.geometry import identity_grid
from app.losses import (
    correspondence_loss,
    downsample_mask,
    level_targets,
    loss_breakdown,
    matchability_loss,
    total_loss,
)
from app.model import NetworkOutput, PyramidConfig, forward, images_to_tensor, init_model_state
from app.tensor import Tensor, check_gradients, default_dtype, no_grad


def _single_level(size: int = 4) -> PyramidConfig:
    return PyramidConfig.for_levels(1, size, decoder_channels=((4,),), dilations_per_level=((1,),))


def _gt(size: int, batch: int = 1) -> np.ndarray:
    return np.broadcast_to(identity_grid(size, size), (batch, size, size, 2)).copy()


def _outputs_from_targets(targets, offset=(0.0, 0.0)) -> NetworkOutput:
    maps = []
    for target, _ in targets:
        shifted = target + np.asarray(offset).reshape(1, 2, 1, 1)
        maps.append(Tensor(shifted))
    return NetworkOutput(maps=maps)


def test_downsample_mask_is_blockwise_and() -> None:
    mask = np.ones((1, 4, 4), dtype=bool)
    mask[0, 0, 1] = False

    down = downsample_mask(mask)

    assert down.tolist() == [[[False, True], [True, True]]]


def test_level_targets_follow_level_resolutions() -> None:
    cfg = make_tiny_config()
    gt_map, gt_mask = _gt(16), np.ones((1, 16, 16), dtype=bool)

    targets = level_targets(gt_map, gt_mask, cfg)

    assert [t.shape for t, _ in targets] == [(1, 2, 8, 8), (1, 2, 16, 16)]
    assert np.allclose(np.transpose(targets[0][0][0], (1, 2, 0)), identity_grid(8, 8), atol=1e-12)
    with pytest.raises(ValueError, match="resolution"):
        level_targets(_gt(8), np.ones((1, 8, 8), dtype=bool), cfg)


def test_level_targets_sample_the_map_at_level_grid_positions() -> None:
    cfg = make_tiny_config()
    linear, offset = np.array([[0.8, 0.3], [-0.2, 1.1]]), np.array([0.6, -0.1])
    gt_map = (identity_grid(16, 16) @ linear.T + offset)[None]
    gt_mask = np.all(np.abs(gt_map) <= 1.0, axis=-1)
    assert 0 < gt_mask.sum() < gt_mask.size

    coarse, coarse_mask = level_targets(gt_map, gt_mask, cfg)[0]

    expected = identity_grid(8, 8) @ linear.T + offset
    assert np.allclose(np.transpose(coarse[0], (1, 2, 0)), expected, atol=1e-12)
    assert np.array_equal(coarse_mask, downsample_mask(gt_mask))


def test_correspondence_loss_is_zero_for_exact_maps() -> None:
    cfg = make_tiny_config()
    gt_map, gt_mask = _gt(16, 2), np.ones((2, 16, 16), dtype=bool)

    out = _outputs_from_targets(level_targets(gt_map, gt_mask, cfg))

    assert correspondence_loss(out, gt_map, gt_mask, cfg).item() == pytest.approx(0.0, abs=1e-6)


def test_correspondence_loss_constant_error_closed_form() -> None:
    cfg = _single_level()
    gt_map, gt_mask = _gt(4), np.ones((1, 4, 4), dtype=bool)

    out = _outputs_from_targets(level_targets(gt_map, gt_mask, cfg), offset=(0.1, 0.1))

    assert correspondence_loss(out, gt_map, gt_mask, cfg).item() == pytest.approx(0.2, abs=1e-6)


def test_correspondence_loss_ignores_masked_out_pixels() -> None:
    cfg = make_tiny_config()
    gt_map = _gt(16)
    gt_mask = np.ones((1, 16, 16), dtype=bool)
    gt_mask[0, :, 8:] = False
    targets = level_targets(gt_map, gt_mask, cfg)
    base = _outputs_from_targets(targets, offset=(0.05, -0.02))

    perturbed_maps = []
    rng = np.random.default_rng(0)
    for tensor, (_, mask) in zip(base.maps, targets):
        noise = rng.normal(size=tensor.shape) * (~mask)[:, None, :, :]
        perturbed_maps.append(Tensor(tensor.data + noise))
    perturbed = NetworkOutput(maps=perturbed_maps)

    before = correspondence_loss(base, gt_map, gt_mask, cfg).item()
    after = correspondence_loss(perturbed, gt_map, gt_mask, cfg).item()
    assert before == after

    empty = np.zeros((1, 16, 16), dtype=bool)
    assert correspondence_loss(perturbed, gt_map, empty, cfg).item() == 0.0


def test_matchability_loss_closed_forms() -> None:
    mask = np.random.default_rng(1).random((2, 4, 4)) > 0.5

    assert matchability_loss(Tensor(np.zeros((2, 1, 4, 4))), mask).item() == pytest.approx(np.log(2.0), abs=1e-6)
    saturated = np.where(mask, 20.0, -20.0)[:, None]
    assert matchability_loss(Tensor(saturated), mask).item() < 1e-6
    with pytest.raises(ValueError):
        matchability_loss(Tensor(np.zeros((2, 1, 2, 2))), mask)


def test_total_loss_combines_terms() -> None:
    cfg = make_tiny_config(use_matchability=True)
    state = init_model_state(cfg, 0)
    rng = np.random.default_rng(2)
    src = images_to_tensor([rng.uniform(size=(16, 16, 3))])
    tgt = images_to_tensor([rng.uniform(size=(16, 16, 3))])
    gt_map = _gt(16)
    gt_mask = rng.random((1, 16, 16)) > 0.3
    with no_grad():
        out = forward(src, tgt, state, cfg)

        loss_c = correspondence_loss(out, gt_map, gt_mask, cfg).item()
        loss_m = matchability_loss(out.matchability_logits, gt_mask).item()

        assert total_loss(out, gt_map, gt_mask, cfg, beta=0.0).item() == loss_c
        assert total_loss(out, gt_map, gt_mask, cfg, beta=1.0).item() == pytest.approx(loss_c + loss_m, rel=1e-6)
    assert loss_breakdown(out, gt_map, gt_mask, cfg, beta=1.0) == pytest.approx((loss_c, loss_m, loss_c + loss_m), rel=1e-6)

    with pytest.raises(ValueError, match="beta"):
        total_loss(out, gt_map, gt_mask, cfg, beta=-1.0)
    plain = NetworkOutput(maps=out.maps)
    with pytest.raises(ValueError, match="matchability"):
        total_loss(plain, gt_map, gt_mask, cfg, beta=1.0)


def test_total_loss_gradient_matches_finite_differences() -> None:
    with default_dtype(np.float64):
        cfg = make_tiny_config(use_matchability=True)
        state = init_model_state(cfg, 3)
        for tensor in state.params.values():
            tensor.data = tensor.data.astype(np.float64)
        rng = np.random.default_rng(3)
        src = images_to_tensor([rng.uniform(size=(16, 16, 3))])
        tgt = images_to_tensor([rng.uniform(size=(16, 16, 3))])
        gt_map = _gt(16) + rng.normal(scale=0.3, size=(1, 16, 16, 2))
        gt_mask = rng.random((1, 16, 16)) > 0.3

        def fn() -> Tensor:
            return total_loss(forward(src, tgt, state, cfg), gt_map, gt_mask, cfg, beta=1.0)

        inputs = [state.params["dec.1.out.w"], state.params["dec.1.out.b"], state.params["match.out.w"]]
        error = check_gradients(fn, inputs, h=1e-5)

    assert error < 1e-3
