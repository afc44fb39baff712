from __future__ import annotations

from typing import List

import numpy as np
import pytest
from conftest import make_tiny_config

from app import ops
from app.geometry import CorrespondenceMap, identity_grid
from app.model import (
    PyramidConfig,
    build_feature_pyramid,
    check_state,
    decoder_input_channels,
    forward,
    images_to_tensor,
    init_model_state,
    map_to_grid,
    predict,
)
from app.synth_data import TrainingPair
from app.tensor import Tensor


def _images(count: int, size: int, seed: int = 0) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32) for _ in range(count)]


def test_desk_config_defaults_and_level_resolutions() -> None:
    cfg = PyramidConfig()

    assert cfg.levels == 4
    assert [cfg.resolution(level) for level in range(4)] == [8, 16, 32, 64]
    assert cfg.channels_per_level == (96, 64, 32, 16)
    assert cfg.decoder_channels[0] == (128, 128, 96, 64, 32)
    assert cfg.dilations_per_level[3] == (1, 2, 4, 4, 1)
    assert cfg.dilations_per_level[0] == (1, 1, 1, 1, 1)
    assert cfg.alpha == (1.0, 1.0, 1.0, 1.0)


def test_config_validation() -> None:
    with pytest.raises(ValueError, match="divisible"):
        PyramidConfig.for_levels(4, 60)
    with pytest.raises(ValueError, match="one entry per level"):
        PyramidConfig(alpha=(1.0, 1.0))
    with pytest.raises(ValueError, match="alpha"):
        PyramidConfig(alpha=(1.0, -1.0, 1.0, 1.0))
    with pytest.raises(ValueError, match="correlation"):
        PyramidConfig(correlation="cosine")


def test_feature_pyramid_shapes_norms_and_shared_weights() -> None:
    cfg = PyramidConfig()
    state = init_model_state(cfg, 0)
    image = images_to_tensor(_images(1, 64))

    first = build_feature_pyramid(image, state, cfg)
    second = build_feature_pyramid(image, state, cfg)

    assert [f.shape[2] for f in first] == [8, 16, 32, 64]
    assert [f.shape[1] for f in first] == [96, 64, 32, 16]
    for a, b in zip(first, second):
        assert np.array_equal(a.data, b.data)
        norms = np.linalg.norm(a.data.astype(np.float64), axis=1)
        live = norms > 0
        assert live.mean() > 0.95
        assert np.allclose(norms[live], 1.0, atol=1e-5)


def test_feature_pyramid_rejects_wrong_resolution(tiny_config: PyramidConfig) -> None:
    state = init_model_state(tiny_config, 0)

    with pytest.raises(ValueError, match="resolution"):
        build_feature_pyramid(images_to_tensor(_images(1, 8)), state, tiny_config)


def test_decoder_input_channels_per_mode() -> None:
    cfg = make_tiny_config()
    local = make_tiny_config(correlation="local", local_radius=1)

    assert decoder_input_channels(cfg, 0) == 8 * 8
    assert decoder_input_channels(cfg, 1) == 2 + 2 * cfg.channels_per_level[1]
    assert decoder_input_channels(local, 0) == 9
    assert decoder_input_channels(local, 1) == 2 + 9


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"parametrization": "flow"},
        {"correlation": "local", "local_radius": 1},
        {"l2norm_correlation": False},
        {"use_matchability": True},
    ],
)
def test_forward_shapes_are_finite_for_every_variant(overrides: dict) -> None:
    cfg = make_tiny_config(**overrides)
    state = init_model_state(cfg, 1)
    src, tgt = images_to_tensor(_images(2, 16, 1)), images_to_tensor(_images(2, 16, 2))

    out = forward(src, tgt, state, cfg)

    assert [m.shape for m in out.maps] == [(2, 2, 8, 8), (2, 2, 16, 16)]
    assert all(np.all(np.isfinite(m.data)) for m in out.maps)
    if cfg.use_matchability:
        assert out.matchability_logits is not None
        assert out.matchability_logits.shape == (2, 1, 16, 16)
    else:
        assert out.matchability_logits is None


def test_flow_parametrization_starts_near_identity() -> None:
    cfg = make_tiny_config(parametrization="flow")
    state = init_model_state(cfg, 2)

    out = forward(images_to_tensor(_images(1, 16)), images_to_tensor(_images(1, 16, 3)), state, cfg)

    finest = np.transpose(out.finest.data[0], (1, 2, 0))
    assert np.max(np.abs(finest - identity_grid(16, 16))) < 1.0


def test_state_checks_and_copy(tiny_config: PyramidConfig) -> None:
    state = init_model_state(tiny_config, 0)
    check_state(state, tiny_config)

    clone = state.copy()
    clone.params["dec.0.out.b"].data += 1.0
    assert not np.array_equal(clone.params["dec.0.out.b"].data, state.params["dec.0.out.b"].data)

    with pytest.raises(ValueError, match="does not match"):
        check_state(state, make_tiny_config(use_matchability=True))

    assert [name for name, _ in state.parameters("enc.")] == sorted(name for name in state.params if name.startswith("enc."))
    assert np.array_equal(init_model_state(tiny_config, 0).params["enc.0.conv.w"].data, state.params["enc.0.conv.w"].data)


def test_upsampled_identity_warp_preserves_features(tiny_config: PyramidConfig) -> None:
    state = init_model_state(tiny_config, 0)
    features = build_feature_pyramid(images_to_tensor(_images(1, 16)), state, tiny_config)
    coarse = Tensor(np.transpose(identity_grid(8, 8), (2, 0, 1))[None])

    grid = map_to_grid(ops.upsample_bilinear_2x(coarse))
    warped = ops.grid_sample(features[1], grid)

    assert np.allclose(warped.data, features[1].data, atol=1e-5)


def test_predict_returns_map_and_probabilities(affine_pairs: List[TrainingPair]) -> None:
    cfg = make_tiny_config(use_matchability=True)
    state = init_model_state(cfg, 0)
    pair = affine_pairs[0]

    estimate, probabilities = predict(state, cfg, pair.source_image, pair.target_image)

    assert isinstance(estimate, CorrespondenceMap)
    assert estimate.data.shape == (16, 16, 2)
    assert probabilities is not None and probabilities.shape == (16, 16)
    assert np.all((probabilities >= 0.0) & (probabilities <= 1.0))

    plain_cfg = make_tiny_config()
    _, none = predict(init_model_state(plain_cfg, 0), plain_cfg, pair.source_image, pair.target_image)
    assert none is None


def test_forward_rejects_mismatched_inputs(tiny_config: PyramidConfig) -> None:
    state = init_model_state(tiny_config, 0)

    with pytest.raises(ValueError):
        forward(images_to_tensor(_images(1, 16)), images_to_tensor(_images(2, 16)), state, tiny_config)
