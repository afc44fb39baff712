from __future__ import annotations

import numpy as np
import pytest

from app.geometry import (
    AffineTransform,
    CorrespondenceMap,
    HomographyTransform,
    apply_transform,
    compose,
    fit_tps,
    flow_to_map,
    gt_correspondence_map,
    homography_from_points,
    identity,
    identity_grid,
    inverse_transform,
    map_to_flow,
    normalized_to_pixels,
    pixels_to_normalized,
    sample_transform,
    tps_control_grid,
)


def test_identity_and_translation_mappings() -> None:
    points = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    assert np.array_equal(apply_transform(identity("affine"), points), points)

    shift = HomographyTransform(np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    assert np.allclose(apply_transform(shift, [0.0, 0.0]), [0.5, 0.0])

    grid = tps_control_grid()
    flat = fit_tps(grid, grid)
    assert np.allclose(apply_transform(flat, points), points, atol=1e-12)


def test_point_at_infinity_raises() -> None:
    vanishing = HomographyTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]))

    with pytest.raises(ValueError, match="infinity"):
        apply_transform(vanishing, [-1.0, 0.0])


def test_invertibility_invariants() -> None:
    with pytest.raises(ValueError):
        AffineTransform(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]))
    with pytest.raises(ValueError):
        HomographyTransform(np.zeros((3, 3)))


def test_fit_tps_identity_translation_and_interpolation() -> None:
    grid = tps_control_grid()

    same = fit_tps(grid, grid)
    assert np.allclose(same.weights, 0.0, atol=1e-12)
    assert np.allclose(same.affine, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], atol=1e-12)

    moved = fit_tps(grid, grid + [0.1, -0.2])
    assert np.allclose(moved.weights, 0.0, atol=1e-10)
    assert np.allclose(moved.affine[0], [0.1, -0.2], atol=1e-10)

    rng = np.random.default_rng(1)
    target = grid + rng.uniform(-0.2, 0.2, size=grid.shape)
    warped = fit_tps(grid, target)
    assert np.max(np.abs(apply_transform(warped, grid) - target)) < 1e-8

    with pytest.raises(ValueError, match="non-collinear"):
        fit_tps([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]], [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]])


def test_dlt_reproduces_homography() -> None:
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    assert np.allclose(homography_from_points(corners, corners).matrix, np.eye(3), atol=1e-12)

    truth = HomographyTransform(np.array([[1.1, 0.05, 0.1], [-0.02, 0.95, -0.05], [0.03, -0.04, 1.0]]))
    recovered = homography_from_points(corners, apply_transform(truth, corners))
    a = truth.matrix / np.linalg.norm(truth.matrix)
    b = recovered.matrix / np.linalg.norm(recovered.matrix)
    assert np.linalg.norm(a - b) < 1e-8


@pytest.mark.parametrize("kind", ["affine", "homo"])
def test_closed_form_inverse_round_trip(kind: str) -> None:
    t = sample_transform(kind, np.random.default_rng(2), 0.3)
    points = np.random.default_rng(3).uniform(-1, 1, size=(50, 2))

    back = apply_transform(inverse_transform(t), apply_transform(t, points))

    assert np.max(np.abs(back - points)) < 1e-9


def test_tps_numeric_inverse_round_trip() -> None:
    t = sample_transform("tps", np.random.default_rng(4), 0.2)
    points = np.random.default_rng(5).uniform(-1, 1, size=(200, 2))
    forward = apply_transform(t, points)
    inside = np.all(np.abs(forward) <= 1.5, axis=1)

    back = apply_transform(inverse_transform(t), forward[inside])

    assert inverse_transform(inverse_transform(t)) is t
    assert np.max(np.abs(back - points[inside])) < 1e-4


def test_sample_transform_ranges_and_determinism() -> None:
    a = sample_transform("affine", np.random.default_rng(7), 0.25)
    b = sample_transform("affine", np.random.default_rng(7), 0.25)
    assert np.array_equal(a.params, b.params)

    tiny = sample_transform("homo", np.random.default_rng(8), 1e-9)
    assert np.allclose(tiny.matrix, np.eye(3), atol=1e-7)
    assert np.allclose(sample_transform("tps", np.random.default_rng(9), 0.0).weights, 0.0, atol=1e-12)

    with pytest.raises(ValueError, match="strength"):
        sample_transform("affine", np.random.default_rng(0), 0.5)
    with pytest.raises(ValueError, match="kind"):
        sample_transform("spiral", np.random.default_rng(0), 0.1)


def test_gt_map_identity_and_translation() -> None:
    m, mask = gt_correspondence_map(identity("affine"), 64, 48)
    assert np.array_equal(m.data, identity_grid(64, 48).astype(np.float32))
    assert mask.coverage() == 1.0

    shift = AffineTransform(np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
    _, shifted_mask = gt_correspondence_map(shift, 64, 64)
    assert np.all(shifted_mask.data[:, :32])
    assert not np.any(shifted_mask.data[:, 32:])


def test_gt_map_inverse_composition_recovers_identity() -> None:
    for kind, tol in (("affine", 1e-5), ("homo", 1e-5), ("tps", 1e-5)):
        t = sample_transform(kind, np.random.default_rng(10), 0.2)
        m, mask = gt_correspondence_map(t, 32, 32)
        back = apply_transform(inverse_transform(t), m.data.astype(np.float64))
        grid = identity_grid(32, 32)
        assert np.max(np.abs(back - grid)[mask.data]) < tol, kind


def test_gt_map_of_composition_equals_pointwise_composition() -> None:
    t1 = sample_transform("affine", np.random.default_rng(11), 0.2)
    t2 = sample_transform("homo", np.random.default_rng(12), 0.2)
    grid = identity_grid(32, 32)

    composed = apply_transform(compose(t2, t1), grid)
    pointwise = apply_transform(t2, apply_transform(t1, grid))

    assert np.max(np.abs(composed - pointwise)) < 1e-6


def test_flow_round_trip_and_constant_flow() -> None:
    m, _ = gt_correspondence_map(sample_transform("affine", np.random.default_rng(13), 0.2), 16, 16)
    assert np.array_equal(flow_to_map(map_to_flow(m)).data, m.data)

    ident, _ = gt_correspondence_map(identity("affine"), 8, 8)
    assert np.all(map_to_flow(ident).data == 0.0)

    constant = CorrespondenceMap(np.tile(np.array([0.1, 0.0]), (8, 8, 1)))
    expected = identity_grid(8, 8) + [0.1, 0.0]
    assert np.allclose(flow_to_map(constant, np.float64).data, expected)


def test_pixel_conversion_is_align_corners() -> None:
    coords = np.array([[-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]])

    pixels = normalized_to_pixels(coords, 64, 32)

    assert np.allclose(pixels, [[0.0, 0.0], [63.0, 31.0], [31.5, 15.5]])
    assert np.allclose(pixels_to_normalized(pixels, 64, 32), coords)


def test_correspondence_map_rejects_non_finite() -> None:
    with pytest.raises(ValueError, match="finite"):
        CorrespondenceMap(np.full((2, 2, 2), np.nan))
