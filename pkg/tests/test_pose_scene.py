from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from app.geometry import identity_grid, normalized_to_pixels
from app.pose import essential_from_pose, estimate_pair_pose, fundamental_from_essential, matches_from_map
from app.pose_scene import (
    generate_pose_dataset,
    generate_pose_pair,
    pose_path,
    read_pose,
    rotation_from_axis_angle,
    sample_scene,
    write_pose,
    write_pose_files,
)
from app.synth_data import DataError


def test_rotation_from_axis_angle_is_a_rotation() -> None:
    R = rotation_from_axis_angle(np.array([0.0, 0.0, 2.0]), np.pi / 2)

    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert np.allclose(R.T @ R, np.eye(3))


@pytest.mark.parametrize("relief", [True, False])
def test_scene_warp_obeys_epipolar_geometry(relief: bool) -> None:
    scene = sample_scene(np.random.default_rng(0), 32, relief=relief)
    grid = identity_grid(32, 32).reshape(-1, 2)

    x1 = normalized_to_pixels(grid, 32, 32)
    x2 = normalized_to_pixels(scene.apply(grid), 32, 32)

    F = fundamental_from_essential(essential_from_pose(scene.R, scene.t), scene.K, scene.K)
    algebraic = np.einsum("mi,ij,mj->m", np.c_[x2, np.ones(len(x2))], F, np.c_[x1, np.ones(len(x1))])
    assert np.max(np.abs(algebraic)) < 1e-9
    assert np.linalg.norm(scene.t) == pytest.approx(0.3)


def test_gt_map_pose_chain_recovers_the_scene() -> None:
    rot_errors, trans_errors = [], []
    for index in range(3):
        pair, scene = generate_pose_pair(index, dataset_seed=11, resolution=32)
        camera1, camera2 = scene.cameras()
        matches = matches_from_map(pair.gt_map, pair.gt_mask.data.astype(np.float64), threshold=0.5, stride=1)

        result, _ = estimate_pair_pose(
            pair.pair_id, matches, camera1, camera2, iters=200, restarts=1, rng=np.random.default_rng(index)
        )

        assert result.ok, result.error
        rot_errors.append(result.rot_err_deg)
        trans_errors.append(result.trans_err_deg)
    assert np.median(rot_errors) < 0.1
    assert np.median(trans_errors) < 0.5


def test_pose_dataset_is_deterministic_and_split() -> None:
    first = generate_pose_dataset(3, seed=2, resolution=16, val_fraction=0.34)
    second = generate_pose_dataset(3, seed=2, resolution=16, val_fraction=0.34)

    assert [pair.pair_id for pair, _ in first] == ["00000", "00001", "00002"]
    assert [pair.kind for pair, _ in first] == ["scene"] * 3
    assert first[-1][0].split == "val"
    for (a, scene_a), (b, scene_b) in zip(first, second):
        assert np.array_equal(a.source_image, b.source_image)
        assert np.array_equal(scene_a.R, scene_b.R)
    with pytest.raises(ValueError):
        generate_pose_dataset(0, seed=0, resolution=16)


def test_pose_file_round_trip(tmp_path: Path) -> None:
    items = generate_pose_dataset(2, seed=4, resolution=16)
    write_pose_files(tmp_path, items)

    for pair, scene in items:
        camera1, camera2 = read_pose(pose_path(tmp_path, pair.pair_id))
        assert np.array_equal(camera1.K, scene.K)
        assert np.array_equal(camera1.R, np.eye(3))
        assert np.array_equal(camera2.R, scene.R)
        assert np.array_equal(camera2.t, scene.t)
    assert pose_path(tmp_path, "00001").read_text(encoding="utf-8").startswith("fx=")


def test_bad_pose_files_raise_data_error(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="missing pose file"):
        read_pose(tmp_path / "absent.pose")

    incomplete = tmp_path / "incomplete.pose"
    incomplete.write_text("fx=16.0\nfy=16.0\n", encoding="utf-8")
    with pytest.raises(DataError, match="invalid pose file"):
        read_pose(incomplete)

    garbled = tmp_path / "garbled.pose"
    garbled.write_text("# camera\nfx 16\n", encoding="utf-8")
    with pytest.raises(DataError, match="malformed"):
        read_pose(garbled)

    scene = sample_scene(np.random.default_rng(1), 16)
    good = tmp_path / "good.pose"
    write_pose(good, scene)
    text = good.read_text(encoding="utf-8").replace("R=", "R=nan,")
    good.write_text(text, encoding="utf-8")
    with pytest.raises(DataError):
        read_pose(good)
