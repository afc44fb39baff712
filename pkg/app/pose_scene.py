from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Dict, List, Tuple

import numpy as np

from .geometry import normalized_to_pixels, pixels_to_normalized
from .pose import CameraModel, intrinsics
from .synth_data import (
    BASE_SCALE,
    DataError,
    PairRejectedError,
    TrainingPair,
    make_base_image,
    pair_seed,
    render_pair,
    split_for_index,
)

logger = logging.getLogger("dgc-desk.data")

SCENE_KIND = "scene"
POSE_SUFFIX = ".pose"
DEFAULT_BASELINE = 0.3
DEFAULT_MAX_ROTATION_DEG = 5.0
DEFAULT_DEPTH = 4.0
_MIN_DEPTH = 1e-6


def rotation_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


@dataclass(frozen=True)
class SceneWarp:
    """Image-1 to image-2 mapping of a textured surface seen by two calibrated cameras.

    The surface is described by its inverse depth in camera 1,
    rho(u, v) = rho[0] + rho[1] u + rho[2] v + rho[3] (u^2 + v^2), over normalised image-1
    coordinates. rho[3] == 0 is a plane and the warp reduces to the plane-induced homography.
    Camera 2 sees X2 = R X1 + t.
    """

    kind: ClassVar[str] = SCENE_KIND
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    rho: np.ndarray
    size: int

    def inverse_depth(self, points: np.ndarray) -> np.ndarray:
        u, v = points[..., 0], points[..., 1]
        r0, ru, rv, rc = (float(c) for c in self.rho)
        return r0 + ru * u + rv * v + rc * (u * u + v * v)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pixels = normalized_to_pixels(points, self.size, self.size)
        homogeneous = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
        rays = homogeneous @ np.linalg.inv(self.K).T
        rho = self.inverse_depth(points)
        if np.any(rho <= _MIN_DEPTH):
            raise ValueError("surface behind camera")
        # K (R ray + rho t) is X2 scaled by rho, which leaves the projection unchanged
        projected = (rays @ self.R.T + rho[..., None] * self.t) @ self.K.T
        depth = projected[..., 2]
        if np.any(depth <= _MIN_DEPTH):
            raise ValueError("point at infinity")
        out = projected[..., :2] / depth[..., None]
        return pixels_to_normalized(out, self.size, self.size)

    def cameras(self) -> Tuple[CameraModel, CameraModel]:
        return CameraModel(self.K), CameraModel(self.K, self.R, self.t)


def sample_scene(
    rng: np.random.Generator,
    size: int,
    *,
    baseline: float = DEFAULT_BASELINE,
    max_rotation_deg: float = DEFAULT_MAX_ROTATION_DEG,
    relief: bool = True,
) -> SceneWarp:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.2 * max_rotation_deg, max_rotation_deg))
    R = rotation_from_axis_angle(axis, angle)
    direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.5])
    t = baseline * direction / np.linalg.norm(direction)
    rho0 = 1.0 / DEFAULT_DEPTH
    rho = np.array(
        [
            rho0,
            rng.uniform(-0.15, 0.15) * rho0,
            rng.uniform(-0.15, 0.15) * rho0,
            rng.uniform(0.1, 0.25) * rho0 if relief else 0.0,
        ]
    )
    return SceneWarp(K=intrinsics(size, size), R=R, t=t, rho=rho, size=size)


def generate_pose_pair(index: int, *, dataset_seed: int, resolution: int, noise_std: float = 0.0) -> Tuple[TrainingPair, SceneWarp]:
    seed = pair_seed(dataset_seed, index)
    rng = np.random.default_rng(seed)
    base = make_base_image(rng, BASE_SCALE * resolution)
    while True:
        scene = sample_scene(rng, resolution)
        try:
            pair = render_pair(base, scene, resolution, noise_std=noise_std, rng=rng)
        except (PairRejectedError, ValueError):
            continue
        pair.kind = SCENE_KIND
        pair.seed = seed
        return pair, scene


def generate_pose_dataset(
    count: int,
    *,
    seed: int,
    resolution: int,
    val_fraction: float = 0.1,
    noise_std: float = 0.0,
) -> List[Tuple[TrainingPair, SceneWarp]]:
    if count <= 0:
        raise ValueError("dataset size must be positive")
    items: List[Tuple[TrainingPair, SceneWarp]] = []
    for index in range(count):
        pair, scene = generate_pose_pair(index, dataset_seed=seed, resolution=resolution, noise_std=noise_std)
        pair.pair_id = f"{index:05d}"
        pair.split = split_for_index(index, count, val_fraction)
        items.append((pair, scene))
    logger.info("Generated %d pose pairs resolution=%d", count, resolution)
    return items


# ---------------------------------------------------------------------------
# pose files
# ---------------------------------------------------------------------------


def _join(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def write_pose(path: Path, scene: SceneWarp) -> None:
    K = scene.K
    lines = [
        f"fx={float(K[0, 0])!r}",
        f"fy={float(K[1, 1])!r}",
        f"cx={float(K[0, 2])!r}",
        f"cy={float(K[1, 2])!r}",
        f"R={_join(scene.R)}",
        f"t={_join(scene.t)}",
        f"rho={_join(scene.rho)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_pose_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for line in text.splitlines():
        clean = line.strip()
        if not clean or clean.startswith("#"):
            continue
        key, sep, value = clean.partition("=")
        if not sep:
            raise DataError(f"malformed pose line: {clean}")
        values[key.strip()] = value.strip()
    return values


def read_pose(path: Path) -> Tuple[CameraModel, CameraModel]:
    """Returns (camera1, camera2); camera1 is the reference frame of the correspondence map."""
    try:
        values = _parse_pose_text(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing pose file: {exc.filename}") from exc
    try:
        K = np.array(
            [
                [float(values["fx"]), 0.0, float(values["cx"])],
                [0.0, float(values["fy"]), float(values["cy"])],
                [0.0, 0.0, 1.0],
            ]
        )
        R = np.array([float(v) for v in values["R"].split(",")]).reshape(3, 3)
        t = np.array([float(v) for v in values["t"].split(",")]).reshape(3)
        return CameraModel(K), CameraModel(K, R, t)
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid pose file {path}: {exc}") from exc


def pose_path(data_dir: Path, pair_id: str) -> Path:
    return Path(data_dir) / f"pair_{pair_id}{POSE_SUFFIX}"


def write_pose_files(data_dir: Path, items: List[Tuple[TrainingPair, SceneWarp]]) -> None:
    for pair, scene in items:
        write_pose(pose_path(data_dir, pair.pair_id), scene)
