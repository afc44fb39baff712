from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, ClassVar, Tuple, Union

import numpy as np

TRANSFORM_KINDS = ("affine", "tps", "homo")
MAX_STRENGTH = 0.4
POINT_AT_INFINITY_EPS = 1e-12
_NEWTON_STEPS = 30
_NEWTON_TOL = 1e-12


def _as_points(points: object) -> np.ndarray:
    array = np.asarray(points, dtype=np.float64)
    if array.shape[-1] != 2:
        raise ValueError("points must have a trailing dimension of 2")
    return array


# ---------------------------------------------------------------------------
# transform types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineTransform:
    kind: ClassVar[str] = "affine"
    matrix: np.ndarray  # 2 x 3

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(matrix[:, :2])) <= 1e-10:
            raise ValueError("affine linear part must be invertible")
        object.__setattr__(self, "matrix", matrix)

    @property
    def params(self) -> np.ndarray:
        return self.matrix.reshape(-1)

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class HomographyTransform:
    kind: ClassVar[str] = "homo"
    matrix: np.ndarray  # 3 x 3, h33 == 1

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(matrix)) <= 1e-10:
            raise ValueError("homography must be invertible")
        if abs(matrix[2, 2]) > 1e-15:
            matrix = matrix / matrix[2, 2]
        object.__setattr__(self, "matrix", matrix)

    @property
    def params(self) -> np.ndarray:
        return self.matrix.reshape(-1)


@dataclass(frozen=True)
class TpsTransform:
    """Thin-plate spline f(p) = a0 + a1 x + a2 y + sum_i w_i U(|p - c_i|), U(r) = r^2 log r."""

    kind: ClassVar[str] = "tps"
    control: np.ndarray  # K x 2 source control points
    offsets: np.ndarray  # K x 2 target minus source at the control points
    weights: np.ndarray  # K x 2 kernel weights
    affine: np.ndarray  # 3 x 2

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.control.reshape(-1), self.offsets.reshape(-1)])


@dataclass(frozen=True)
class NumericInverse:
    """Inverse of a smooth forward map without closed form, evaluated by Newton iteration."""

    kind: ClassVar[str] = "inverse"
    forward: object = field(repr=False)


GeometricTransform = Union[AffineTransform, HomographyTransform, TpsTransform, NumericInverse]


def identity(kind: str = "affine") -> GeometricTransform:
    if kind == "affine":
        return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    if kind == "homo":
        return HomographyTransform(np.eye(3))
    if kind == "tps":
        grid = tps_control_grid()
        # exact zero kernel weights so the identity maps every point onto itself bit for bit
        return TpsTransform(
            control=grid,
            offsets=np.zeros_like(grid),
            weights=np.zeros_like(grid),
            affine=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        )
    raise ValueError(f"unknown transform kind: {kind}")


# ---------------------------------------------------------------------------
# point mapping
# ---------------------------------------------------------------------------


def _tps_kernel(distance: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = distance * distance * np.log(distance)
    return np.where(distance > 0, values, 0.0)


def _apply_tps(t: TpsTransform, points: np.ndarray) -> np.ndarray:
    flat = points.reshape(-1, 2)
    distance = np.linalg.norm(flat[:, None, :] - t.control[None, :, :], axis=-1)
    basis = np.hstack([np.ones((flat.shape[0], 1)), flat])
    mapped = basis @ t.affine + _tps_kernel(distance) @ t.weights
    return mapped.reshape(points.shape)


def _apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    x, y = points[..., 0], points[..., 1]
    denom = matrix[2, 0] * x + matrix[2, 1] * y + matrix[2, 2]
    if np.any(np.abs(denom) <= POINT_AT_INFINITY_EPS):
        raise ValueError("point at infinity")
    u = (matrix[0, 0] * x + matrix[0, 1] * y + matrix[0, 2]) / denom
    v = (matrix[1, 0] * x + matrix[1, 1] * y + matrix[1, 2]) / denom
    return np.stack([u, v], axis=-1)


def apply_transform(t: GeometricTransform, points: object) -> np.ndarray:
    pts = _as_points(points)
    if isinstance(t, AffineTransform):
        return pts @ t.matrix[:, :2].T + t.matrix[:, 2]
    if isinstance(t, HomographyTransform):
        return _apply_homography(t.matrix, pts)
    if isinstance(t, TpsTransform):
        return _apply_tps(t, pts)
    if isinstance(t, NumericInverse):
        return invert_points(lambda p: apply_transform(t.forward, p), pts)
    if hasattr(t, "apply"):
        return t.apply(pts)
    raise ValueError(f"unsupported transform: {type(t).__name__}")


def invert_points(forward: Callable[[np.ndarray], np.ndarray], targets: np.ndarray) -> np.ndarray:
    """Solve forward(p) = target per point by Newton steps with a finite-difference Jacobian."""
    flat_targets = targets.reshape(-1, 2)
    guess = flat_targets.copy()
    step = 1e-6
    for _ in range(_NEWTON_STEPS):
        residual = forward(guess) - flat_targets
        if np.max(np.abs(residual)) < _NEWTON_TOL:
            break
        fx = (forward(guess + [step, 0.0]) - forward(guess - [step, 0.0])) / (2 * step)
        fy = (forward(guess + [0.0, step]) - forward(guess - [0.0, step])) / (2 * step)
        jac = np.stack([fx, fy], axis=-1)  # (P, 2 outputs, 2 inputs)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        good = np.abs(det) > 1e-12
        safe_det = np.where(good, det, 1.0)
        dx = (jac[:, 1, 1] * residual[:, 0] - jac[:, 0, 1] * residual[:, 1]) / safe_det
        dy = (-jac[:, 1, 0] * residual[:, 0] + jac[:, 0, 0] * residual[:, 1]) / safe_det
        newton = np.stack([dx, dy], axis=-1)
        # fixed-point fallback where the Jacobian is singular
        guess = guess - np.where(good[:, None], newton, residual)
    return guess.reshape(targets.shape)


def inverse_transform(t: GeometricTransform) -> GeometricTransform:
    if isinstance(t, AffineTransform):
        inv = np.linalg.inv(t.homogeneous())
        return AffineTransform(inv[:2])
    if isinstance(t, HomographyTransform):
        return HomographyTransform(np.linalg.inv(t.matrix))
    if isinstance(t, NumericInverse):
        return t.forward  # type: ignore[return-value]
    return NumericInverse(forward=t)


def compose(outer: GeometricTransform, inner: GeometricTransform) -> GeometricTransform:
    """outer after inner, for affine and homography transforms."""
    matrices = []
    for t in (outer, inner):
        if isinstance(t, AffineTransform):
            matrices.append(t.homogeneous())
        elif isinstance(t, HomographyTransform):
            matrices.append(t.matrix)
        else:
            raise ValueError("compose supports affine and homography transforms only")
    product = matrices[0] @ matrices[1]
    if isinstance(outer, AffineTransform) and isinstance(inner, AffineTransform):
        return AffineTransform(product[:2])
    return HomographyTransform(product)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def tps_control_grid(size: int = 3) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, size)
    xs, ys = np.meshgrid(axis, axis)
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def fit_tps(src_ctrl: object, dst_ctrl: object, reg: float = 0.0) -> TpsTransform:
    src = _as_points(src_ctrl).reshape(-1, 2)
    dst = _as_points(dst_ctrl).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("source and target control points must match")
    count = src.shape[0]
    basis = np.hstack([np.ones((count, 1)), src])
    if count < 3 or np.linalg.matrix_rank(basis) < 3:
        raise ValueError("tps needs at least 3 non-collinear control points")
    kernel = _tps_kernel(np.linalg.norm(src[:, None, :] - src[None, :, :], axis=-1)) + reg * np.eye(count)
    system = np.zeros((count + 3, count + 3))
    system[:count, :count] = kernel
    system[:count, count:] = basis
    system[count:, :count] = basis.T
    rhs = np.zeros((count + 3, 2))
    rhs[:count] = dst
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular tps system") from exc
    return TpsTransform(control=src, offsets=dst - src, weights=solution[:count], affine=solution[count:])


def homography_from_points(src: object, dst: object) -> HomographyTransform:
    """Direct linear transform: 4 points exactly, more in the least-squares sense."""
    a = _as_points(src).reshape(-1, 2)
    b = _as_points(dst).reshape(-1, 2)
    if a.shape != b.shape or a.shape[0] < 4:
        raise ValueError("homography needs at least 4 point correspondences")
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, singular, vh = np.linalg.svd(np.asarray(rows))
    if singular[-2] <= 1e-12 * singular[0]:
        raise ValueError("degenerate point configuration for homography")
    matrix = vh[-1].reshape(3, 3)
    if abs(matrix[2, 2]) <= 1e-15:
        raise ValueError("homography with vanishing h33")
    return HomographyTransform(matrix / matrix[2, 2])


# ---------------------------------------------------------------------------
# random transforms
# ---------------------------------------------------------------------------

FRAME_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _tps_orientation_preserving(t: TpsTransform) -> bool:
    samples = tps_control_grid(9)
    step = 1e-4
    dx = (apply_transform(t, samples + [step, 0.0]) - apply_transform(t, samples - [step, 0.0])) / (2 * step)
    dy = (apply_transform(t, samples + [0.0, step]) - apply_transform(t, samples - [0.0, step])) / (2 * step)
    det = dx[:, 0] * dy[:, 1] - dx[:, 1] * dy[:, 0]
    return bool(np.all(det > 0.05))


def sample_transform(kind: str, rng: np.random.Generator, strength: float) -> GeometricTransform:
    if kind not in TRANSFORM_KINDS:
        raise ValueError(f"unknown transform kind: {kind}")
    if not 0.0 <= strength <= MAX_STRENGTH:
        raise ValueError(f"strength must be within [0, {MAX_STRENGTH}]")
    if strength == 0.0:
        return identity(kind)
    while True:
        try:
            if kind == "affine":
                angle = rng.uniform(-1.0, 1.0) * strength * np.pi / 4
                sx, sy = rng.uniform(1.0 - strength, 1.0 + strength, size=2)
                shear = rng.uniform(-1.0, 1.0) * strength / 2
                tx, ty = rng.uniform(-strength, strength, size=2)
                rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
                linear = rotation @ np.array([[sx, shear], [0.0, sy]])
                return AffineTransform(np.hstack([linear, [[tx], [ty]]]))
            if kind == "homo":
                perturbed = FRAME_CORNERS + rng.uniform(-strength, strength, size=FRAME_CORNERS.shape)
                candidate = homography_from_points(FRAME_CORNERS, perturbed)
                w = FRAME_CORNERS @ candidate.matrix[2, :2] + candidate.matrix[2, 2]
                if np.all(w > 0.1):
                    return candidate
                continue
            grid = tps_control_grid()
            candidate_tps = fit_tps(grid, grid + rng.uniform(-strength, strength, size=grid.shape))
            if _tps_orientation_preserving(candidate_tps):
                return candidate_tps
        except ValueError:
            continue


# ---------------------------------------------------------------------------
# dense correspondence maps
# ---------------------------------------------------------------------------


@dataclass
class CorrespondenceMap:
    """H x W x 2 map of (u, v) coordinates in align-corners normalised units."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("correspondence map must be H x W x 2")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("correspondence map must be finite")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


@dataclass
class MatchabilityMask:
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 2:
            raise ValueError("matchability mask must be H x W")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    def coverage(self) -> float:
        return float(np.mean(self.data)) if self.data.size else 0.0


def identity_grid(width: int, height: int) -> np.ndarray:
    us = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    vs = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu, vv], axis=-1)


def mask_from_coordinates(coords: np.ndarray) -> np.ndarray:
    return np.all((coords >= -1.0) & (coords <= 1.0), axis=-1)


def gt_correspondence_map(t: GeometricTransform, width: int, height: int) -> Tuple[CorrespondenceMap, MatchabilityMask]:
    mapped = apply_transform(t, identity_grid(width, height))
    return CorrespondenceMap(mapped.astype(np.float32)), MatchabilityMask(mask_from_coordinates(mapped))


def map_to_flow(m: CorrespondenceMap) -> CorrespondenceMap:
    grid = identity_grid(m.width, m.height).astype(m.data.dtype).astype(np.float64)
    return CorrespondenceMap(m.data.astype(np.float64) - grid)


def flow_to_map(f: CorrespondenceMap, dtype: type = np.float32) -> CorrespondenceMap:
    grid = identity_grid(f.width, f.height).astype(dtype).astype(np.float64)
    return CorrespondenceMap((f.data.astype(np.float64) + grid).astype(dtype))


def normalized_to_pixels(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([(coords[..., 0] + 1.0) * 0.5 * (width - 1), (coords[..., 1] + 1.0) * 0.5 * (height - 1)], axis=-1)


def pixels_to_normalized(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.stack([pixels[..., 0] * 2.0 / (width - 1) - 1.0, pixels[..., 1] * 2.0 / (height - 1) - 1.0], axis=-1)
