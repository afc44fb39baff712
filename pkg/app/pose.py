from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CorrespondenceMap, normalized_to_pixels
from .metrics import cumulative_histogram

logger = logging.getLogger("dgc-desk.pose")

MIN_MATCHES = 8
DEFAULT_ITERS = 1000
DEFAULT_RESTARTS = 5
DEFAULT_INLIER_THRESH_PX = 1.0
DEFAULT_STRIDE = 2
DEFAULT_CONF_THRESHOLD = 0.5
_DEGENERATE_RATIO = 1e-10
_RESAMPLE_ROUNDS = 4


class InsufficientMatchesError(ValueError):
    pass


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(np.linalg.det(K)) <= 1e-12:
            raise ValueError("intrinsics must be invertible with positive focal lengths")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)


def intrinsics(width: int, height: int, focal: Optional[float] = None) -> np.ndarray:
    f = float(focal if focal is not None else width)
    return np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


@dataclass
class MatchSet:
    x1: np.ndarray  # M x 2 pixels in the image the map is indexed over
    x2: np.ndarray  # M x 2 pixels in the other image
    confidence: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.x1 = np.asarray(self.x1, dtype=np.float64).reshape(-1, 2)
        self.x2 = np.asarray(self.x2, dtype=np.float64).reshape(-1, 2)
        if self.x1.shape != self.x2.shape:
            raise ValueError("match arrays must have equal length")

    def __len__(self) -> int:
        return int(self.x1.shape[0])

    def subset(self, keep: np.ndarray) -> "MatchSet":
        conf = None if self.confidence is None else self.confidence[keep]
        return MatchSet(self.x1[keep], self.x2[keep], conf)


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return skew(t) @ R


def fundamental_from_essential(E: np.ndarray, K1: np.ndarray, K2: np.ndarray) -> np.ndarray:
    return np.linalg.inv(K2).T @ E @ np.linalg.inv(K1)


def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# matches
# ---------------------------------------------------------------------------


def matches_from_map(
    m: CorrespondenceMap,
    conf: Optional[np.ndarray] = None,
    threshold: float = DEFAULT_CONF_THRESHOLD,
    stride: int = DEFAULT_STRIDE,
) -> MatchSet:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = m.height, m.width
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    coords = m.data[grid_r, grid_c].astype(np.float64)
    keep = np.all((coords >= -1.0) & (coords <= 1.0), axis=-1)
    scores = None
    if conf is not None:
        scores = np.asarray(conf, dtype=np.float64)[grid_r, grid_c]
        keep &= scores >= threshold
    if int(np.count_nonzero(keep)) < MIN_MATCHES:
        raise InsufficientMatchesError("fewer than 8 matches")
    x1 = np.stack([grid_c[keep], grid_r[keep]], axis=-1).astype(np.float64)
    x2 = normalized_to_pixels(coords[keep], w, h)
    return MatchSet(x1, x2, None if scores is None else scores[keep])


def inject_outliers(ms: MatchSet, fraction: float, rng: np.random.Generator, width: int, height: int) -> Tuple[MatchSet, np.ndarray]:
    """Replace a fraction of target points with uniform random pixels; returns the set and the outlier flags."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("outlier fraction must be within [0, 1]")
    count = len(ms)
    flags = np.zeros(count, dtype=bool)
    flags[rng.permutation(count)[: int(round(fraction * count))]] = True
    x2 = ms.x2.copy()
    x2[flags] = rng.uniform([0.0, 0.0], [width - 1.0, height - 1.0], size=(int(flags.sum()), 2))
    return MatchSet(ms.x1.copy(), x2, ms.confidence), flags


# ---------------------------------------------------------------------------
# essential matrix estimation
# ---------------------------------------------------------------------------


def _hartley(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid to origin, mean distance sqrt(2); points is (..., M, 2)."""
    centroid = points.mean(axis=-2, keepdims=True)
    centered = points - centroid
    mean_dist = np.mean(np.linalg.norm(centered, axis=-1), axis=-1)
    factor = np.sqrt(2.0) / np.maximum(mean_dist, 1e-12)
    transform = np.zeros(points.shape[:-2] + (3, 3))
    transform[..., 0, 0] = factor
    transform[..., 1, 1] = factor
    transform[..., 0, 2] = -factor * centroid[..., 0, 0]
    transform[..., 1, 2] = -factor * centroid[..., 0, 1]
    transform[..., 2, 2] = 1.0
    return centered * factor[..., None, None], transform


def project_to_essential(E: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (s, s, 0), s the mean of the top two; batched."""
    u, s, vh = np.linalg.svd(E)
    mean = 0.5 * (s[..., 0] + s[..., 1])
    diag = np.zeros(s.shape)
    diag[..., 0] = mean
    diag[..., 1] = mean
    return (u * diag[..., None, :]) @ vh


def _unit_frobenius(E: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(E.reshape(E.shape[:-2] + (9,)), axis=-1)
    return E / np.maximum(norm, 1e-300)[..., None, None]


def eight_point(n1: np.ndarray, n2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised 8-point essential estimate on calibrated coordinates; batched over leading axes.

    Returns (E, ok) where ok flags samples whose linear system was not rank deficient.
    """
    p1, t1 = _hartley(n1)
    p2, t2 = _hartley(n2)
    x1, y1 = p1[..., 0], p1[..., 1]
    x2, y2 = p2[..., 0], p2[..., 1]
    ones = np.ones_like(x1)
    design = np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, ones], axis=-1)
    _, singular, vh = np.linalg.svd(design, full_matrices=design.shape[-2] < 9)
    ok = singular[..., 7] > _DEGENERATE_RATIO * singular[..., 0]
    E_hat = vh[..., -1, :].reshape(design.shape[:-2] + (3, 3))
    E = np.swapaxes(t2, -1, -2) @ E_hat @ t1
    return _unit_frobenius(project_to_essential(E)), ok


def symmetric_epipolar_distances(x1: np.ndarray, x2: np.ndarray, F: np.ndarray) -> np.ndarray:
    """sqrt((d(x2, F x1)^2 + d(x1, F^T x2)^2) / 2); F may carry leading batch axes."""
    h1 = _homogeneous(x1)
    h2 = _homogeneous(x2)
    lines2 = np.einsum("...ij,mj->...mi", F, h1)
    lines1 = np.einsum("...ji,mj->...mi", F, h2)
    algebraic = np.einsum("...mi,mi->...m", lines2, h2)
    n2 = np.hypot(lines2[..., 0], lines2[..., 1])
    n1 = np.hypot(lines1[..., 0], lines1[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.abs(algebraic) / n2
        d1 = np.abs(algebraic) / n1
        dist = np.sqrt(0.5 * (d1 * d1 + d2 * d2))
    return np.where((n1 > 0) & (n2 > 0), dist, np.inf)


def _normalize(points: np.ndarray, K: np.ndarray) -> np.ndarray:
    h = _homogeneous(points) @ np.linalg.inv(K).T
    return h[:, :2] / h[:, 2:3]


def _draw_samples(rng: np.random.Generator, count: int, iters: int) -> np.ndarray:
    keys = rng.random((iters, count))
    return np.argsort(keys, axis=1, kind="stable")[:, :MIN_MATCHES]


def _score_models(E: np.ndarray, ms: MatchSet, K1: np.ndarray, K2: np.ndarray, thresh: float) -> Tuple[np.ndarray, np.ndarray]:
    F = np.linalg.inv(K2).T @ E @ np.linalg.inv(K1)
    dist = symmetric_epipolar_distances(ms.x1, ms.x2, F)
    inliers = dist < thresh
    counts = inliers.sum(axis=-1)
    masked = np.where(inliers, dist, 0.0)
    residual = masked.sum(axis=-1) / np.maximum(counts, 1)
    return counts, residual


def estimate_essential_ransac(
    ms: MatchSet,
    K1: np.ndarray,
    K2: np.ndarray,
    *,
    iters: int = DEFAULT_ITERS,
    restarts: int = DEFAULT_RESTARTS,
    inlier_thresh_px: float = DEFAULT_INLIER_THRESH_PX,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    if len(ms) < MIN_MATCHES:
        raise InsufficientMatchesError("fewer than 8 matches")
    rng = rng if rng is not None else np.random.default_rng(0)
    restart_seeds = rng.integers(0, 2**63 - 1, size=max(1, restarts))
    n1 = _normalize(ms.x1, K1)
    n2 = _normalize(ms.x2, K2)

    best: Optional[Tuple[int, float, int, np.ndarray]] = None
    for restart, seed in enumerate(restart_seeds):
        restart_rng = np.random.default_rng(int(seed))
        models: List[np.ndarray] = []
        needed = iters
        for _ in range(_RESAMPLE_ROUNDS):
            if needed <= 0:
                break
            samples = _draw_samples(restart_rng, len(ms), needed)
            E_batch, ok = eight_point(n1[samples], n2[samples])
            models.append(E_batch[ok])
            needed -= int(ok.sum())
        if not models or sum(len(m) for m in models) == 0:
            continue
        E_all = np.concatenate(models, axis=0)
        counts, residual = _score_models(E_all, ms, K1, K2, inlier_thresh_px)
        order = np.lexsort((np.arange(len(counts)), residual, -counts))
        top = int(order[0])
        candidate = (int(counts[top]), float(residual[top]), restart, E_all[top])
        if best is None or (candidate[0], -candidate[1], -candidate[2]) > (best[0], -best[1], -best[2]):
            best = candidate
        logger.debug("ransac restart=%d best_inliers=%d residual=%.4f", restart, candidate[0], candidate[1])

    if best is None or best[0] < MIN_MATCHES:
        raise InsufficientMatchesError("no model with at least 8 inliers")

    E_best = best[3]
    F = fundamental_from_essential(E_best, K1, K2)
    inliers = symmetric_epipolar_distances(ms.x1, ms.x2, F) < inlier_thresh_px
    refit, ok = eight_point(n1[inliers][None], n2[inliers][None])
    if bool(ok[0]):
        F_refit = fundamental_from_essential(refit[0], K1, K2)
        refit_inliers = symmetric_epipolar_distances(ms.x1, ms.x2, F_refit) < inlier_thresh_px
        if refit_inliers.sum() >= inliers.sum():
            return refit[0], refit_inliers
    return E_best, inliers


# ---------------------------------------------------------------------------
# pose recovery
# ---------------------------------------------------------------------------


def decompose_essential(E: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    u, _, vh = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vh) < 0:
        vh = -vh
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vh
    r2 = u @ w.T @ vh
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_midpoint(n1: np.ndarray, n2: np.ndarray, R: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Midpoint of closest approach between the two viewing rays; returns depths in both cameras."""
    d1 = _homogeneous(n1)
    d2 = _homogeneous(n2) @ R  # R^T applied to each ray, world = camera 1
    c2 = -R.T @ t
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    d = d1 @ c2
    e = d2 @ c2
    denom = a * c - b * b
    safe = np.where(np.abs(denom) > 1e-15, denom, 1.0)
    lam1 = np.where(np.abs(denom) > 1e-15, (c * d - b * e) / safe, 0.0)
    lam2 = np.where(np.abs(denom) > 1e-15, (b * d - a * e) / safe, 0.0)
    points = 0.5 * (lam1[:, None] * d1 + (c2 + lam2[:, None] * d2))
    depth1 = points[:, 2]
    depth2 = (points @ R.T + t)[:, 2]
    return depth1, depth2


def recover_pose(E: np.ndarray, ms: MatchSet, K1: np.ndarray, K2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n1 = _normalize(ms.x1, K1)
    n2 = _normalize(ms.x2, K2)
    scored = []
    for R, t in decompose_essential(E):
        depth1, depth2 = triangulate_midpoint(n1, n2, R, t)
        scored.append((int(np.count_nonzero((depth1 > 0) & (depth2 > 0))), R, t))
    counts = sorted((entry[0] for entry in scored), reverse=True)
    if counts[0] == counts[1]:
        raise DegeneratePoseError("cheirality test is ambiguous")
    _, R, t = max(scored, key=lambda entry: entry[0])
    return R, t / np.linalg.norm(t)


def _angle_deg(cosine: float) -> float:
    return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    return _angle_deg((np.trace(R_est.T @ R_gt) - 1.0) / 2.0)


def translation_error_deg(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    a = np.asarray(t_est, dtype=np.float64)
    b = np.asarray(t_gt, dtype=np.float64)
    return _angle_deg(abs(float(a @ b)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def pose_errors(R_est: np.ndarray, t_est: np.ndarray, R_gt: np.ndarray, t_gt: np.ndarray) -> Tuple[float, float]:
    return rotation_error_deg(R_est, R_gt), translation_error_deg(t_est, t_gt)


# ---------------------------------------------------------------------------
# epipolar summary and per-pair results
# ---------------------------------------------------------------------------

EPIPOLAR_THRESHOLDS = tuple(float(v) for v in np.arange(0.0, 10.25, 0.25))
ANGLE_THRESHOLDS = tuple(float(v) for v in np.arange(0.0, 20.5, 0.5))


@dataclass
class EpipolarSummary:
    distances: np.ndarray
    median: float
    histogram: List[Tuple[float, float]]


def symmetric_epipolar_error(
    ms: MatchSet,
    F: np.ndarray,
    thresholds: Sequence[float] = EPIPOLAR_THRESHOLDS,
) -> EpipolarSummary:
    distances = symmetric_epipolar_distances(ms.x1, ms.x2, np.asarray(F, dtype=np.float64))
    finite = distances[np.isfinite(distances)]
    median = float(np.median(finite)) if finite.size else float("nan")
    return EpipolarSummary(distances=distances, median=median, histogram=cumulative_histogram(distances, thresholds))


@dataclass
class PoseResult:
    pair_id: str
    rot_err_deg: float = float("nan")
    trans_err_deg: float = float("nan")
    inliers: int = 0
    matches: int = 0
    median_epi_px: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    def as_row(self) -> Dict[str, object]:
        return {
            "pair_id": self.pair_id,
            "rot_err_deg": self.rot_err_deg,
            "trans_err_deg": self.trans_err_deg,
            "inliers": self.inliers,
            "matches": self.matches,
            "median_epi_px": self.median_epi_px,
        }


def estimate_pair_pose(
    pair_id: str,
    ms: MatchSet,
    camera1: CameraModel,
    camera2: CameraModel,
    *,
    iters: int = DEFAULT_ITERS,
    restarts: int = DEFAULT_RESTARTS,
    inlier_thresh_px: float = DEFAULT_INLIER_THRESH_PX,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[PoseResult, Optional[EpipolarSummary]]:
    """RANSAC -> cheirality -> angular errors for one pair.

    camera1 is the reference frame (identity pose); camera2 carries the ground-truth relative (R, t).
    The epipolar summary is measured against the ground-truth fundamental matrix.
    """
    result = PoseResult(pair_id=pair_id, matches=len(ms))
    try:
        E, inliers = estimate_essential_ransac(
            ms,
            camera1.K,
            camera2.K,
            iters=iters,
            restarts=restarts,
            inlier_thresh_px=inlier_thresh_px,
            rng=rng,
        )
        result.inliers = int(inliers.sum())
        R, t = recover_pose(E, ms.subset(inliers), camera1.K, camera2.K)
    except (InsufficientMatchesError, DegeneratePoseError) as exc:
        logger.warning("pose failed pair=%s reason=%s", pair_id, exc)
        result.error = str(exc)
        return result, None
    result.rot_err_deg, result.trans_err_deg = pose_errors(R, t, camera2.R, camera2.t)
    F_gt = fundamental_from_essential(essential_from_pose(camera2.R, camera2.t), camera1.K, camera2.K)
    summary = symmetric_epipolar_error(ms, F_gt)
    result.median_epi_px = summary.median
    return result, summary
