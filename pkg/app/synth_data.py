from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import ops
from .geometry import (
    TRANSFORM_KINDS,
    CorrespondenceMap,
    GeometricTransform,
    MatchabilityMask,
    apply_transform,
    gt_correspondence_map,
    identity_grid,
    inverse_transform,
    sample_transform,
)
from .tensor import Tensor, default_dtype, no_grad

logger = logging.getLogger("dgc-desk.data")

MAP_MAGIC = b"CMAP"
MASK_MAGIC = b"MSK1"
MANIFEST_NAME = "manifest.txt"
MANIFEST_COLUMNS = ("pair_id", "kind", "seed", "split")
MIN_MASK_COVERAGE = 0.2
BASE_SCALE = 2


class DataError(ValueError):
    pass


class PairRejectedError(ValueError):
    pass


@dataclass
class TrainingPair:
    source_image: np.ndarray  # H x W x 3 in [0, 1]
    target_image: np.ndarray
    gt_map: CorrespondenceMap
    gt_mask: MatchabilityMask
    transform: Optional[GeometricTransform] = None
    pair_id: str = ""
    kind: str = ""
    seed: int = 0
    split: str = "train"

    def __post_init__(self) -> None:
        h, w = self.gt_map.height, self.gt_map.width
        for image in (self.source_image, self.target_image):
            if image.shape != (h, w, 3):
                raise ValueError("images must share dimensions with the correspondence map")
        if (self.gt_mask.height, self.gt_mask.width) != (h, w):
            raise ValueError("mask must share dimensions with the correspondence map")

    @property
    def resolution(self) -> int:
        return self.gt_map.width


@dataclass(frozen=True)
class ManifestRow:
    pair_id: str
    kind: str
    seed: int
    split: str


# ---------------------------------------------------------------------------
# procedural base images
# ---------------------------------------------------------------------------


def sample_image(image: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an H x W x C image at an (Ho, Wo, 2) align-corners grid through ops.grid_sample."""
    with default_dtype(np.float64), no_grad():
        x = Tensor(np.transpose(image, (2, 0, 1))[None])
        out = ops.grid_sample(x, Tensor(np.asarray(grid)[None]))
    return np.transpose(out.data[0], (1, 2, 0))


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return sample_image(image, identity_grid(width, height))


def _convex_polygon_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    center = rng.uniform(0.15 * size, 0.85 * size, size=2)
    radius = rng.uniform(size / 12, size / 5)
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=int(rng.integers(3, 7))))
    vertices = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = np.ones((size, size), dtype=bool)
    for a, b in zip(vertices, np.roll(vertices, -1, axis=0)):
        cross = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside &= cross >= 0
    return inside


def make_base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-scale coloured noise, convex polygons and a soft checkerboard, values in [0, 1]."""
    image = np.zeros((size, size, 3), dtype=np.float64)
    for octave, cells in enumerate((4, 8, 16, 32)):
        if cells > size:
            break
        coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
        image += resize_bilinear(coarse, size, size) / (octave + 1)
    image /= max(float(image.max()), 1e-9)

    for _ in range(int(rng.integers(3, 7))):
        inside = _convex_polygon_mask(rng, size)
        image[inside] = 0.5 * image[inside] + 0.5 * rng.uniform(0.0, 1.0, size=3)

    period = rng.uniform(size / 10, size / 5)
    angle = rng.uniform(0.0, np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    a = (np.cos(angle) * xs + np.sin(angle) * ys) * np.pi / period
    b = (-np.sin(angle) * xs + np.cos(angle) * ys) * np.pi / period
    checker = 0.5 + 0.5 * np.tanh(2.0 * np.sin(a) * np.sin(b))
    image = 0.8 * image + 0.2 * checker[..., None]
    return np.clip(image, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_pair(
    base_image: np.ndarray,
    transform: GeometricTransform,
    size: int,
    *,
    noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> TrainingPair:
    """Target is the central crop of the base; source(y) samples the base at inverse(t)(y)."""
    base_h, base_w = base_image.shape[:2]
    if base_h < size or base_w < size:
        raise ValueError("base image must be at least the target resolution")
    top = (base_h - size) // 2
    left = (base_w - size) // 2
    target = base_image[top : top + size, left : left + size].astype(np.float64)

    gt_map, gt_mask = gt_correspondence_map(transform, size, size)
    if gt_mask.coverage() < MIN_MASK_COVERAGE:
        raise PairRejectedError("transform leaves too few matchable pixels")

    coords = apply_transform(inverse_transform(transform), identity_grid(size, size))
    px = (coords[..., 0] + 1.0) * 0.5 * (size - 1) + left
    py = (coords[..., 1] + 1.0) * 0.5 * (size - 1) + top
    base_grid = np.stack([px * 2.0 / (base_w - 1) - 1.0, py * 2.0 / (base_h - 1) - 1.0], axis=-1)
    source = sample_image(base_image, base_grid)

    if noise_std > 0:
        noise_rng = rng or np.random.default_rng(0)
        source = source + noise_rng.normal(0.0, noise_std, size=source.shape)
        target = target + noise_rng.normal(0.0, noise_std, size=target.shape)
    return TrainingPair(
        source_image=np.clip(source, 0.0, 1.0).astype(np.float32),
        target_image=np.clip(target, 0.0, 1.0).astype(np.float32),
        gt_map=gt_map,
        gt_mask=gt_mask,
        transform=transform,
    )


def pair_seed(dataset_seed: int, index: int) -> int:
    return int(dataset_seed) ^ int(index)


def split_for_index(index: int, count: int, val_fraction: float) -> str:
    train_count = int(round(count * (1.0 - val_fraction)))
    return "train" if index < train_count else "val"


def parse_kinds(raw: str) -> List[str]:
    kinds = [part.strip().lower() for part in str(raw or "").split(",") if part.strip()]
    if not kinds:
        raise ValueError("at least one transform kind is required")
    for kind in kinds:
        if kind not in TRANSFORM_KINDS:
            raise ValueError(f"invalid kind: {kind} (expected one of {', '.join(TRANSFORM_KINDS)})")
    return kinds


def generate_pair(
    index: int,
    kind: str,
    *,
    dataset_seed: int,
    strength: float,
    resolution: int,
    noise_std: float = 0.0,
) -> TrainingPair:
    seed = pair_seed(dataset_seed, index)
    rng = np.random.default_rng(seed)
    base = make_base_image(rng, BASE_SCALE * resolution)
    while True:
        transform = sample_transform(kind, rng, strength)
        try:
            pair = render_pair(base, transform, resolution, noise_std=noise_std, rng=rng)
        except PairRejectedError:
            continue
        pair.kind = kind
        pair.seed = seed
        return pair


def generate_dataset(
    count: int,
    kinds: Sequence[str],
    *,
    seed: int,
    strength: float,
    resolution: int,
    val_fraction: float = 0.1,
    noise_std: float = 0.0,
) -> List[TrainingPair]:
    if count <= 0:
        raise ValueError("dataset size must be positive")
    pairs: List[TrainingPair] = []
    for index in range(count):
        kind = kinds[index % len(kinds)]
        pair = generate_pair(index, kind, dataset_seed=seed, strength=strength, resolution=resolution, noise_std=noise_std)
        pair.pair_id = f"{index:05d}"
        pair.split = split_for_index(index, count, val_fraction)
        pairs.append(pair)
    logger.info("Generated %d pairs kinds=%s strength=%s resolution=%d", count, ",".join(kinds), strength, resolution)
    return pairs


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_ppm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            image_format = image.format
            pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"unreadable image file: {path}") from exc
    if image_format != "PPM":
        raise DataError(f"unsupported image format {image_format}: {path}")
    return pixels.astype(np.float32) / 255.0


def write_map(path: Path, m: CorrespondenceMap) -> None:
    with open(path, "wb") as handle:
        handle.write(MAP_MAGIC)
        handle.write(struct.pack("<II", m.width, m.height))
        handle.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes(order="C"))


def read_map(path: Path) -> CorrespondenceMap:
    raw = Path(path).read_bytes()
    if raw[:4] != MAP_MAGIC:
        raise DataError(f"invalid correspondence map header: {path}")
    w, h = struct.unpack("<II", raw[4:12])
    payload = raw[12 : 12 + h * w * 2 * 4]
    if len(payload) != h * w * 2 * 4:
        raise DataError(f"truncated correspondence map: {path}")
    return CorrespondenceMap(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(h, w, 2))


def write_mask(path: Path, mask: MatchabilityMask) -> None:
    with open(path, "wb") as handle:
        handle.write(MASK_MAGIC)
        handle.write(struct.pack("<II", mask.width, mask.height))
        handle.write(mask.data.astype(np.uint8).tobytes(order="C"))


def read_mask(path: Path) -> MatchabilityMask:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise DataError(f"invalid mask header: {path}")
    w, h = struct.unpack("<II", raw[4:12])
    payload = raw[12 : 12 + h * w]
    if len(payload) != h * w:
        raise DataError(f"truncated mask: {path}")
    return MatchabilityMask(np.frombuffer(payload, dtype=np.uint8).reshape(h, w) > 0)


def write_manifest(path: Path, rows: Iterable[ManifestRow], *, resolution: int, extra: Optional[Dict[str, str]] = None) -> None:
    lines = ["# dgc-desk dataset", f"# resolution={resolution}"]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"# {key}={value}")
    lines.append("# " + ",".join(MANIFEST_COLUMNS))
    for row in rows:
        lines.append(f"{row.pair_id},{row.kind},{row.seed},{row.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> Tuple[List[ManifestRow], Dict[str, str]]:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    rows: List[ManifestRow] = []
    meta: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            body = text[1:].strip()
            if "=" in body and "," not in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        parts = [part.strip() for part in text.split(",")]
        if len(parts) != len(MANIFEST_COLUMNS):
            raise DataError(f"malformed manifest line: {text}")
        rows.append(ManifestRow(pair_id=parts[0], kind=parts[1], seed=int(parts[2]), split=parts[3]))
    return rows, meta


def write_dataset(out_dir: Path, pairs: Sequence[TrainingPair], *, extra: Optional[Dict[str, str]] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not pairs:
        raise ValueError("no pairs to write")
    for pair in pairs:
        stem = out / f"pair_{pair.pair_id}"
        write_ppm(stem.with_name(stem.name + ".src.ppm"), pair.source_image)
        write_ppm(stem.with_name(stem.name + ".tgt.ppm"), pair.target_image)
        write_map(stem.with_name(stem.name + ".map"), pair.gt_map)
        write_mask(stem.with_name(stem.name + ".mask"), pair.gt_mask)
    rows = [ManifestRow(pair.pair_id, pair.kind, pair.seed, pair.split) for pair in pairs]
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, rows, resolution=pairs[0].resolution, extra=extra)
    return manifest


def load_pair(data_dir: Path, row: ManifestRow) -> TrainingPair:
    stem = Path(data_dir) / f"pair_{row.pair_id}"
    try:
        return TrainingPair(
            source_image=read_ppm(stem.with_name(stem.name + ".src.ppm")),
            target_image=read_ppm(stem.with_name(stem.name + ".tgt.ppm")),
            gt_map=read_map(stem.with_name(stem.name + ".map")),
            gt_mask=read_mask(stem.with_name(stem.name + ".mask")),
            pair_id=row.pair_id,
            kind=row.kind,
            seed=row.seed,
            split=row.split,
        )
    except FileNotFoundError as exc:
        raise DataError(f"missing pair file: {exc.filename}") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"inconsistent pair {row.pair_id}: {exc}") from exc


def load_dataset(data_dir: Path, *, split: Optional[str] = None) -> List[TrainingPair]:
    rows, _ = read_manifest(Path(data_dir) / MANIFEST_NAME)
    selected = [row for row in rows if split in (None, "all") or row.split == split]
    return [load_pair(data_dir, row) for row in selected]


def dataset_resolution(data_dir: Path) -> int:
    _, meta = read_manifest(Path(data_dir) / MANIFEST_NAME)
    try:
        return int(meta.get("resolution") or 0)
    except ValueError as exc:
        raise DataError("manifest resolution is not an integer") from exc
