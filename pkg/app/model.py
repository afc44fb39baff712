from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .geometry import CorrespondenceMap, identity_grid
from .tensor import Tensor, no_grad, parameter

logger = logging.getLogger("dgc-desk.model")

CORRELATION_KINDS = ("global", "local")
PARAMETRIZATIONS = ("map", "flow")
_CHANNEL_LADDER = (512, 256, 128, 96, 64, 32, 16)
_DECODER_WIDTHS = (128, 128, 96, 64, 32)
_PLAIN_DILATIONS = (1, 1, 1, 1, 1)
_WIDE_DILATIONS = (1, 2, 4, 4, 1)
DILATION_START_LEVEL = 3
MATCHABILITY_CHANNELS = (32, 32, 16, 1)
HEAD_INIT_SCALE = 0.1


def _default_channels(levels: int) -> Tuple[int, ...]:
    if levels > len(_CHANNEL_LADDER):
        raise ValueError(f"at most {len(_CHANNEL_LADDER)} pyramid levels are supported")
    return _CHANNEL_LADDER[len(_CHANNEL_LADDER) - levels :]


def _default_dilations(levels: int) -> Tuple[Tuple[int, ...], ...]:
    return tuple(_WIDE_DILATIONS if level >= DILATION_START_LEVEL else _PLAIN_DILATIONS for level in range(levels))


@dataclass(frozen=True)
class PyramidConfig:
    """Network layout; every per-level tuple is ordered coarsest level first."""

    levels: int = 4
    base_resolution: int = 64
    channels_per_level: Tuple[int, ...] = (96, 64, 32, 16)
    decoder_channels: Tuple[Tuple[int, ...], ...] = (_DECODER_WIDTHS,) * 4
    dilations_per_level: Tuple[Tuple[int, ...], ...] = _default_dilations(4)
    alpha: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    use_matchability: bool = False
    correlation: str = "global"
    local_radius: int = 4
    l2norm_correlation: bool = True
    parametrization: str = "map"
    matchability_channels: Tuple[int, ...] = MATCHABILITY_CHANNELS

    @classmethod
    def for_levels(cls, levels: int, base_resolution: int, **overrides: object) -> "PyramidConfig":
        defaults = dict(
            levels=levels,
            base_resolution=base_resolution,
            channels_per_level=_default_channels(levels),
            decoder_channels=(_DECODER_WIDTHS,) * levels,
            dilations_per_level=_default_dilations(levels),
            alpha=(1.0,) * levels,
        )
        defaults.update(overrides)
        return cls(**defaults)  # type: ignore[arg-type]

    def __post_init__(self) -> None:
        validate_config(self)

    def resolution(self, level: int) -> int:
        return self.base_resolution // (2 ** (self.levels - 1 - level))

    def with_resolution(self, base_resolution: int) -> "PyramidConfig":
        return replace(self, base_resolution=base_resolution)


def validate_config(cfg: PyramidConfig) -> None:
    if cfg.levels < 1:
        raise ValueError("levels must be >= 1")
    for name in ("channels_per_level", "decoder_channels", "dilations_per_level", "alpha"):
        if len(getattr(cfg, name)) != cfg.levels:
            raise ValueError(f"{name} must have one entry per level")
    for widths, dilations in zip(cfg.decoder_channels, cfg.dilations_per_level):
        if len(widths) != len(dilations) or not widths:
            raise ValueError("each decoder needs one dilation per block")
        if any(d < 1 for d in dilations) or any(c < 1 for c in widths):
            raise ValueError("decoder widths and dilations must be positive")
    if any(a < 0 for a in cfg.alpha):
        raise ValueError("alpha weights must be non-negative")
    if cfg.base_resolution % (2 ** (cfg.levels - 1)) != 0 or cfg.base_resolution < 2 ** cfg.levels:
        raise ValueError(f"resolution {cfg.base_resolution} is not divisible by 2^{cfg.levels - 1}")
    if cfg.correlation not in CORRELATION_KINDS:
        raise ValueError(f"unknown correlation: {cfg.correlation}")
    if cfg.local_radius < 0:
        raise ValueError("local radius must be >= 0")
    if cfg.parametrization not in PARAMETRIZATIONS:
        raise ValueError(f"unknown parametrization: {cfg.parametrization}")
    if not cfg.matchability_channels or cfg.matchability_channels[-1] != 1:
        raise ValueError("matchability decoder must end with one channel")


@dataclass
class ModelState:
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return [(name, self.params[name]) for name in sorted(self.params) if name.startswith(prefix)]

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Every stored array in a fixed order, parameters then running statistics."""
        items = [(name, tensor.data) for name, tensor in self.parameters()]
        items.extend((name, self.buffers[name]) for name in sorted(self.buffers))
        return items

    def copy(self) -> "ModelState":
        return ModelState(
            params={name: parameter(tensor.data.copy()) for name, tensor in self.params.items()},
            buffers={name: array.copy() for name, array in self.buffers.items()},
        )


@dataclass
class NetworkOutput:
    maps: List[Tensor]  # (N, 2, h_l, w_l), coarsest first
    matchability_logits: Optional[Tensor] = None
    features: Optional[Tensor] = None

    @property
    def finest(self) -> Tensor:
        return self.maps[-1]


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _he_normal(rng: np.random.Generator, out_ch: int, in_ch: int, k: int = 3, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


def _add_conv_bn(state: ModelState, rng: np.random.Generator, prefix: str, in_ch: int, out_ch: int) -> None:
    state.params[f"{prefix}.conv.w"] = parameter(_he_normal(rng, out_ch, in_ch))
    state.params[f"{prefix}.bn.gamma"] = parameter(np.ones(out_ch, dtype=np.float32))
    state.params[f"{prefix}.bn.beta"] = parameter(np.zeros(out_ch, dtype=np.float32))
    state.buffers[f"{prefix}.bn.mean"] = np.zeros(out_ch, dtype=np.float64)
    state.buffers[f"{prefix}.bn.var"] = np.ones(out_ch, dtype=np.float64)


def _add_head(state: ModelState, rng: np.random.Generator, prefix: str, in_ch: int, out_ch: int) -> None:
    state.params[f"{prefix}.w"] = parameter(_he_normal(rng, out_ch, in_ch, gain=HEAD_INIT_SCALE))
    state.params[f"{prefix}.b"] = parameter(np.zeros(out_ch, dtype=np.float32))


def decoder_input_channels(cfg: PyramidConfig, level: int) -> int:
    window = (2 * cfg.local_radius + 1) ** 2
    if level == 0:
        if cfg.correlation == "local":
            return window
        return cfg.resolution(0) ** 2
    if cfg.correlation == "local":
        return 2 + window
    return 2 + 2 * cfg.channels_per_level[level]


def init_model_state(cfg: PyramidConfig, seed: int) -> ModelState:
    rng = np.random.default_rng(seed)
    state = ModelState()
    # encoder blocks run finest to coarsest
    widths = list(reversed(cfg.channels_per_level))
    in_ch = 3
    for block, out_ch in enumerate(widths):
        _add_conv_bn(state, rng, f"enc.{block}", in_ch, out_ch)
        in_ch = out_ch
    for level in range(cfg.levels):
        in_ch = decoder_input_channels(cfg, level)
        for block, out_ch in enumerate(cfg.decoder_channels[level]):
            _add_conv_bn(state, rng, f"dec.{level}.{block}", in_ch, out_ch)
            in_ch = out_ch
        _add_head(state, rng, f"dec.{level}.out", in_ch, 2)
    if cfg.use_matchability:
        in_ch = cfg.decoder_channels[-1][-1]
        for block, out_ch in enumerate(cfg.matchability_channels[:-1]):
            _add_conv_bn(state, rng, f"match.{block}", in_ch, out_ch)
            in_ch = out_ch
        _add_head(state, rng, "match.out", in_ch, cfg.matchability_channels[-1])
    logger.debug("Initialised model params=%d seed=%d", sum(t.data.size for t in state.params.values()), seed)
    return state


def check_state(state: ModelState, cfg: PyramidConfig) -> None:
    expected = init_model_state(cfg, 0)
    if sorted(expected.params) != sorted(state.params):
        raise ValueError("model state does not match the configuration")
    for name, tensor in expected.params.items():
        if state.params[name].shape != tensor.shape:
            raise ValueError(f"parameter {name} has shape {state.params[name].shape}, expected {tensor.shape}")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _conv_bn_relu(x: Tensor, state: ModelState, prefix: str, *, training: bool, stride: int = 1, dilation: int = 1) -> Tensor:
    y = ops.conv2d(x, state.params[f"{prefix}.conv.w"], stride=stride, padding=dilation, dilation=dilation)
    y = ops.batchnorm(
        y,
        state.params[f"{prefix}.bn.gamma"],
        state.params[f"{prefix}.bn.beta"],
        state.buffers[f"{prefix}.bn.mean"],
        state.buffers[f"{prefix}.bn.var"],
        training=training,
    )
    return ops.relu(y)


def _head(x: Tensor, state: ModelState, prefix: str) -> Tensor:
    return ops.conv2d(x, state.params[f"{prefix}.w"], state.params[f"{prefix}.b"], padding=1)


def images_to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """H x W x 3 images in [0, 1] to a centred N x 3 x H x W batch."""
    batch = np.stack([np.asarray(image, dtype=np.float32) for image in images], axis=0)
    return Tensor(np.transpose(batch, (0, 3, 1, 2)) - 0.5)


def build_feature_pyramid(img: Tensor, state: ModelState, cfg: PyramidConfig, *, training: bool = False) -> List[Tensor]:
    """L2-normalised features per level, coarsest first."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError("images must be N x 3 x H x W")
    if img.shape[2] != cfg.base_resolution or img.shape[3] != cfg.base_resolution:
        raise ValueError(f"image resolution {img.shape[2]}x{img.shape[3]} does not match {cfg.base_resolution}")
    features: List[Tensor] = []
    x = img
    for block in range(cfg.levels):
        x = _conv_bn_relu(x, state, f"enc.{block}", training=training, stride=1 if block == 0 else 2)
        features.append(ops.l2_normalize_channels(x))
    return features[::-1]


def _identity_tensor(size: int) -> Tensor:
    grid = identity_grid(size, size).astype(np.float32)
    return Tensor(np.transpose(grid, (2, 0, 1))[None])


def map_to_grid(m: Tensor) -> Tensor:
    return ops.transpose(m, (0, 2, 3, 1))


def _correlate(query: Tensor, reference: Tensor, cfg: PyramidConfig) -> Tensor:
    # spatial layout follows the query (target frame); channels enumerate reference positions
    if cfg.correlation == "global":
        return ops.global_correlation(query, reference, normalize=cfg.l2norm_correlation)
    volume = ops.local_correlation(query, reference, cfg.local_radius)
    return ops.l2_normalize_channels(volume) if cfg.l2norm_correlation else volume


def forward(
    src: Tensor,
    tgt: Tensor,
    state: ModelState,
    cfg: PyramidConfig,
    *,
    training: bool = False,
    freeze_encoder: bool = False,
) -> NetworkOutput:
    """Coarse-to-fine maps, coarsest first. A frozen encoder normalises with its running statistics."""
    if src.shape != tgt.shape:
        raise ValueError("source and target batches must share a shape")
    encoder_training = training and not freeze_encoder
    f_s = build_feature_pyramid(src, state, cfg, training=encoder_training)
    f_t = build_feature_pyramid(tgt, state, cfg, training=encoder_training)
    maps: List[Tensor] = []
    hidden: Optional[Tensor] = None
    for level in range(cfg.levels):
        if level == 0:
            x = _correlate(f_t[0], f_s[0], cfg)
        else:
            upsampled = ops.upsample_bilinear_2x(maps[-1])
            warped = ops.grid_sample(f_s[level], map_to_grid(upsampled))
            if cfg.correlation == "local":
                x = ops.concat_channels([upsampled, _correlate(f_t[level], warped, cfg)])
            else:
                x = ops.concat_channels([upsampled, warped, f_t[level]])
        widths = cfg.decoder_channels[level]
        for block in range(len(widths)):
            x = _conv_bn_relu(x, state, f"dec.{level}.{block}", training=training, dilation=cfg.dilations_per_level[level][block])
        hidden = x
        estimate = _head(x, state, f"dec.{level}.out")
        if cfg.parametrization == "flow":
            estimate = ops.add(estimate, _identity_tensor(cfg.resolution(level)))
        maps.append(estimate)

    logits = None
    if cfg.use_matchability and hidden is not None:
        y = hidden
        for block in range(len(cfg.matchability_channels) - 1):
            y = _conv_bn_relu(y, state, f"match.{block}", training=training)
        logits = _head(y, state, "match.out")
    return NetworkOutput(maps=maps, matchability_logits=logits, features=hidden)


def _to_numpy_map(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(m, (1, 2, 0))).astype(np.float32)


def predict_batch(
    state: ModelState,
    cfg: PyramidConfig,
    sources: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
) -> List[Tuple[CorrespondenceMap, Optional[np.ndarray]]]:
    with no_grad():
        out = forward(images_to_tensor(sources), images_to_tensor(targets), state, cfg, training=False)
        probabilities = None
        if out.matchability_logits is not None:
            probabilities = ops.sigmoid(out.matchability_logits).data[:, 0].astype(np.float64)
    results = []
    for index in range(len(sources)):
        conf = None if probabilities is None else probabilities[index]
        results.append((CorrespondenceMap(_to_numpy_map(out.finest.data[index])), conf))
    return results


def predict(state: ModelState, cfg: PyramidConfig, src: np.ndarray, tgt: np.ndarray) -> Tuple[CorrespondenceMap, Optional[np.ndarray]]:
    """Eval-mode finest map and matchability probabilities for one image pair."""
    return predict_batch(state, cfg, [src], [tgt])[0]
