from __future__ import annotations

from typing import List, Tuple

import numpy as np

from . import ops
from .model import NetworkOutput, PyramidConfig
from .tensor import Tensor, no_grad


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Logical AND over each 2x2 block of an (N, H, W) mask."""
    n, h, w = mask.shape
    if h % 2 or w % 2:
        raise ValueError("mask resolution must be even to downsample")
    blocks = mask.reshape(n, h // 2, 2, w // 2, 2)
    return blocks.all(axis=(2, 4))


def resample_map(gt_map: np.ndarray, size: int) -> np.ndarray:
    """Coordinate-preserving resample of (N, H, W, 2) maps to (N, 2, size, size) at align-corners locations."""
    _, h, w, _ = gt_map.shape
    rows = ops.interpolation_matrix(h, size)
    cols = ops.interpolation_matrix(w, size)
    channels = np.transpose(gt_map.astype(np.float64), (0, 3, 1, 2))
    return np.matmul(np.matmul(rows, channels), cols.T)


def level_targets(gt_map: np.ndarray, gt_mask: np.ndarray, cfg: PyramidConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per-level (map, mask) supervision, coarsest first."""
    n, h, w, _ = gt_map.shape
    if h != cfg.base_resolution or w != cfg.base_resolution or gt_mask.shape != (n, h, w):
        raise ValueError("ground truth resolution does not match the network")
    masks = [np.asarray(gt_mask, dtype=bool)]
    for _ in range(cfg.levels - 1):
        masks.append(downsample_mask(masks[-1]))
    masks.reverse()
    targets = []
    for level in range(cfg.levels):
        size = cfg.resolution(level)
        target = np.transpose(gt_map.astype(np.float64), (0, 3, 1, 2)) if size == h else resample_map(gt_map, size)
        targets.append((target, masks[level]))
    return targets


def correspondence_loss(out: NetworkOutput, gt_map: np.ndarray, gt_mask: np.ndarray, cfg: PyramidConfig) -> Tensor:
    if len(out.maps) != cfg.levels:
        raise ValueError("network output has the wrong number of levels")
    total: Tensor = Tensor(0.0)
    for level, (target, mask) in enumerate(level_targets(gt_map, gt_mask, cfg)):
        estimate = out.maps[level]
        if estimate.shape != target.shape:
            raise ValueError(f"level {level} map shape {estimate.shape} does not match {target.shape}")
        n_valid = int(np.count_nonzero(mask))
        if n_valid == 0 or cfg.alpha[level] == 0:
            continue
        error = ops.abs_(ops.sub(estimate, target))
        masked = ops.mul(error, mask[:, None, :, :].astype(np.float64))
        total = ops.add(total, ops.scale(ops.sum_(masked), cfg.alpha[level] / n_valid))
    return total


def matchability_loss(logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    targets = np.asarray(gt_mask, dtype=np.float64)[:, None, :, :]
    if logits.shape != targets.shape:
        raise ValueError("matchability logits must be N x 1 x H x W at mask resolution")
    return ops.bce_with_logits_mean(logits, targets)


def total_loss(out: NetworkOutput, gt_map: np.ndarray, gt_mask: np.ndarray, cfg: PyramidConfig, beta: float = 1.0) -> Tensor:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    loss_c = correspondence_loss(out, gt_map, gt_mask, cfg)
    if beta == 0:
        return loss_c
    if out.matchability_logits is None:
        raise ValueError("matchability head is disabled but beta > 0")
    return ops.add(loss_c, ops.scale(matchability_loss(out.matchability_logits, gt_mask), beta))


def loss_breakdown(
    out: NetworkOutput, gt_map: np.ndarray, gt_mask: np.ndarray, cfg: PyramidConfig, beta: float = 1.0
) -> Tuple[float, float, float]:
    """(L_c, L_m, L_total) as floats; L_m is 0 without a matchability head."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    with no_grad():
        loss_c = correspondence_loss(out, gt_map, gt_mask, cfg).item()
        loss_m = 0.0
        if out.matchability_logits is not None:
            loss_m = matchability_loss(out.matchability_logits, gt_mask).item()
    return loss_c, loss_m, loss_c + beta * loss_m
