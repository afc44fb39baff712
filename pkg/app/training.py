from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .losses import correspondence_loss, matchability_loss
from .metrics import aepe, write_csv
from .model import ModelState, PyramidConfig, check_state, forward, images_to_tensor, predict_batch
from .synth_data import TrainingPair
from .tensor import NonFiniteError, Tensor, backward

logger = logging.getLogger("dgc-desk.training")

TRACE_COLUMNS = ("epoch", "step", "L_c", "L_m", "L_total")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    beta: float = 1.0
    freeze_encoder: bool = False


@dataclass
class TraceRow:
    epoch: int
    step: int
    loss_c: float
    loss_m: float
    loss_total: float

    def as_row(self) -> Dict[str, object]:
        return {"epoch": self.epoch, "step": self.step, "L_c": self.loss_c, "L_m": self.loss_m, "L_total": self.loss_total}


@dataclass
class TrainResult:
    state: ModelState
    trace: List[TraceRow]
    epochs_done: int
    val_aepe: List[float]

    def epoch_means(self) -> Dict[int, float]:
        grouped: Dict[int, List[float]] = {}
        for row in self.trace:
            grouped.setdefault(row.epoch, []).append(row.loss_c)
        return {epoch: float(np.mean(values)) for epoch, values in grouped.items()}


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig) -> None:
        if cfg.lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            p.data -= update.astype(p.data.dtype)


def _batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(count)
    return [order[start : start + batch_size] for start in range(0, count, batch_size)]


def validation_aepe(state: ModelState, cfg: PyramidConfig, pairs: Sequence[TrainingPair], batch_size: int = 8) -> float:
    values: List[float] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        predictions = predict_batch(state, cfg, [p.source_image for p in chunk], [p.target_image for p in chunk])
        for pair, (estimate, _) in zip(chunk, predictions):
            if pair.gt_mask.data.any():
                values.append(aepe(estimate, pair.gt_map, pair.gt_mask))
    return float(np.mean(values)) if values else float("nan")


def train(
    dataset: Sequence[TrainingPair],
    state: ModelState,
    cfg: PyramidConfig,
    opt_cfg: TrainConfig,
    *,
    val_pairs: Optional[Sequence[TrainingPair]] = None,
    epoch_offset: int = 0,
    step_offset: int = 0,
) -> TrainResult:
    """Adam over shuffled mini-batches; updates `state` in place and returns the loss trace."""
    if not dataset:
        raise ValueError("training dataset is empty")
    if opt_cfg.epochs < 0 or opt_cfg.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch size >= 1")
    if opt_cfg.beta < 0:
        raise ValueError("beta must be >= 0")
    check_state(state, cfg)
    beta = opt_cfg.beta if cfg.use_matchability else 0.0
    trainable = [t for name, t in state.parameters() if not (opt_cfg.freeze_encoder and name.startswith("enc."))]
    optimizer = Adam(trainable, opt_cfg)
    # running statistics move only with the parameters
    held = {name: buffer.copy() for name, buffer in state.buffers.items()} if opt_cfg.lr == 0 else {}
    trace: List[TraceRow] = []
    val_history: List[float] = []
    step = step_offset
    started = time.perf_counter()
    for epoch in range(epoch_offset, epoch_offset + opt_cfg.epochs):
        for index in _batches(len(dataset), opt_cfg.batch_size, opt_cfg.seed, epoch):
            batch = [dataset[int(i)] for i in index]
            src = images_to_tensor([p.source_image for p in batch])
            tgt = images_to_tensor([p.target_image for p in batch])
            gt_map = np.stack([p.gt_map.data for p in batch], axis=0)
            gt_mask = np.stack([p.gt_mask.data for p in batch], axis=0)
            optimizer.zero_grad()
            try:
                out = forward(src, tgt, state, cfg, training=True, freeze_encoder=opt_cfg.freeze_encoder)
                loss_c = correspondence_loss(out, gt_map, gt_mask, cfg)
                loss = loss_c
                loss_m_value = 0.0
                if beta > 0 and out.matchability_logits is not None:
                    loss_m = matchability_loss(out.matchability_logits, gt_mask)
                    loss_m_value = loss_m.item()
                    loss = ops.add(loss_c, ops.scale(loss_m, beta))
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"loss is not finite at epoch {epoch} step {step}")
                backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch} step {step}: {exc}") from exc
            optimizer.step()
            for name, saved in held.items():
                state.buffers[name][...] = saved
            trace.append(TraceRow(epoch, step, loss_c.item(), loss_m_value, loss.item()))
            step += 1
        epoch_rows = [row.loss_c for row in trace if row.epoch == epoch]
        message = "epoch=%d L_c=%.5f"
        values: List[object] = [epoch, float(np.mean(epoch_rows))]
        if val_pairs:
            val_history.append(validation_aepe(state, cfg, val_pairs))
            message += " val_aepe=%.4f"
            values.append(val_history[-1])
        logger.info(message, *values)
    logger.info("Training finished epochs=%d steps=%d elapsed=%.1fs", opt_cfg.epochs, step - step_offset, time.perf_counter() - started)
    return TrainResult(state=state, trace=trace, epochs_done=epoch_offset + opt_cfg.epochs, val_aepe=val_history)


def write_trace_csv(path: Path, trace: Sequence[TraceRow]) -> None:
    write_csv(path, TRACE_COLUMNS, [row.as_row() for row in trace])
