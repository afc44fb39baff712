from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .model import ModelState, PyramidConfig, check_state, init_model_state
from .run_config import model_config_lines, model_from_lines
from .synth_data import DataError
from .tensor import parameter, read_tensor, write_tensor

logger = logging.getLogger("dgc-desk.checkpoint")

CHECKPOINT_HEADER = "# dgc-desk checkpoint"
MANIFEST_END = b"\n--\n"


@dataclass
class Checkpoint:
    state: ModelState
    cfg: PyramidConfig
    epochs_done: int = 0


def save_checkpoint(path: Path, state: ModelState, cfg: PyramidConfig, *, epochs_done: int = 0) -> None:
    """Text manifest (config, epoch counter, tensor names) followed by TNSR records in manifest order."""
    check_state(state, cfg)
    tensors = state.tensors()
    lines = [CHECKPOINT_HEADER, *model_config_lines(cfg), f"train.epochs_done={int(epochs_done)}"]
    lines.extend(f"tensor={name}" for name, _ in tensors)
    payload = io.BytesIO()
    payload.write("\n".join(lines).encode("utf-8"))
    payload.write(MANIFEST_END)
    for _, array in tensors:
        write_tensor(payload, array)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload.getvalue())
    logger.info("Saved checkpoint %s tensors=%d epochs_done=%d", path, len(tensors), epochs_done)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint: {path}") from exc
    head, sep, body = raw.partition(MANIFEST_END)
    if not sep:
        raise DataError("checkpoint manifest is not terminated")
    text = head.decode("utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise DataError("not a dgc-desk checkpoint")
    model_lines: Dict[str, str] = {}
    names: List[str] = []
    epochs_done = 0
    for line in lines[1:]:
        key, _, value = line.partition("=")
        if key == "tensor":
            names.append(value)
        elif key == "train.epochs_done":
            epochs_done = int(value)
        elif key.startswith("model."):
            model_lines[key[len("model.") :]] = value
        elif line.strip():
            raise DataError(f"unexpected checkpoint line: {line}")
    try:
        cfg = model_from_lines(model_lines)
    except ValueError as exc:
        raise DataError(f"invalid checkpoint config: {exc}") from exc

    state = init_model_state(cfg, 0)
    stream = io.BytesIO(body)
    for name in names:
        try:
            array = read_tensor(stream)
        except ValueError as exc:
            raise DataError(f"corrupt tensor {name}: {exc}") from exc
        if name in state.params:
            if array.shape != state.params[name].shape:
                raise DataError(f"tensor {name} has shape {array.shape}, expected {state.params[name].shape}")
            state.params[name] = parameter(array.copy())
        elif name in state.buffers:
            state.buffers[name] = array.astype(np.float64)
        else:
            raise DataError(f"unknown tensor in checkpoint: {name}")
    missing = set(state.params) | set(state.buffers)
    missing -= set(names)
    if missing:
        raise DataError(f"checkpoint is missing tensors: {', '.join(sorted(missing))}")
    return Checkpoint(state=state, cfg=cfg, epochs_done=epochs_done)
