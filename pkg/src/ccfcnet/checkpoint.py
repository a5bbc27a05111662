"""Checkpoint directories.

Layout::

    config.json      key/value metadata (model config, seed, class names, ...)
    tensors.index    one line per tensor: ``name dtype shape``
    <name>.bin       flat little-endian tensor data
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ParseError
from .model import CCFCNet, ModelConfig

_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.float64: ("float64", "<f8"),
}
_BY_NAME = {name: (torch_dtype, np_code) for torch_dtype, (name, np_code) in _DTYPES.items()}


def save_checkpoint(model: CCFCNet, directory, **meta) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {"model": model.cfg.to_dict(), **meta}
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", "utf-8")
    lines = []
    for name, tensor in model.state_dict().items():
        dtype_name, code = _DTYPES[tensor.dtype]
        data = tensor.detach().cpu().numpy().astype(code, copy=False)
        (directory / f"{name}.bin").write_bytes(data.tobytes(order="C"))
        shape = ",".join(str(s) for s in tensor.shape) or "-"
        lines.append(f"{name} {dtype_name} {shape}")
    (directory / "tensors.index").write_text("\n".join(lines) + "\n", "utf-8")
    return directory


def read_meta(directory) -> dict:
    path = Path(directory) / "config.json"
    if not path.exists():
        raise DataError(f"not a checkpoint directory: {directory}")
    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None


def load_checkpoint(directory) -> tuple[CCFCNet, dict]:
    """Returns ``(model in eval mode, metadata)``; tensor bytes are restored exactly."""
    directory = Path(directory)
    meta = read_meta(directory)
    cfg = ModelConfig.from_dict(meta["model"])
    model = CCFCNet(cfg)
    index = directory / "tensors.index"
    state = {}
    for lineno, line in enumerate(index.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, dtype_name, shape_txt = line.split()
            torch_dtype, code = _BY_NAME[dtype_name]
        except (ValueError, KeyError):
            raise ParseError(f"bad index line {line!r}", index, lineno) from None
        shape = () if shape_txt == "-" else tuple(int(s) for s in shape_txt.split(","))
        raw = np.frombuffer((directory / f"{name}.bin").read_bytes(), dtype=code)
        if raw.size != int(np.prod(shape)):
            raise DataError(f"{name}: {raw.size} values on disk, index says shape {shape}")
        state[name] = torch.from_numpy(raw.reshape(shape).copy()).to(torch_dtype)
    if state and next(iter(state.values())).dtype == torch.float64:
        model.double()
    model.load_state_dict(state)
    model.eval()
    return model, meta
