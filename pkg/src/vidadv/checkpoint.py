"""Binary checkpoint container.

Layout (all little-endian)::

    b"AVCK"  u32 version
    u32 len, utf-8 JSON architecture descriptor (includes K for classifiers)
    u32 n_params, then per parameter: u16 name_len, name, u8 ndim, u32 dims...
    float32 buffers in declaration order
    u8 has_optimizer
      [u32 len, JSON optimizer header; float32 moment buffers, buffer-major]

Several models can be stored back to back in one file (see :func:`save_models`).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .models import Model, build_model
from .optim import OptimizerState

MAGIC = b"AVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_model(buf: io.BufferedIOBase, model: Model, opt: OptimizerState | None) -> None:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(desc)) + desc)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
    for _, p in params:
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    if opt is None:
        buf.write(b"\x00")
        return
    header = {"variant": opt.variant, "lr": opt.lr, "momentum": opt.momentum, "betas": list(opt.betas),
              "eps": opt.eps, "weight_decay": opt.weight_decay, "step_count": opt.step_count,
              "n_buffers": len(opt.buffers)}
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(b"\x01" + struct.pack("<I", len(hb)) + hb)
    for group in opt.buffers:
        for arr in group:
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_model(buf: io.BufferedIOBase) -> tuple[Model, OptimizerState | None]:
    magic = _read_exact(buf, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read_exact(buf, 4, "descriptor length"))
    desc = json.loads(_read_exact(buf, n, "descriptor"))
    model = build_model(desc)
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "parameter count"))
    shapes = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(buf, 2, "name length"))
        name = _read_exact(buf, ln, "name").decode()
        (nd,) = struct.unpack("<B", _read_exact(buf, 1, "ndim"))
        shape = struct.unpack(f"<{nd}I", _read_exact(buf, 4 * nd, "shape"))
        shapes.append((name, shape))
    state = {}
    for name, shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        raw = _read_exact(buf, 4 * size, f"parameter {name}")
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    model.load_state_dict(state)
    flag = _read_exact(buf, 1, "optimizer flag")
    if flag == b"\x00":
        return model, None
    (hn,) = struct.unpack("<I", _read_exact(buf, 4, "optimizer header length"))
    h = json.loads(_read_exact(buf, hn, "optimizer header"))
    opt = OptimizerState(h["variant"], lr=h["lr"], momentum=h["momentum"], betas=tuple(h["betas"]),
                         eps=h["eps"], weight_decay=h["weight_decay"], step_count=h["step_count"])
    groups = []
    for _ in range(h["n_buffers"]):
        group = []
        for name, shape in shapes:
            size = int(np.prod(shape, dtype=np.int64))
            raw = _read_exact(buf, 4 * size, f"optimizer buffer {name}")
            group.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
        groups.append(group)
    opt.buffers = groups
    return model, opt


def save_models(path: str | Path, models: dict[str, Model], optimizers: dict[str, OptimizerState] | None = None) -> None:
    """Write several named models (e.g. ``{"F": f, "G": g}``) into one file."""
    optimizers = optimizers or {}
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(models)))
    for key, model in models.items():
        kb = key.encode()
        buf.write(struct.pack("<H", len(kb)) + kb)
        _write_model(buf, model, optimizers.get(key))
    Path(path).write_bytes(buf.getvalue())


def load_models(path: str | Path) -> tuple[dict[str, Model], dict[str, OptimizerState]]:
    buf = io.BytesIO(Path(path).read_bytes())
    (n,) = struct.unpack("<I", _read_exact(buf, 4, "model count"))
    models, opts = {}, {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(buf, 2, "model key length"))
        key = _read_exact(buf, ln, "model key").decode()
        model, opt = _read_model(buf)
        models[key] = model
        if opt is not None:
            opts[key] = opt
    return models, opts


def save_checkpoint(path: str | Path, model: Model, optimizer: OptimizerState | None = None) -> None:
    save_models(path, {"F": model}, {"F": optimizer} if optimizer else None)


def load_checkpoint(path: str | Path) -> tuple[Model, OptimizerState | None]:
    models, opts = load_models(path)
    key = "F" if "F" in models else next(iter(models))
    return models[key], opts.get(key)
