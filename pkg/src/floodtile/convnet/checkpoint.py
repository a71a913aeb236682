"""Binary checkpoint container for model parameters and optimizer state.

Layout (all integers little-endian)::

    b"FTCK"  u16 version
    u16 depth  u16 width  u16 in_channels  u16 out_channels
    u32 entry_count
    entry_count x:
        u16 name_len  name(utf-8)  u8 kind  u8 ndim  ndim x u32 dim  float32 payload
    u8 has_optimizer
    [f64 lr  f64 beta1  f64 beta2  f64 eps  u64 step]

``kind`` is 0 for trainable parameters, 1 for batch-norm running
statistics, 2 for Adam first moments and 3 for Adam second moments.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .unet import UNet, UNetConfig

MAGIC = b"FTCK"
VERSION = 1

KIND_PARAM, KIND_RUNNING, KIND_MOMENT1, KIND_MOMENT2 = 0, 1, 2, 3


class CheckpointError(ValueError):
    pass


def _entry(name: str, kind: int, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(model: UNet, optimizer=None) -> bytes:
    cfg = model.config
    entries = [_entry(k, KIND_PARAM, v) for k, v in model.params.items()]
    entries += [_entry(k, KIND_RUNNING, v) for k, v in model.buffers.items()]
    if optimizer is not None:
        entries += [_entry(k, KIND_MOMENT1, v) for k, v in optimizer.m.items()]
        entries += [_entry(k, KIND_MOMENT2, v) for k, v in optimizer.v.items()]
    out = MAGIC + struct.pack("<H", VERSION)
    out += struct.pack("<4H", cfg.depth, cfg.width, cfg.in_channels, cfg.out_channels)
    out += struct.pack("<I", len(entries)) + b"".join(entries)
    if optimizer is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack("<ddddQ", optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.step_count)
    return out


def save_checkpoint(path, model: UNet, optimizer=None) -> None:
    Path(path).write_bytes(dumps(model, optimizer))


def loads(blob: bytes):
    """Decode a checkpoint into ``(model, optimizer_state_or_None)``.

    The optimizer state is a dict with ``lr``, ``beta1``, ``beta2``, ``eps``,
    ``step_count``, ``m`` and ``v`` ready for ``Adam.load_state``.
    """
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    pos = 4
    (version,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    depth, width, cin, cout = struct.unpack_from("<4H", blob, pos)
    pos += 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    groups = {k: OrderedDict() for k in (KIND_PARAM, KIND_RUNNING, KIND_MOMENT1, KIND_MOMENT2)}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        kind, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        if kind not in groups:
            raise CheckpointError(f"unknown entry kind {kind} for {name}")
        groups[kind][name] = arr
    model = UNet(UNetConfig(depth, width, cin, cout))
    missing = set(model.params) - set(groups[KIND_PARAM])
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for k in model.params:
        model.params[k] = groups[KIND_PARAM][k].copy()
    for k in model.buffers:
        model.buffers[k] = groups[KIND_RUNNING][k].copy()
    (has_opt,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    opt = None
    if has_opt:
        lr, b1, b2, eps, step = struct.unpack_from("<ddddQ", blob, pos)
        opt = {
            "lr": lr, "beta1": b1, "beta2": b2, "eps": eps, "step_count": step,
            "m": groups[KIND_MOMENT1], "v": groups[KIND_MOMENT2],
        }
    return model, opt


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
