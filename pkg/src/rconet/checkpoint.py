"""Binary checkpoints of a model and its optimizer.

Layout (little-endian)::

    b"RCON" | u16 version
    config: u16 k | u16 s | u16 C | u16 stages | stages x u16 width
            | u32 length | utf-8 JSON of the full training config
    state:  u32 epoch | u64 adam step | u64 skipped steps
    u32 record count, then per record:
            u16 name length | name | u8 rank | rank x u32 extent | f8 values

Records cover parameters (``param.``), Adam moments (``adam.m.``,
``adam.v.``), batch-norm running statistics (``bn.``) and dropout masks
(``mask.``). Loading parses the whole file before touching any model, so a
bad file never leaves partial state behind.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .model import RCoNet, TrainConfig
from .optim import Adam
from .train import make_optimizer

MAGIC = b"RCON"
VERSION = 1

_U8, _U16, _U32, _U64 = (struct.Struct(f) for f in ("<B", "<H", "<I", "<Q"))
_STATE = struct.Struct("<IQQ")


def _records(model: RCoNet, opt: Adam | None):
    out = [(f"param.{n}", t.data) for n, t in model.params().items()]
    if opt is not None:
        for n in model.params():
            if n in opt.state.m:
                out.append((f"adam.m.{n}", opt.state.m[n]))
                out.append((f"adam.v.{n}", opt.state.v[n]))
    for n, bn in model.batch_norms().items():
        out.append((f"bn.{n}.mean", bn.running.mean))
        out.append((f"bn.{n}.var", bn.running.var))
    for j, (tm, fm) in enumerate(zip(model.head.train_masks, model.head.frozen_masks)):
        out.append((f"mask.train.{j}", tm.keep))
        out.append((f"mask.frozen.{j}", fm.keep))
    return out


def to_bytes(model: RCoNet, opt: Adam | None = None) -> bytes:
    cfg = model.cfg
    parts = [MAGIC, _U16.pack(VERSION)]
    parts.append(struct.pack(f"<HHHH{len(cfg.widths)}H", cfg.k, cfg.s, cfg.n_classes,
                             len(cfg.widths), *cfg.widths))
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    parts += [_U32.pack(len(blob)), blob]
    t, skipped = (opt.state.t, opt.state.skipped) if opt is not None else (0, 0)
    parts.append(_STATE.pack(model.epoch, t, skipped))
    recs = _records(model, opt)
    parts.append(_U32.pack(len(recs)))
    for name, arr in recs:
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts += [_U16.pack(len(raw)), raw, _U8.pack(arr.ndim)]
        parts += [_U32.pack(e) for e in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))


def parse(buf: bytes):
    """(config, (epoch, adam step, skipped), {record name: array})."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not an RCON checkpoint", 0)
    (version,) = r.unpack(_U16, "version")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version}, expected {VERSION}", 4)
    k, s, c, stages = r.unpack(struct.Struct("<HHHH"), "config block")
    widths = r.unpack(struct.Struct(f"<{stages}H"), "channel widths")
    (n,) = r.unpack(_U32, "config length")
    at = r.pos
    try:
        cfg = TrainConfig.from_dict(json.loads(r.take(n, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config: {exc}", at) from None
    if (cfg.k, cfg.s, cfg.n_classes, cfg.widths) != (k, s, c, tuple(widths)):
        raise FormatError("config block disagrees with the stored config", at)
    state = r.unpack(_STATE, "optimizer state")
    (count,) = r.unpack(_U32, "record count")
    records = {}
    for _ in range(count):
        (ln,) = r.unpack(_U16, "name length")
        at = r.pos
        try:
            name = r.take(ln, "record name").decode()
        except UnicodeDecodeError:
            raise FormatError("record name is not utf-8", at) from None
        (rank,) = r.unpack(_U8, "rank")
        shape = r.unpack(struct.Struct(f"<{rank}I"), f"extents of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        data = r.take(8 * size, f"values of {name}")
        records[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the last record", r.pos)
    return cfg, state, records


def _check_compatible(stored: TrainConfig, expect: TrainConfig):
    for name in ("k", "s", "n_classes", "widths", "deformable", "convs_per_stage", "hidden",
                 "image_size"):
        a, b = getattr(stored, name), getattr(expect, name)
        if a != b:
            raise ContractError(f"checkpoint has {name}={a}, config expects {name}={b}")


def from_bytes(buf: bytes, expect: TrainConfig | None = None):
    """Rebuild (model, optimizer) from checkpoint bytes."""
    cfg, (epoch, t, skipped), records = parse(buf)
    if expect is not None:
        _check_compatible(cfg, expect)
    model = RCoNet(cfg)
    opt = make_optimizer(model, cfg)

    def fetch(name, like):
        if name not in records:
            raise FormatError(f"checkpoint lacks record {name}", len(buf))
        arr = records[name]
        if arr.shape != np.shape(like):
            raise ContractError(f"record {name} has shape {arr.shape}, model expects {np.shape(like)}")
        return arr

    params = model.params()
    loaded = {n: fetch(f"param.{n}", p.data) for n, p in params.items()}
    for n, p in params.items():
        p.data = loaded[n]
        if f"adam.m.{n}" in records:
            opt.state.m[n] = fetch(f"adam.m.{n}", p.data).copy()
            opt.state.v[n] = fetch(f"adam.v.{n}", p.data).copy()
    for n, bn in model.batch_norms().items():
        bn.running.mean = fetch(f"bn.{n}.mean", bn.running.mean)
        bn.running.var = fetch(f"bn.{n}.var", bn.running.var)
    for j, (tm, fm) in enumerate(zip(model.head.train_masks, model.head.frozen_masks)):
        tm.keep = fetch(f"mask.train.{j}", tm.keep)
        fm.keep = fetch(f"mask.frozen.{j}", fm.keep)
    opt.state.t, opt.state.skipped = t, skipped
    model.epoch = epoch
    return model, opt


def checkpoint_save(path, model: RCoNet, opt: Adam | None = None):
    Path(path).write_bytes(to_bytes(model, opt))


def checkpoint_load(path, expect: TrainConfig | None = None):
    return from_bytes(Path(path).read_bytes(), expect)
