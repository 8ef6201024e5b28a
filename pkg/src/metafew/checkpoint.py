"""Binary checkpoint format for the full meta-model.

Layout (all little-endian): magic "MFCKPT1\\n", u32 format version, u32-length
JSON config echo, then three tensor sections (encoder entries, generator
entries) encoded as (name, group, flag byte, shape, raw float64 data), the
per-group learning rates with the outer rate, and an optimizer-state section
(count 0 for plain SGD; reserved for extensions). Round-trips are exact to
the bit, which the determinism tests rely on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ParamEntry, ParamTree
from .meta import GeneratorConfig, LearningRates, MetaModel

MAGIC = b"MFCKPT1\n"
VERSION = 1


class CheckpointError(Exception):
    pass


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def _write_entries(f, entries: list[ParamEntry]) -> None:
    f.write(struct.pack("<I", len(entries)))
    for e in entries:
        _write_str(f, e.name)
        _write_str(f, e.group)
        flags = (1 if e.is_warp else 0) | (2 if e.inner_adaptable else 0)
        f.write(struct.pack("<B", flags))
        f.write(struct.pack("<B", e.value.ndim))
        for d in e.value.shape:
            f.write(struct.pack("<I", d))
        f.write(np.ascontiguousarray(e.value, dtype="<f8").tobytes())


def _read_entries(f) -> list[ParamEntry]:
    (count,) = struct.unpack("<I", f.read(4))
    entries = []
    for _ in range(count):
        name = _read_str(f)
        group = _read_str(f)
        (flags,) = struct.unpack("<B", f.read(1))
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        entries.append(ParamEntry(name, data.copy(), group, bool(flags & 1), bool(flags & 2)))
    return entries


def save_checkpoint(path, model: MetaModel, extra: dict | None = None) -> None:
    config = {
        "encoder": model.enc_cfg.to_dict(),
        "generator": model.gen_cfg.to_dict(),
    }
    if extra:
        config["extra"] = extra
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        raw = json.dumps(config, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        _write_entries(f, model.enc.entries)
        _write_entries(f, model.gen.entries)
        f.write(struct.pack("<I", len(model.lrs.alphas)))
        for group in sorted(model.lrs.alphas):
            _write_str(f, group)
            f.write(struct.pack("<d", model.lrs.alphas[group]))
        f.write(struct.pack("<d", model.lrs.outer_lr))
        f.write(struct.pack("<I", 0))  # optimizer state entries


def load_checkpoint(path) -> tuple[MetaModel, dict]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(n).decode("utf-8"))
        enc_entries = _read_entries(f)
        gen_entries = _read_entries(f)
        (n_alpha,) = struct.unpack("<I", f.read(4))
        alphas = {}
        for _ in range(n_alpha):
            group = _read_str(f)
            (alphas[group],) = struct.unpack("<d", f.read(8))
        (outer_lr,) = struct.unpack("<d", f.read(8))
        (n_opt,) = struct.unpack("<I", f.read(4))
        if n_opt:
            raise CheckpointError(f"{path}: unexpected optimizer state")
    model = MetaModel(
        EncoderConfig(**config["encoder"]),
        GeneratorConfig(**config["generator"]),
        ParamTree(enc_entries),
        ParamTree(gen_entries),
        LearningRates(alphas, outer_lr),
    )
    return model, config.get("extra", {})
