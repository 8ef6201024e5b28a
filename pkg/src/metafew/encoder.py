"""Compact pre-layernorm transformer encoder producing a CLS sentence vector.

The per-layer feed-forward projections (both matrices and both biases) are
flagged as warp parameters: they are excluded from per-task adaptation and
only move in the outer meta-update. Everything else (embeddings, attention
projections, layernorms) is inner-adaptable and grouped per (layer, sublayer
kind) so each group can carry its own learned step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Node, Tape
from .corpus import CLS_ID, PAD_ID

WARP_GROUP_SUFFIX = ".ff"


INIT_STD = 0.02


@dataclass
class EncoderConfig:
    vocab_size: int
    model_dim: int = 64
    ff_dim: int = 256
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 32
    dropout: float = 0.1
    # sinusoidal positions are scaled to the embedding init scale; unit-scale
    # positions drown the token content 50:1 when training from scratch
    # (learned positions in the reference setup start at the same 0.02 std)
    pos_scale: float = INIT_STD

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.ff_dim < self.model_dim:
            raise ValueError(f"ff_dim {self.ff_dim} < model_dim {self.model_dim}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "model_dim": self.model_dim,
            "ff_dim": self.ff_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "dropout": self.dropout,
            "pos_scale": self.pos_scale,
        }


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    group: str
    is_warp: bool
    inner_adaptable: bool


class ParamTree:
    """Ordered, named parameter tensors partitioned into warp / non-warp groups."""

    def __init__(self, entries: Sequence[ParamEntry]):
        self.entries = list(entries)
        self._by_name = {e.name: e for e in self.entries}
        if len(self._by_name) != len(self.entries):
            raise ValueError("duplicate parameter names in tree")
        for e in self.entries:
            if e.is_warp and e.inner_adaptable:
                raise ValueError(f"{e.name}: warp parameters cannot be inner-adaptable")

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name) -> ParamEntry:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def values(self) -> dict[str, np.ndarray]:
        return {e.name: e.value for e in self.entries}

    def groups(self) -> list[str]:
        out = []
        for e in self.entries:
            if e.group not in out:
                out.append(e.group)
        return out

    def adaptable_groups(self) -> list[str]:
        out = []
        for e in self.entries:
            if e.inner_adaptable and e.group not in out:
                out.append(e.group)
        return out

    def warp_names(self) -> list[str]:
        return [e.name for e in self.entries if e.is_warp]

    def adaptable_names(self) -> list[str]:
        return [e.name for e in self.entries if e.inner_adaptable]

    def group_of(self, name: str) -> str:
        return self._by_name[name].group

    def copy(self) -> "ParamTree":
        return ParamTree(
            [
                ParamEntry(e.name, e.value.copy(), e.group, e.is_warp, e.inner_adaptable)
                for e in self.entries
            ]
        )

    def census(self) -> dict[str, int]:
        """Parameter counts: total, warp, and per group."""
        out = {"total": 0, "warp": 0}
        for e in self.entries:
            n = int(e.value.size)
            out["total"] += n
            if e.is_warp:
                out["warp"] += n
            out[e.group] = out.get(e.group, 0) + n
        return out


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std^2) resampled until inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(cfg: EncoderConfig, seed: int) -> ParamTree:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    d, f = cfg.model_dim, cfg.ff_dim
    entries = [
        ParamEntry(
            "embedding.tok", truncated_normal(rng, (cfg.vocab_size, d)), "embedding", False, True
        )
    ]
    for i in range(cfg.n_layers):
        attn = f"layer{i}.attn"
        entries.extend(
            [
                ParamEntry(f"{attn}.ln.gain", np.ones(d), attn, False, True),
                ParamEntry(f"{attn}.ln.bias", np.zeros(d), attn, False, True),
                ParamEntry(f"{attn}.wq", truncated_normal(rng, (d, d)), attn, False, True),
                ParamEntry(f"{attn}.bq", np.zeros(d), attn, False, True),
                ParamEntry(f"{attn}.wk", truncated_normal(rng, (d, d)), attn, False, True),
                ParamEntry(f"{attn}.bk", np.zeros(d), attn, False, True),
                ParamEntry(f"{attn}.wv", truncated_normal(rng, (d, d)), attn, False, True),
                ParamEntry(f"{attn}.bv", np.zeros(d), attn, False, True),
                ParamEntry(f"{attn}.wo", truncated_normal(rng, (d, d)), attn, False, True),
                ParamEntry(f"{attn}.bo", np.zeros(d), attn, False, True),
            ]
        )
        ffln = f"layer{i}.ff_ln"
        ff = f"layer{i}{WARP_GROUP_SUFFIX}"
        entries.extend(
            [
                ParamEntry(f"{ffln}.gain", np.ones(d), ffln, False, True),
                ParamEntry(f"{ffln}.bias", np.zeros(d), ffln, False, True),
                ParamEntry(f"{ff}.w1", truncated_normal(rng, (d, f)), ff, True, False),
                ParamEntry(f"{ff}.b1", np.zeros(f), ff, True, False),
                ParamEntry(f"{ff}.w2", truncated_normal(rng, (f, d)), ff, True, False),
                ParamEntry(f"{ff}.b2", np.zeros(d), ff, True, False),
            ]
        )
    entries.append(ParamEntry("final_ln.gain", np.ones(d), "final_ln", False, True))
    entries.append(ParamEntry("final_ln.bias", np.zeros(d), "final_ln", False, True))
    return ParamTree(entries)


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    if key not in _POS_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange((dim + 1) // 2)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / dim)
        enc = np.zeros((length, dim))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles[:, : dim // 2])
        _POS_CACHE[key] = enc
    return _POS_CACHE[key]


def pack_batch(
    token_seqs: Sequence[np.ndarray], cfg: EncoderConfig
) -> tuple[np.ndarray, np.ndarray]:
    """CLS-prefixed, PAD-padded id matrix plus the padding mask.

    Sequences longer than max_seq_len - 1 tokens are truncated so the CLS
    prefix always fits. Token ids outside the vocabulary raise ValueError.
    """
    limit = cfg.max_seq_len - 1
    seqs = [np.asarray(s, dtype=np.int64)[:limit] for s in token_seqs]
    for s in seqs:
        if s.size and (s.min() < 0 or s.max() >= cfg.vocab_size):
            raise ValueError(
                f"token id {int(s.max())} out of range for vocab_size {cfg.vocab_size}"
            )
    width = 1 + max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    pad_mask = np.ones((len(seqs), width), dtype=bool)
    ids[:, 0] = CLS_ID
    pad_mask[:, 0] = False
    for r, s in enumerate(seqs):
        ids[r, 1 : 1 + len(s)] = s
        pad_mask[r, 1 : 1 + len(s)] = False
    return ids, pad_mask


def encode_batch(
    tape: Tape,
    params: Mapping[str, Node],
    token_seqs: Sequence[np.ndarray],
    cfg: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    collect_layers: Sequence[int] | None = None,
):
    """Record the encoder forward over a batch; returns the (B, D) CLS node.

    With collect_layers, also returns {layer: (B, D) node} where layer 0 is
    the embedding+position output at the CLS slot and layer i is the output
    of block i. Dropout fires only in train_mode (rng required then).
    """
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("train_mode with dropout requires an rng")
    ids, pad_mask = pack_batch(token_seqs, cfg)
    B, L = ids.shape
    d = cfg.model_dim
    n_heads = cfg.n_heads
    dh = d // n_heads
    p = cfg.dropout if train_mode else 0.0

    x = tape.embedding_lookup(params["embedding.tok"], ids)
    x = tape.add(x, tape.const(cfg.pos_scale * sinusoidal_positions(L, d)))
    if p > 0.0:
        x = tape.dropout(x, p, rng)

    key_mask = pad_mask[:, None, None, :]  # (B, 1, 1, L) broadcast over heads/queries
    collected: dict[int, Node] = {}

    def grab(layer_idx, node):
        if collect_layers is not None and layer_idx in collect_layers:
            collected[layer_idx] = tape.slice(node, (slice(None), 0, slice(None)))

    grab(0, x)
    for i in range(cfg.n_layers):
        attn = f"layer{i}.attn"
        h = tape.layer_norm(x, params[f"{attn}.ln.gain"], params[f"{attn}.ln.bias"])
        q = tape.affine(h, params[f"{attn}.wq"], params[f"{attn}.bq"])
        k = tape.affine(h, params[f"{attn}.wk"], params[f"{attn}.bk"])
        v = tape.affine(h, params[f"{attn}.wv"], params[f"{attn}.bv"])
        qh = tape.transpose(tape.reshape(q, (B, L, n_heads, dh)), (0, 2, 1, 3))
        kh = tape.transpose(tape.reshape(k, (B, L, n_heads, dh)), (0, 2, 3, 1))
        vh = tape.transpose(tape.reshape(v, (B, L, n_heads, dh)), (0, 2, 1, 3))
        scores = tape.scale(tape.matmul(qh, kh), 1.0 / math.sqrt(dh))
        scores = tape.masked_fill(scores, key_mask, -1e9)
        probs = tape.softmax(scores)
        if p > 0.0:
            probs = tape.dropout(probs, p, rng)
        ctx = tape.reshape(tape.transpose(tape.matmul(probs, vh), (0, 2, 1, 3)), (B, L, d))
        out = tape.affine(ctx, params[f"{attn}.wo"], params[f"{attn}.bo"])
        if p > 0.0:
            out = tape.dropout(out, p, rng)
        x = tape.add(x, out)

        ffln = f"layer{i}.ff_ln"
        ff = f"layer{i}{WARP_GROUP_SUFFIX}"
        h2 = tape.layer_norm(x, params[f"{ffln}.gain"], params[f"{ffln}.bias"])
        inner = tape.gelu(tape.affine(h2, params[f"{ff}.w1"], params[f"{ff}.b1"]))
        ffo = tape.affine(inner, params[f"{ff}.w2"], params[f"{ff}.b2"])
        if p > 0.0:
            ffo = tape.dropout(ffo, p, rng)
        x = tape.add(x, ffo)
        grab(i + 1, x)

    x = tape.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    cls = tape.slice(x, (slice(None), 0, slice(None)))
    if collect_layers is not None:
        return cls, collected
    return cls


def encode(
    tree: ParamTree,
    tokens: np.ndarray,
    cfg: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Forward-only CLS vector for a single token sequence."""
    tape = Tape()
    nodes = {e.name: tape.const(e.value) for e in tree.entries}
    cls = encode_batch(tape, nodes, [np.asarray(tokens)], cfg, train_mode=train_mode, rng=rng)
    return cls.value[0]
