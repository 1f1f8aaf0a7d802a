"""Attention blocks: sinusoidal 3-D positional encoding, scaled dot-product
multi-head attention, and a post-norm self+cross block applied symmetrically
to a source/target feature pair with shared weights."""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Graph, ParamStore, Value


class ConfigError(Exception):
    pass


def positional_encode(points: np.ndarray, d: int) -> np.ndarray:
    """Per-axis interleaved sin/cos encoding; the three axis blocks are
    concatenated, so ``d`` must be divisible by 6."""
    if d % 6 != 0:
        raise ConfigError(f"encoding width {d} not divisible by 6")
    n = points.shape[0]
    per_axis = d // 3
    i = np.arange(per_axis // 2)
    denom = 10000.0 ** (2.0 * i / per_axis)
    out = np.empty((n, d))
    for a in range(3):
        phase = points[:, a : a + 1] / denom[None, :]
        out[:, a * per_axis : (a + 1) * per_axis : 2] = np.sin(phase)
        out[:, a * per_axis + 1 : (a + 1) * per_axis : 2] = np.cos(phase)
    return out


def init_mha(store: ParamStore, prefix: str, d: int, heads: int, rng) -> None:
    """Projection weights for one attention layer.

    Per-head query/key/value matrices are stored fused: head i owns the
    columns [i*d_k, (i+1)*d_k) of the (d, d) arrays.
    """
    if d % heads != 0:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    store.add_linear(f"{prefix}.q", d, d, rng, bias=False)
    store.add_linear(f"{prefix}.k", d, d, rng, bias=False)
    store.add_linear(f"{prefix}.v", d, d, rng, bias=False)
    store.add_linear(f"{prefix}.o", d, d, rng, bias=False)


def multi_head_attention(g: Graph, store: ParamStore, prefix: str,
                         q: Value, k: Value, v: Value, heads: int) -> Value:
    """Concat of per-head softmax(QK^T / sqrt(d_k)) V, output-projected."""
    if k.data.shape[0] != v.data.shape[0]:
        raise ConfigError("key/value row counts disagree")
    d = q.data.shape[1]
    if d % heads != 0 or k.data.shape[1] != d:
        raise ConfigError("width mismatch in attention")
    scale = 1.0 / np.sqrt(d // heads)
    qh = nm.split_heads(nm.apply_linear(g, store, f"{prefix}.q", q), heads)
    kh = nm.split_heads(nm.apply_linear(g, store, f"{prefix}.k", k), heads)
    vh = nm.split_heads(nm.apply_linear(g, store, f"{prefix}.v", v), heads)
    att = nm.softmax(nm.bmm(qh, kh, transpose_b=True) * scale, axis=2)
    return nm.apply_linear(g, store, f"{prefix}.o", nm.merge_heads(nm.bmm(att, vh)))


def init_block(store: ParamStore, prefix: str, d: int, heads: int, rng) -> None:
    init_mha(store, f"{prefix}.self", d, heads, rng)
    init_mha(store, f"{prefix}.cross", d, heads, rng)
    store.add_layer_norm(f"{prefix}.ln1", d)
    store.add_layer_norm(f"{prefix}.ln2", d)


def _ln(g, store, name, x):
    return nm.layer_norm(x, g.param(f"{name}.gain", store[f"{name}.gain"]),
                         g.param(f"{name}.bias", store[f"{name}.bias"]))


def attention_block(g: Graph, store: ParamStore, prefix: str,
                    fx: Value, fy: Value, heads: int):
    """Residual self-attention then residual cross-attention, each followed
    by layer norm; weights shared between the two clouds."""
    if fx.data.shape[1] != fy.data.shape[1]:
        raise ConfigError("feature widths disagree across clouds")
    sx = _ln(g, store, f"{prefix}.ln1", fx + multi_head_attention(g, store, f"{prefix}.self", fx, fx, fx, heads))
    sy = _ln(g, store, f"{prefix}.ln1", fy + multi_head_attention(g, store, f"{prefix}.self", fy, fy, fy, heads))
    cx = _ln(g, store, f"{prefix}.ln2", sx + multi_head_attention(g, store, f"{prefix}.cross", sx, sy, sy, heads))
    cy = _ln(g, store, f"{prefix}.ln2", sy + multi_head_attention(g, store, f"{prefix}.cross", sy, sx, sx, heads))
    return cx, cy


def init_stack(store: ParamStore, prefix: str, n_blocks: int, d: int, heads: int, rng) -> None:
    for b in range(n_blocks):
        init_block(store, f"{prefix}.blk{b}", d, heads, rng)


def apply_stack(g: Graph, store: ParamStore, prefix: str, fx: Value, fy: Value,
                n_blocks: int, heads: int):
    for b in range(n_blocks):
        fx, fy = attention_block(g, store, f"{prefix}.blk{b}", fx, fy, heads)
    return fx, fy
