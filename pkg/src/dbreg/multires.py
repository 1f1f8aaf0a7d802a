"""Multi-resolution point feature extractor.

Parallel branches hold progressively FPS-halved subsets of the cloud.
Each stage updates every branch with an EdgeConv, then branches exchange
features: query-down fetches rows from finer branches, transition-up
interpolates from coarser ones (inverse-distance weights). Stage outputs
are concatenated per branch, mixed, restored to full resolution, and
projected to the output width.

Neighborhoods and interpolation weights depend only on coordinates, so
they live in a :class:`MultiResPlan` that is built once per cloud and can
be cached across training epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .geometry import PointCloud, farthest_point_sample, knn
from .numerics import Graph, ParamStore, Value


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class MultiResConfig:
    branches: int = 3
    stages: int = 3
    k: int = 8
    widths: tuple = (32, 64, 128)
    out_dim: int = 96
    interp_k: int = 3

    def __post_init__(self):
        if self.branches < 1:
            raise ConfigError("need at least one branch")
        if len(self.widths) != self.branches:
            raise ConfigError("one width per branch")
        if self.out_dim % 6 != 0:
            raise ConfigError("output width must be divisible by 6")

    def min_points(self) -> int:
        return 2 ** (self.branches - 1) * self.k


@dataclass
class BranchPlan:
    """Static geometry of one branch."""

    indices: np.ndarray  # positions within the original cloud
    points: np.ndarray
    knn_self: np.ndarray  # (m, k) neighborhood within the branch
    center_rows: np.ndarray | None = None  # this branch's points as rows of the parent
    down_nbrs: np.ndarray | None = None  # (m, k) parent rows used by transition_down


@dataclass
class MultiResPlan:
    branches: list[BranchPlan]
    down_rows: dict = field(default_factory=dict)  # (src fine, dst coarse) -> row map
    up_interp: dict = field(default_factory=dict)  # (src coarse, dst fine) -> (idx, wts)
    restore: dict = field(default_factory=dict)  # branch l>=1 -> (idx, wts) at full res


def interp_weights(query_points: np.ndarray, support_points: np.ndarray, k: int = 3):
    """Inverse-distance weights of the k nearest support points per query.

    A zero distance short-circuits to full weight on that (first such)
    support point. Weights are returned normalized, shaped (m, k, 1).
    """
    k = min(k, support_points.shape[0])
    idx = knn(PointCloud(query_points), PointCloud(support_points), k)
    d = np.linalg.norm(query_points[:, None, :] - support_points[idx], axis=2)
    zero_rows = (d <= 0).any(axis=1)
    with np.errstate(divide="ignore"):
        w = 1.0 / d
    if zero_rows.any():
        first_zero = np.argmax(d[zero_rows] <= 0, axis=1)
        w[zero_rows] = 0.0
        w[np.nonzero(zero_rows)[0], first_zero] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w[:, :, None]


def build_plan(points: np.ndarray, cfg: MultiResConfig) -> MultiResPlan:
    """Precompute FPS chains, kNN graphs, and interpolation tables."""
    n = points.shape[0]
    if n < cfg.min_points():
        raise ConfigError(f"cloud of {n} points is below the minimum {cfg.min_points()}")
    pc0 = PointCloud(points)
    start = int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))

    branches = [
        BranchPlan(
            indices=np.arange(n),
            points=points,
            knn_self=knn(pc0, pc0, cfg.k),
        )
    ]
    for l in range(1, cfg.branches):
        parent = branches[-1]
        m = (parent.points.shape[0] + 1) // 2
        parent_pc = PointCloud(parent.points)
        parent_start = int(np.argmin(np.linalg.norm(parent.points - parent.points.mean(axis=0), axis=1)))
        sel = farthest_point_sample(parent_pc, m, parent_start)
        pts = parent.points[sel]
        pc = PointCloud(pts)
        if cfg.k > parent.points.shape[0]:
            raise ConfigError("k exceeds parent branch size")
        branches.append(
            BranchPlan(
                indices=parent.indices[sel],
                points=pts,
                knn_self=knn(pc, pc, cfg.k),
                center_rows=sel,
                down_nbrs=knn(pc, parent_pc, cfg.k),
            )
        )

    plan = MultiResPlan(branches=branches)
    inv = [None] * cfg.branches
    for i, b in enumerate(branches):
        a = np.full(n, -1, dtype=np.int64)
        a[b.indices] = np.arange(b.indices.size)
        inv[i] = a
    for dst in range(cfg.branches):
        for src in range(cfg.branches):
            if src == dst:
                continue
            if src < dst:  # finer -> coarser: direct row lookup
                rows = inv[src][branches[dst].indices]
                if (rows < 0).any():
                    raise ConfigError("FPS chain broken: coarse point missing upstream")
                plan.down_rows[(src, dst)] = rows
            else:  # coarser -> finer: interpolation
                plan.up_interp[(src, dst)] = interp_weights(
                    branches[dst].points, branches[src].points, cfg.interp_k
                )
    for l in range(1, cfg.branches):
        plan.restore[l] = interp_weights(points, branches[l].points, cfg.interp_k)
    return plan


# -- parameter initialization -------------------------------------------------


def init_params(store: ParamStore, prefix: str, cfg: MultiResConfig, rng) -> None:
    w = cfg.widths
    nm.add_mlp2(store, f"{prefix}.embed", 3, w[0], w[0], rng)
    for l in range(cfg.branches - 1):
        nm.add_mlp2(store, f"{prefix}.td{l}", 2 * w[l], w[l + 1], w[l + 1], rng)
    for s in range(cfg.stages):
        for l in range(cfg.branches):
            nm.add_mlp2(store, f"{prefix}.ec{s}b{l}", 2 * w[l], w[l], w[l], rng)
    for s in range(cfg.stages - 1):
        for dst in range(cfg.branches):
            for src in range(cfg.branches):
                if src != dst:
                    nm.add_mlp2(store, f"{prefix}.fuse{s}.{src}to{dst}", w[src], w[dst], w[dst], rng)
    for l in range(cfg.branches):
        store.add_linear(f"{prefix}.mix{l}", cfg.stages * w[l], w[l], rng)
    for l in range(1, cfg.branches):
        nm.add_mlp2(store, f"{prefix}.up{l}", w[l], w[l], w[l], rng)
    store.add_linear(f"{prefix}.proj", sum(w), cfg.out_dim, rng)


# -- differentiable pieces -----------------------------------------------------


def _pair_mlp_max(g, store, name, feats, center_rows, nbr_rows, diff):
    m, k = nbr_rows.shape
    w_in = feats.data.shape[1]
    pairs = nm.neighbor_pairs(feats, center_rows, nbr_rows, diff=diff)
    h = nm.apply_mlp2(g, store, name, pairs.reshape((m * k, 2 * w_in)))
    return h.reshape((m, k, h.data.shape[1])).max(axis=1)


def transition_down(g: Graph, store: ParamStore, name: str, parent_feats: Value,
                    center_rows: np.ndarray, nbr_rows: np.ndarray) -> Value:
    """New-branch features: shared map over (center, neighbor) feature
    pairs from the parent branch, max-aggregated per center."""
    return _pair_mlp_max(g, store, name, parent_feats, center_rows, nbr_rows, diff=False)


def stage_update(g: Graph, store: ParamStore, name: str, feats: Value, knn_idx: np.ndarray) -> Value:
    """EdgeConv: shared map over (center, neighbor - center) pairs within
    the branch, max-aggregated."""
    m = feats.data.shape[0]
    return _pair_mlp_max(g, store, name, feats, np.arange(m), knn_idx, diff=True)


def query_down(g: Graph, store: ParamStore, name: str, upper_feats: Value, rows: np.ndarray) -> Value:
    """Fetch the finer branch's feature rows at the coarser branch's
    points, then adjust with a learnable map."""
    return nm.apply_mlp2(g, store, name, nm.gather_rows(upper_feats, rows))


def interpolate(lower_feats: Value, idx: np.ndarray, wts: np.ndarray) -> Value:
    """Inverse-distance weighted average (weights precomputed)."""
    gathered = nm.gather_rows(lower_feats, idx)  # (m, k, w)
    return (gathered * wts).sum(axis=1)


def transition_up(g: Graph, store: ParamStore, name: str, lower_feats: Value,
                  idx: np.ndarray, wts: np.ndarray) -> Value:
    return nm.apply_mlp2(g, store, name, interpolate(lower_feats, idx, wts))


def fuse(g: Graph, store: ParamStore, prefix: str, stage: int,
         hat: list[Value], plan: MultiResPlan) -> list[Value]:
    """Cross-branch exchange: each branch adds query-down projections of
    finer branches and transition-up interpolations of coarser ones."""
    out = []
    for dst in range(len(hat)):
        acc = hat[dst]
        for src in range(len(hat)):
            if src == dst:
                continue
            name = f"{prefix}.fuse{stage}.{src}to{dst}"
            if src < dst:
                v = query_down(g, store, name, hat[src], plan.down_rows[(src, dst)])
            else:
                idx, wts = plan.up_interp[(src, dst)]
                v = transition_up(g, store, name, hat[src], idx, wts)
            acc = acc + v
        out.append(acc)
    return out


def extract(g: Graph, store: ParamStore, prefix: str, plan: MultiResPlan,
            cfg: MultiResConfig) -> Value:
    """Full extractor forward; returns an (n, out_dim) feature Value."""
    pts0 = g.constant(plan.branches[0].points)
    feats = [nm.apply_mlp2(g, store, f"{prefix}.embed", pts0)]
    for l in range(1, cfg.branches):
        b = plan.branches[l]
        feats.append(transition_down(g, store, f"{prefix}.td{l - 1}", feats[l - 1], b.center_rows, b.down_nbrs))

    stage_outs = [[] for _ in range(cfg.branches)]
    cur = feats
    for s in range(cfg.stages):
        hat = []
        for l in range(cfg.branches):
            e = stage_update(g, store, f"{prefix}.ec{s}b{l}", cur[l], plan.branches[l].knn_self)
            stage_outs[l].append(e)
            hat.append(e)
        if s < cfg.stages - 1:
            cur = fuse(g, store, prefix, s, hat, plan)

    restored = []
    for l in range(cfg.branches):
        mixed = nm.apply_linear(g, store, f"{prefix}.mix{l}", nm.concat(stage_outs[l], axis=1))
        if l == 0:
            restored.append(mixed)
        else:
            idx, wts = plan.restore[l]
            restored.append(transition_up(g, store, f"{prefix}.up{l}", mixed, idx, wts))
    return nm.apply_linear(g, store, f"{prefix}.proj", nm.concat(restored, axis=1))
