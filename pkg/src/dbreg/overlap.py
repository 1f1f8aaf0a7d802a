"""Overlap prediction: Siamese multi-resolution extraction, stacked
attention interaction, global-feature exchange, and a shared pointwise
sigmoid head; supervised with a binary focal loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, multires
from . import numerics as nm
from .geometry import PointCloud
from .multires import MultiResConfig
from .numerics import Graph, ParamStore, Value


@dataclass(frozen=True)
class OverlapConfig:
    extractor: MultiResConfig = field(default_factory=MultiResConfig)
    blocks: int = 2
    heads: int = 4
    tau: float = 0.5
    floor: int = 32


@dataclass
class OverlapPrediction:
    """Per-point overlap probabilities plus the thresholded mask."""

    probs: np.ndarray
    mask: np.ndarray
    threshold: float


def init_params(store: ParamStore, cfg: OverlapConfig, rng, prefix: str = "overlap") -> None:
    d = cfg.extractor.out_dim
    multires.init_params(store, f"{prefix}.ext", cfg.extractor, rng)
    attention.init_stack(store, f"{prefix}.att", cfg.blocks, d, cfg.heads, rng)
    nm.add_mlp2(store, f"{prefix}.head", 2 * d, d, 1, rng)


def _tile_rows(row: Value, n: int) -> Value:
    return nm.gather_rows(row.reshape((1, row.data.size)), np.zeros(n, dtype=np.int64))


def overlap_logits(g: Graph, store: ParamStore, cfg: OverlapConfig,
                   plan_x, plan_y, pe_x: np.ndarray, pe_y: np.ndarray,
                   prefix: str = "overlap"):
    """Probability Values for both clouds (shared weights throughout)."""
    fx = multires.extract(g, store, f"{prefix}.ext", plan_x, cfg.extractor) + g.constant(pe_x)
    fy = multires.extract(g, store, f"{prefix}.ext", plan_y, cfg.extractor) + g.constant(pe_y)
    fx, fy = attention.apply_stack(g, store, f"{prefix}.att", fx, fy, cfg.blocks, cfg.heads)
    gx = fx.max(axis=0)
    gy = fy.max(axis=0)
    hx = nm.concat([fx, _tile_rows(gy, fx.data.shape[0])], axis=1)
    hy = nm.concat([fy, _tile_rows(gx, fy.data.shape[0])], axis=1)
    px = nm.sigmoid(nm.apply_mlp2(g, store, f"{prefix}.head", hx)).reshape((fx.data.shape[0],))
    py = nm.sigmoid(nm.apply_mlp2(g, store, f"{prefix}.head", hy)).reshape((fy.data.shape[0],))
    return px, py


def predict_overlap(store: ParamStore, X: PointCloud, Y: PointCloud,
                    cfg: OverlapConfig, prefix: str = "overlap"):
    """Inference wrapper: fresh graph, no gradients kept."""
    d = cfg.extractor.out_dim
    g = Graph()
    px, py = overlap_logits(
        g, store, cfg,
        multires.build_plan(X.points, cfg.extractor),
        multires.build_plan(Y.points, cfg.extractor),
        attention.positional_encode(X.points, d),
        attention.positional_encode(Y.points, d),
        prefix,
    )
    out = []
    for p in (px.data, py.data):
        mask, _ = threshold_mask(p, cfg.tau, cfg.floor)
        out.append(OverlapPrediction(p.copy(), mask, cfg.tau))
    return out[0], out[1]


def threshold_mask(probs: np.ndarray, tau: float = 0.5, floor: int = 32):
    """Binary mask at threshold tau; if fewer than ``floor`` points pass,
    fall back to the top-floor by probability."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = (probs >= tau).astype(np.uint8)
    floor = min(floor, probs.size)
    if int(mask.sum()) < floor:
        top = np.argsort(-probs, kind="stable")[:floor]
        mask = np.zeros(probs.size, dtype=np.uint8)
        mask[top] = 1
    return mask, np.nonzero(mask)[0]


def focal_loss(g: Graph, probs: Value, labels: np.ndarray,
               alpha: float = 1.0, gamma: float = 4.0) -> Value:
    """Mean binary focal loss for one cloud (minimized toward zero)."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    p = nm.clamp(probs, 1e-7, 1.0 - 1e-7)
    pos = alpha * ((1.0 - p) ** gamma) * p.log() * g.constant(labels)
    neg = (1.0 - alpha) * (p**gamma) * (1.0 - p).log() * g.constant(1.0 - labels)
    return -(pos + neg).mean()
