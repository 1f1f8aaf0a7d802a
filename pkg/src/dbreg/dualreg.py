"""Dual-branch registration head.

Filtered clouds get a fresh multi-resolution extraction, one common
attention block, then two weight-independent attention stacks. Each branch
builds its own correspondence matrix from squared feature distances,
sharpens it with predicted annealing parameters, normalizes it to doubly
stochastic form with slack, and solves a weighted Procrustes problem.
The rotation comes from the rotation branch; the translation branch solves
its own (unconstrained) rotation only as an intermediate to get t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, multires
from . import numerics as nm
from .geometry import PointCloud, RigidTransform
from .multires import MultiResConfig
from .numerics import DegenerateGeometryError, Graph, ParamStore, Value


@dataclass(frozen=True)
class RegConfig:
    extractor: MultiResConfig = field(default_factory=MultiResConfig)
    heads: int = 4
    common_blocks: int = 1
    branch_blocks: int = 2
    # iteration cap; early exit at sinkhorn_tol normally stops far sooner
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    anneal_hidden: int = 32
    anneal_width: int = 64


@dataclass
class CorrespondenceMatrix:
    """(m+1)x(n+1) nonnegative matrix with slack row/column appended."""

    values: np.ndarray

    @property
    def m(self):
        return self.values.shape[0] - 1

    @property
    def n(self):
        return self.values.shape[1] - 1

    def validate(self, tol: float = 1e-5) -> None:
        v = self.values
        if (v < 0).any():
            raise ValueError("correspondence entries must be nonnegative")
        row_dev = np.abs(v[:-1, :].sum(axis=1) - 1.0).max()
        col_dev = np.abs(v[:, :-1].sum(axis=0) - 1.0).max()
        if max(row_dev, col_dev) > tol:
            raise ValueError(f"matrix not doubly stochastic within {tol:g} "
                             f"(row dev {row_dev:.2e}, col dev {col_dev:.2e})")


def init_params(store: ParamStore, cfg: RegConfig, rng, prefix: str = "reg") -> None:
    d = cfg.extractor.out_dim
    multires.init_params(store, f"{prefix}.ext", cfg.extractor, rng)
    attention.init_stack(store, f"{prefix}.common", cfg.common_blocks, d, cfg.heads, rng)
    attention.init_stack(store, f"{prefix}.rot", cfg.branch_blocks, d, cfg.heads, rng)
    attention.init_stack(store, f"{prefix}.trans", cfg.branch_blocks, d, cfg.heads, rng)
    nm.add_mlp2(store, f"{prefix}.anneal.net", 4, cfg.anneal_hidden, cfg.anneal_width, rng)
    nm.add_mlp2(store, f"{prefix}.anneal.head", cfg.anneal_width, cfg.anneal_hidden, 4, rng)


def branch_features(g: Graph, store: ParamStore, cfg: RegConfig,
                    plan_x, plan_y, pe_x, pe_y, prefix: str = "reg",
                    no_dual: bool = False):
    """(F_rot_x, F_rot_y, F_trans_x, F_trans_y) after common + per-branch
    attention; with ``no_dual`` the rotation branch serves both roles."""
    fx = multires.extract(g, store, f"{prefix}.ext", plan_x, cfg.extractor) + g.constant(pe_x)
    fy = multires.extract(g, store, f"{prefix}.ext", plan_y, cfg.extractor) + g.constant(pe_y)
    fx, fy = attention.apply_stack(g, store, f"{prefix}.common", fx, fy, cfg.common_blocks, cfg.heads)
    frx, fry = attention.apply_stack(g, store, f"{prefix}.rot", fx, fy, cfg.branch_blocks, cfg.heads)
    if no_dual:
        return frx, fry, frx, fry
    ftx, fty = attention.apply_stack(g, store, f"{prefix}.trans", fx, fy, cfg.branch_blocks, cfg.heads)
    return frx, fry, ftx, fty


def init_correspondence(g: Graph, fx: Value, fy: Value) -> Value:
    """Squared feature distances, c[i, j] = ||fx_i - fy_j||^2."""
    if fx.data.shape[1] != fy.data.shape[1]:
        raise ValueError("feature widths disagree")
    sqx = (fx * fx).sum(axis=1, keepdims=True)
    sqy = (fy * fy).sum(axis=1, keepdims=True)
    return sqx + sqy.T - 2.0 * nm.matmul(fx, fy.T)


def predict_anneal_params(g: Graph, store: ParamStore, xp: np.ndarray, yp: np.ndarray,
                          prefix: str = "reg"):
    """Two (alpha, beta) pairs from a permutation-invariant net over the
    filtered points, each point tagged with its cloud affiliation."""
    tagged = np.concatenate(
        [
            np.concatenate([xp, np.zeros((xp.shape[0], 1))], axis=1),
            np.concatenate([yp, np.ones((yp.shape[0], 1))], axis=1),
        ],
        axis=0,
    )
    h = nm.apply_mlp2(g, store, f"{prefix}.anneal.net", g.constant(tagged))
    pooled = h.max(axis=0).reshape((1, h.data.shape[1]))
    raw = nm.apply_mlp2(g, store, f"{prefix}.anneal.head", pooled).softplus().reshape((4,))
    alpha_r = nm.gather_rows(raw, np.array([0]))
    beta_r = nm.gather_rows(raw, np.array([1])) + 1e-4
    alpha_t = nm.gather_rows(raw, np.array([2]))
    beta_t = nm.gather_rows(raw, np.array([3])) + 1e-4
    return alpha_r, beta_r, alpha_t, beta_t


def anneal(g: Graph, c: Value, alpha, beta) -> Value:
    """c -> exp(-beta (c - alpha)), exponent clamped to +-50."""
    if isinstance(beta, Value):
        if (beta.data <= 0).any():
            raise ValueError("beta must be positive")
    elif beta <= 0:
        raise ValueError("beta must be positive")
    return nm.clamp((alpha - c) * beta, -50.0, 50.0).exp()


def sinkhorn_normalize(g: Graph, c: Value, iters: int = 100, tol: float = 1e-6,
                       slack: bool = True) -> Value:
    """Alternate row/column normalization toward a doubly stochastic
    matrix; slack entries start at 1 and are never normalized along their
    own direction.

    Exits once the residual drops below ``tol``. ``iters`` is the nominal
    budget; past it the loop settles for half the doubly-stochastic
    assertion tolerance, with a hard stop at three times the budget.
    """
    if (c.data <= 0).any():
        raise ValueError("sinkhorn input must be strictly positive")
    m, n = c.data.shape
    mat = c
    if slack:
        mat = nm.concat([mat, g.constant(np.ones((m, 1)))], axis=1)
        mat = nm.concat([mat, g.constant(np.ones((1, n + 1)))], axis=0)
    budget = max(iters, 1)
    for it in range(3 * budget):
        mat = nm.sinkhorn_round(mat, m, n)
        # columns are exact right after the round; only rows can deviate
        row_dev = np.abs(mat.data[:m, :].sum(axis=1) - 1.0).max()
        if row_dev < tol or (it + 1 >= budget and row_dev < 5e-6):
            break
    return mat


def drop_slack(g: Graph, mat: Value, m: int, n: int) -> Value:
    """Real block of a slack-augmented matrix, as a Value."""
    rows = nm.gather_rows(mat, np.arange(m))
    return nm.gather_rows(rows.T, np.arange(n)).T


def soft_correspondence(g: Graph, mat: Value, yp: np.ndarray):
    """Weighted pseudo-targets: yhat_i = sum_j c_ij y_j with the slack
    dropped; w_i is the mass each row assigns to real targets."""
    m = mat.data.shape[0] - 1
    n = mat.data.shape[1] - 1
    c = drop_slack(g, mat, m, n)
    yhat = nm.matmul(c, g.constant(yp))
    w = c.sum(axis=1)
    return yhat, w


def _weighted_centroids(g, xp: Value, yhat: Value, w: Value):
    m = w.data.shape[0]
    wc = w.reshape((m, 1))
    sw = w.sum()
    xbar = (xp * wc).sum(axis=0) / sw
    ybar = (yhat * wc).sum(axis=0) / sw
    return wc, xbar, ybar


def _weighted_covariance(g, xp: Value, yhat: Value, w: Value):
    if w.data.shape[0] < 3 or int((w.data > 1e-12).sum()) < 3:
        raise DegenerateGeometryError("need at least 3 effective correspondences")
    if w.data.sum() <= 0:
        raise DegenerateGeometryError("correspondence weights sum to zero")
    wc, xbar, ybar = _weighted_centroids(g, xp, yhat, w)
    xc = xp - xbar.reshape((1, 3))
    yc = yhat - ybar.reshape((1, 3))
    h = nm.matmul(xc.T, yc * wc)
    return h, xbar, ybar


def solve_rotation(g: Graph, xp, yhat: Value, w: Value) -> Value:
    """Weighted Procrustes rotation mapping source deviations onto
    pseudo-target deviations."""
    xp = g.constant(xp)
    h, _, _ = _weighted_covariance(g, xp, yhat, w)
    return nm.procrustes_rotation(h)


def solve_translation(g: Graph, xp, yhat: Value, w: Value):
    """Translation via this branch's own intermediate rotation:
    t = ybar - R_aux xbar. Returns (t, R_aux)."""
    xp = g.constant(xp)
    h, xbar, ybar = _weighted_covariance(g, xp, yhat, w)
    r_aux = nm.procrustes_rotation(h)
    t = ybar - nm.matmul(r_aux, xbar.reshape((3, 1))).reshape((3,))
    return t, r_aux


@dataclass
class RegForward:
    """Graph-side handles produced by one registration forward pass."""

    rot_matrix: Value  # (3, 3)
    translation: Value  # (3,)
    aux_rotation: Value
    corr_rot: Value  # (m+1, n+1) normalized, slack included
    corr_trans: Value
    anneal_params: tuple


def registration_forward(g: Graph, store: ParamStore, cfg: RegConfig,
                         xp: np.ndarray, yp: np.ndarray,
                         plan_x, plan_y, pe_x, pe_y,
                         prefix: str = "reg", no_dual: bool = False) -> RegForward:
    frx, fry, ftx, fty = branch_features(g, store, cfg, plan_x, plan_y, pe_x, pe_y, prefix, no_dual)
    alpha_r, beta_r, alpha_t, beta_t = predict_anneal_params(g, store, xp, yp, prefix)

    c_rot = sinkhorn_normalize(
        g, anneal(g, init_correspondence(g, frx, fry), alpha_r, beta_r),
        cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    yhat_r, w_r = soft_correspondence(g, c_rot, yp)
    r_pred = solve_rotation(g, xp, yhat_r, w_r)

    if no_dual:
        c_trans = c_rot
        t_pred, r_aux = solve_translation(g, xp, yhat_r, w_r)
    else:
        c_trans = sinkhorn_normalize(
            g, anneal(g, init_correspondence(g, ftx, fty), alpha_t, beta_t),
            cfg.sinkhorn_iters, cfg.sinkhorn_tol)
        yhat_t, w_t = soft_correspondence(g, c_trans, yp)
        t_pred, r_aux = solve_translation(g, xp, yhat_t, w_t)

    for mat in (c_rot, c_trans) if not no_dual else (c_rot,):
        CorrespondenceMatrix(mat.data).validate(1e-5)

    return RegForward(r_pred, t_pred, r_aux, c_rot, c_trans,
                      (alpha_r, beta_r, alpha_t, beta_t))


@dataclass
class RegDiagnostics:
    corr_rot: CorrespondenceMatrix
    corr_trans: CorrespondenceMatrix
    source_mask: np.ndarray
    target_mask: np.ndarray
    aux_rotation: np.ndarray
    anneal_params: dict

    def as_json_dict(self):
        return {
            "corr_rot": self.corr_rot.values.tolist(),
            "corr_trans": self.corr_trans.values.tolist(),
            "source_mask": self.source_mask.tolist(),
            "target_mask": self.target_mask.tolist(),
            "aux_rotation": self.aux_rotation.tolist(),
            "anneal_params": self.anneal_params,
        }


def register(store: ParamStore, X: PointCloud, Y: PointCloud,
             ov_cfg, reg_cfg: RegConfig,
             no_overlap: bool = False, no_dual: bool = False):
    """Full inference pipeline on a fresh graph.

    Returns the predicted :class:`RigidTransform` plus diagnostics carrying
    both correspondence matrices, the overlap masks, and the translation
    branch's intermediate rotation.
    """
    from . import overlap as ovl

    if no_overlap:
        mask_x = np.ones(len(X), dtype=np.uint8)
        mask_y = np.ones(len(Y), dtype=np.uint8)
    else:
        pred_x, pred_y = ovl.predict_overlap(store, X, Y, ov_cfg)
        mask_x, mask_y = pred_x.mask, pred_y.mask
    xp = X.points[mask_x.astype(bool)]
    yp = Y.points[mask_y.astype(bool)]

    d = reg_cfg.extractor.out_dim
    g = Graph()
    fwd = registration_forward(
        g, store, reg_cfg, xp, yp,
        multires.build_plan(xp, reg_cfg.extractor),
        multires.build_plan(yp, reg_cfg.extractor),
        attention.positional_encode(xp, d),
        attention.positional_encode(yp, d),
        no_dual=no_dual,
    )
    transform = RigidTransform(fwd.rot_matrix.data.copy(), fwd.translation.data.copy())
    a_r, b_r, a_t, b_t = (float(v.data[0]) for v in fwd.anneal_params)
    diag = RegDiagnostics(
        corr_rot=CorrespondenceMatrix(fwd.corr_rot.data.copy()),
        corr_trans=CorrespondenceMatrix(fwd.corr_trans.data.copy()),
        source_mask=mask_x,
        target_mask=mask_y,
        aux_rotation=fwd.aux_rotation.data.copy(),
        anneal_params={"alpha_rot": a_r, "beta_rot": b_r, "alpha_trans": a_t, "beta_trans": b_t},
    )
    return transform, diag
