"""Loss assembly and the two-stage optimization protocol.

Stage 1 trains the overlap predictor alone under the focal loss; stage 2
loads and freezes those weights, then optimizes the registration head
under a weighted sum of transformation, correspondence, and registration
distance losses. AdamW with decoupled weight decay and a cosine schedule
with linear warmup drive both stages.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention, dualreg, multires, overlap
from . import numerics as nm
from .dualreg import RegConfig, drop_slack, registration_forward
from .geometry import PairSample, PointCloud, RigidTransform, pair_errors
from .multires import MultiResConfig
from .numerics import Graph, ParamStore, Value
from .overlap import OverlapConfig


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    overlap: OverlapConfig = field(default_factory=OverlapConfig)
    reg: RegConfig = field(default_factory=RegConfig)

    @classmethod
    def desk_scale(cls, widths=(16, 32, 64), out_dim=48, stages=3, k=8, heads=4):
        """Preset sized so the desk-scale training runs fit single-core
        minute budgets; the wider (32, 64, 128)/96 configuration remains
        available through the constructor arguments."""
        ext = MultiResConfig(branches=len(widths), stages=stages, k=k,
                             widths=tuple(widths), out_dim=out_dim)
        return cls(overlap=OverlapConfig(extractor=ext, heads=heads),
                   reg=RegConfig(extractor=ext, heads=heads))


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "overlap"
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    lam1: float = 1.0
    lam2: float = 10.0
    lam3: float = 1.0
    eps_trans: float = 1.0
    eps_overlap: float = 0.1
    focal_alpha: float = 0.5
    focal_gamma: float = 4.0
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.stage not in ("overlap", "registration"):
            raise TrainingError(f"unknown stage {self.stage!r}")
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise TrainingError("loss weights must be nonnegative")
        if self.eps_overlap <= 0:
            raise TrainingError("overlap threshold must be positive")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")


# -- losses --------------------------------------------------------------------


def transformation_loss(g: Graph, gt: RigidTransform, r_pred: Value, t_pred: Value,
                        eps: float = 1.0) -> Value:
    """eps * |R_gt^T R_pred - I|_1 (entrywise) + ||t_gt - t_pred||_2."""
    rel = nm.matmul(g.constant(gt.R.T), r_pred) - g.constant(np.eye(3))
    return eps * rel.abs().sum() + nm.l2norm(t_pred - g.constant(gt.t))


def _corr_branch_loss(g: Graph, moved: Value, yp: np.ndarray, c_full: Value) -> Value:
    m = c_full.data.shape[0] - 1
    n = c_full.data.shape[1] - 1
    c = drop_slack(g, c_full, m, n)
    c = c / c.sum(axis=1, keepdims=True)
    return (moved - nm.matmul(c, g.constant(yp))).abs().sum() / m


def correspondence_loss(g: Graph, xp: np.ndarray, yp: np.ndarray,
                        c_rot: Value, c_trans: Value, gt: RigidTransform) -> Value:
    """Mean entrywise-l1 residual between transformed source points and the
    soft targets each branch's matrix assigns (slack dropped, rows
    renormalized); averaged across the two branches."""
    moved = g.constant(gt.apply(xp))
    return 0.5 * (_corr_branch_loss(g, moved, yp, c_rot) + _corr_branch_loss(g, moved, yp, c_trans))


def registration_distance_loss(g: Graph, points: np.ndarray, gt: RigidTransform,
                               r_pred: Value, t_pred: Value) -> Value:
    """Mean entrywise-l1 gap between ground-truth and predicted motion of
    the full source cloud."""
    a = g.constant(gt.apply(points))
    b = nm.matmul(g.constant(points), r_pred.T) + t_pred.reshape((1, 3))
    return (a - b).abs().sum() / points.shape[0]


def total_registration_loss(l_trans: Value, l_corr: Value, l_dis: Value,
                            lam1: float = 1.0, lam2: float = 10.0, lam3: float = 1.0) -> Value:
    return lam1 * l_trans + lam2 * l_corr + lam3 * l_dis


# -- optimizer / schedule --------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay and bias correction."""

    def __init__(self, store: ParamStore, names, lr: float = 1e-4,
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.names = list(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store[n]) for n in self.names}
        self.v = {n: np.zeros_like(store[n]) for n in self.names}

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mhat = self.m[n] / bc1
            vhat = self.v[n] / bc2
            p = self.store[n]
            self.store[n] = p - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


def lr_schedule(step: int, total_steps: int, warmup_frac: float, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * (step - warm) / (total_steps - warm)))


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# -- shared plumbing --------------------------------------------------------------


@dataclass
class PreppedPair:
    """Static per-sample geometry reused across epochs."""

    sample: PairSample
    plan_x: multires.MultiResPlan
    plan_y: multires.MultiResPlan
    pe_x: np.ndarray
    pe_y: np.ndarray


def prep_pairs(samples, ext_cfg: MultiResConfig):
    d = ext_cfg.out_dim
    out = []
    for s in samples:
        out.append(PreppedPair(
            s,
            multires.build_plan(s.source.points, ext_cfg),
            multires.build_plan(s.target.points, ext_cfg),
            attention.positional_encode(s.source.points, d),
            attention.positional_encode(s.target.points, d),
        ))
    return out


def classification_counts(pred: np.ndarray, lab: np.ndarray):
    pred = pred.astype(bool)
    lab = lab.astype(bool)
    tp = int((pred & lab).sum())
    fp = int((pred & ~lab).sum())
    tn = int((~pred & ~lab).sum())
    fn = int((~pred & lab).sum())
    return tp, fp, tn, fn


def classification_metrics(tp: int, fp: int, tn: int, fn: int) -> dict:
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    f1 = 2 * precision * recall / max(precision + recall, 1e-12)
    accuracy = (tp + tn) / max(tp + fp + tn + fn, 1)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def overlap_eval(store: ParamStore, prepped, net: PipelineConfig) -> dict:
    """Classification metrics of thresholded overlap predictions."""
    cnt = np.zeros(4, dtype=np.int64)
    for p in prepped:
        g = Graph()
        px, py = overlap.overlap_logits(g, store, net.overlap, p.plan_x, p.plan_y, p.pe_x, p.pe_y)
        for probs, lab in ((px.data, p.sample.source_overlap_labels),
                           (py.data, p.sample.target_overlap_labels)):
            mask = (probs >= net.overlap.tau).astype(np.uint8)
            cnt += np.array(classification_counts(mask, lab))
    return classification_metrics(*cnt)


# -- stage 1: overlap -----------------------------------------------------------


@dataclass
class TrainResult:
    store: ParamStore
    curves: list
    final_metric: dict


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, order.size, batch_size):
        yield order[i : i + batch_size]


def _accumulate(acc: dict, grads: dict, scale: float) -> None:
    for k, v in grads.items():
        if k in acc:
            acc[k] += v * scale
        else:
            acc[k] = v * scale


def train_overlap_stage(train, cfg: TrainConfig, net: PipelineConfig,
                        val=None, log_fn=None) -> TrainResult:
    """Optimize overlap parameters only; everything else untouched."""
    rng_init = np.random.default_rng(cfg.seed)
    rng_shuffle = np.random.default_rng(cfg.seed + 0x5EED)
    store = ParamStore()
    overlap.init_params(store, net.overlap, rng_init)

    prepped = prep_pairs(train, net.overlap.extractor)
    val_prepped = prep_pairs(val, net.overlap.extractor) if val else None

    steps_per_epoch = int(np.ceil(len(prepped) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(store, store.names(), cfg.lr, cfg.weight_decay)
    curves = []
    step = 0
    metric = {}
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng_shuffle.permutation(len(prepped))
        losses = []
        for batch in _batches(order, cfg.batch_size):
            acc: dict = {}
            for i in batch:
                p = prepped[i]
                g = Graph()
                try:
                    px, py = overlap.overlap_logits(g, store, net.overlap, p.plan_x, p.plan_y, p.pe_x, p.pe_y)
                    lx = overlap.focal_loss(g, px, p.sample.source_overlap_labels, cfg.focal_alpha, cfg.focal_gamma)
                    ly = overlap.focal_loss(g, py, p.sample.target_overlap_labels, cfg.focal_alpha, cfg.focal_gamma)
                    loss = 0.5 * (lx + ly)
                except nm.NonFiniteError as e:
                    raise TrainingError(f"divergence at epoch {epoch} sample {i}: {e}") from e
                if not np.isfinite(loss.data):
                    raise TrainingError(f"divergence: non-finite loss at epoch {epoch} sample {i}")
                losses.append(float(loss.data))
                _accumulate(acc, g.backward(loss), 1.0 / batch.size)
            opt.step(clip_gradients(acc, cfg.grad_clip), lr_schedule(step, total_steps, cfg.warmup_frac, cfg.lr))
            step += 1
        row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses))}
        curves.append(row)
        if val_prepped is not None:
            metric = overlap_eval(store, val_prepped, net)
            curves.append({"epoch": epoch, "split": "val", "loss": float("nan"), **metric})
        if log_fn:
            log_fn(f"[overlap] epoch {epoch + 1}/{cfg.epochs} loss {row['loss']:.4f} "
                   f"{('f1 %.4f' % metric['f1']) if metric else ''} ({time.perf_counter() - t0:.1f}s)")
    if val_prepped is not None and not metric:
        metric = overlap_eval(store, val_prepped, net)
    return TrainResult(store, curves, metric)


# -- stage 2: registration ---------------------------------------------------------


@dataclass
class PreppedFiltered:
    """Overlap-filtered clouds plus their static geometry, fixed under the
    frozen stage-1 weights."""

    sample: PairSample
    xp: np.ndarray
    yp: np.ndarray
    plan_x: multires.MultiResPlan
    plan_y: multires.MultiResPlan
    pe_x: np.ndarray
    pe_y: np.ndarray


def prep_filtered(samples, store: ParamStore, net: PipelineConfig,
                  no_overlap: bool = False):
    d = net.reg.extractor.out_dim
    out = []
    for s in samples:
        if no_overlap:
            xp = s.source.points
            yp = s.target.points
        else:
            pred_x, pred_y = overlap.predict_overlap(store, s.source, s.target, net.overlap)
            xp = s.source.points[pred_x.mask.astype(bool)]
            yp = s.target.points[pred_y.mask.astype(bool)]
        out.append(PreppedFiltered(
            s, xp, yp,
            multires.build_plan(xp, net.reg.extractor),
            multires.build_plan(yp, net.reg.extractor),
            attention.positional_encode(xp, d),
            attention.positional_encode(yp, d),
        ))
    return out


def registration_sample_loss(g: Graph, store: ParamStore, net: PipelineConfig,
                             p: PreppedFiltered, cfg: TrainConfig,
                             no_dual: bool = False):
    fwd = registration_forward(g, store, net.reg, p.xp, p.yp,
                               p.plan_x, p.plan_y, p.pe_x, p.pe_y, no_dual=no_dual)
    lt = transformation_loss(g, p.sample.gt, fwd.rot_matrix, fwd.translation, cfg.eps_trans)
    lc = correspondence_loss(g, p.xp, p.yp, fwd.corr_rot, fwd.corr_trans, p.sample.gt)
    ld = registration_distance_loss(g, p.sample.source.points, p.sample.gt,
                                    fwd.rot_matrix, fwd.translation)
    return total_registration_loss(lt, lc, ld, cfg.lam1, cfg.lam2, cfg.lam3), fwd


def registration_eval(store: ParamStore, prepped, net: PipelineConfig,
                      no_dual: bool = False) -> dict:
    """Mean isotropic errors of the current head over prepped pairs."""
    iso_r, iso_t = [], []
    for p in prepped:
        g = Graph()
        try:
            fwd = registration_forward(g, store, net.reg, p.xp, p.yp,
                                       p.plan_x, p.plan_y, p.pe_x, p.pe_y, no_dual=no_dual)
            pred = RigidTransform(fwd.rot_matrix.data.copy(), fwd.translation.data.copy())
        except nm.DegenerateGeometryError:
            pred = RigidTransform.identity()  # scored at the identity's error
        e = pair_errors(p.sample.gt, pred)
        iso_r.append(e.iso_rot_deg)
        iso_t.append(e.iso_trans)
    return {"iso_r": float(np.mean(iso_r)), "iso_t": float(np.mean(iso_t))}


def train_joint_stage(train, cfg: TrainConfig, net: PipelineConfig,
                      val=None, log_fn=None) -> TrainResult:
    """Ablation: predict overlap inside the registration stage.

    Overlap and registration parameters are optimized together; masks come
    from the overlap probabilities of the same step (hard threshold, so
    the filtering itself carries no gradient), and the focal loss joins
    the registration objective."""
    rng_init = np.random.default_rng(cfg.seed)
    rng_shuffle = np.random.default_rng(cfg.seed + 0x5EED)
    store = ParamStore()
    overlap.init_params(store, net.overlap, rng_init)
    dualreg.init_params(store, net.reg, rng_init)

    prepped = prep_pairs(train, net.overlap.extractor)
    d = net.reg.extractor.out_dim

    steps_per_epoch = int(np.ceil(len(prepped) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(store, store.names(), cfg.lr, cfg.weight_decay)
    curves = []
    step = 0
    metric = {}
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng_shuffle.permutation(len(prepped))
        losses = []
        for batch in _batches(order, cfg.batch_size):
            acc: dict = {}
            for i in batch:
                p = prepped[i]
                g = Graph()
                px, py = overlap.overlap_logits(g, store, net.overlap, p.plan_x, p.plan_y, p.pe_x, p.pe_y)
                l_o = 0.5 * (overlap.focal_loss(g, px, p.sample.source_overlap_labels, cfg.focal_alpha, cfg.focal_gamma)
                             + overlap.focal_loss(g, py, p.sample.target_overlap_labels, cfg.focal_alpha, cfg.focal_gamma))
                mask_x, _ = overlap.threshold_mask(px.data, net.overlap.tau, net.overlap.floor)
                mask_y, _ = overlap.threshold_mask(py.data, net.overlap.tau, net.overlap.floor)
                xp = p.sample.source.points[mask_x.astype(bool)]
                yp = p.sample.target.points[mask_y.astype(bool)]
                filt = PreppedFiltered(
                    p.sample, xp, yp,
                    multires.build_plan(xp, net.reg.extractor),
                    multires.build_plan(yp, net.reg.extractor),
                    attention.positional_encode(xp, d),
                    attention.positional_encode(yp, d),
                )
                try:
                    l_reg, _ = registration_sample_loss(g, store, net, filt, cfg)
                except nm.DegenerateGeometryError:
                    l_reg = g.constant(0.0)
                loss = l_reg + l_o
                if not np.isfinite(loss.data):
                    raise TrainingError(f"divergence: non-finite loss at epoch {epoch} sample {i}")
                losses.append(float(loss.data))
                _accumulate(acc, g.backward(loss), 1.0 / batch.size)
            opt.step(clip_gradients(acc, cfg.grad_clip), lr_schedule(step, total_steps, cfg.warmup_frac, cfg.lr))
            step += 1
        curves.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses))})
        if log_fn:
            log_fn(f"[joint] epoch {epoch + 1}/{cfg.epochs} loss {curves[-1]['loss']:.4f} "
                   f"({time.perf_counter() - t0:.1f}s)")
    if val:
        val_filt = prep_filtered(val, store, net)
        metric = registration_eval(store, val_filt, net)
        curves.append({"epoch": cfg.epochs - 1, "split": "val", "loss": float("nan"), **metric})
    return TrainResult(store, curves, metric)


def train_registration_stage(train, cfg: TrainConfig, net: PipelineConfig,
                             overlap_params: dict, val=None, log_fn=None,
                             no_dual: bool = False, no_overlap: bool = False,
                             grad_probe=None) -> TrainResult:
    """Optimize registration parameters with the overlap weights frozen.

    ``grad_probe`` (if given) is called with the raw per-step gradient dict
    before clipping; used by tests to assert the freeze/decoupling contracts.
    """
    rng_init = np.random.default_rng(cfg.seed)
    rng_shuffle = np.random.default_rng(cfg.seed + 0x5EED)
    store = ParamStore()
    if not no_overlap:
        needs = [k for k in overlap_params if k.startswith("overlap.")]
        if not needs:
            raise TrainingError("overlap checkpoint carries no overlap parameters")
        for k in needs:
            store[k] = np.array(overlap_params[k], dtype=np.float64)
    dualreg.init_params(store, net.reg, rng_init)
    trainable = [k for k in store.names() if k.startswith("reg.")]

    prepped = prep_filtered(train, store, net, no_overlap)
    val_prepped = prep_filtered(val, store, net, no_overlap) if val else None

    steps_per_epoch = int(np.ceil(len(prepped) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(store, trainable, cfg.lr, cfg.weight_decay)
    curves = []
    step = 0
    metric = {}
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng_shuffle.permutation(len(prepped))
        losses = []
        skipped = 0
        for batch in _batches(order, cfg.batch_size):
            acc: dict = {}
            used = 0
            for i in batch:
                g = Graph()
                try:
                    loss, _ = registration_sample_loss(g, store, net, prepped[i], cfg, no_dual)
                except nm.DegenerateGeometryError:
                    # collapsed correspondences can momentarily starve a
                    # solve; drop the sample from this step
                    skipped += 1
                    continue
                except nm.NonFiniteError as e:
                    raise TrainingError(f"divergence at epoch {epoch} sample {i}: {e}") from e
                if not np.isfinite(loss.data):
                    raise TrainingError(f"divergence: non-finite loss at epoch {epoch} sample {i}")
                losses.append(float(loss.data))
                grads = g.backward(loss)
                if grad_probe is not None:
                    grad_probe(grads, store)
                _accumulate(acc, {k: grads[k] for k in trainable if k in grads}, 1.0 / batch.size)
                used += 1
            if used:
                opt.step(clip_gradients(acc, cfg.grad_clip), lr_schedule(step, total_steps, cfg.warmup_frac, cfg.lr))
            step += 1
        if not losses:
            raise TrainingError(f"every sample degenerate in epoch {epoch}")
        row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses))}
        if skipped and log_fn:
            log_fn(f"[reg] epoch {epoch + 1}: skipped {skipped} degenerate samples")
        curves.append(row)
        if val_prepped is not None:
            metric = registration_eval(store, val_prepped, net, no_dual)
            curves.append({"epoch": epoch, "split": "val", "loss": float("nan"), **metric})
        if log_fn:
            log_fn(f"[reg] epoch {epoch + 1}/{cfg.epochs} loss {row['loss']:.4f} "
                   f"{('iso_r %.2f iso_t %.3f' % (metric['iso_r'], metric['iso_t'])) if metric else ''} "
                   f"({time.perf_counter() - t0:.1f}s)")
    if val_prepped is not None and not metric:
        metric = registration_eval(store, val_prepped, net, no_dual)
    return TrainResult(store, curves, metric)
