"""Dev scratch: label density / best-case F1 for the desk-scale protocol."""
import numpy as np

from dbreg import geometry as geo


def pair_with_planes(rng, params):
    dims = geo.random_composite_dims(rng) if (params.kind == "composite" and params.randomize_dims) else None
    src_full = geo.synthesize_shape(params.kind, params.n_points, rng, dims)
    tgt_full = geo.synthesize_shape(params.kind, params.n_points, rng, dims)
    gt = geo.random_transform(rng, params.max_euler_deg, params.max_trans)
    tgt_full = geo.apply_transform(gt, tgt_full)

    def crop(pc):
        n = len(pc)
        keep = int(np.ceil(params.keep_ratio * n))
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        proj = pc.points @ d
        order = np.argsort(-proj, kind="stable")
        kept = np.sort(order[:keep])
        thresh = proj[order[keep - 1]]
        return geo.PointCloud(pc.points[kept]), d, thresh

    src_crop, d_s, th_s = crop(src_full)
    tgt_crop, d_t, th_t = crop(tgt_full)
    source = geo.jitter_gaussian(src_crop, params.sigma, params.clip, rng)
    target = geo.jitter_gaussian(tgt_crop, params.sigma, params.clip, rng)
    sl = geo.overlap_labels(source, target, gt, params.eps_o)
    tl = geo.overlap_labels(target, source, gt.inverse(), params.eps_o)
    # geometric oracle: source point is in-region iff its transformed position
    # is on the kept side of the target crop plane
    src_region = (gt.apply(source.points) @ d_t) >= th_t
    tgt_region = (gt.inverse().apply(target.points) @ d_s) >= th_s
    return sl, tl, src_region, tgt_region


def f1(pred, lab):
    tp = int(((pred == 1) & (lab == 1)).sum())
    fp = int(((pred == 1) & (lab == 0)).sum())
    fn = int(((pred == 0) & (lab == 1)).sum())
    p = tp / max(tp + fp, 1)
    r = tp / max(tp + fn, 1)
    return 2 * p * r / max(p + r, 1e-12), p, r


for kind in ("composite", "box", "cylinder", "torus", "sphere"):
    rng = np.random.default_rng(7)
    params = geo.CorruptionParams(kind=kind)
    labs, preds = [], []
    pos_in_region = []
    for _ in range(40):
        sl, tl, sr, tr = pair_with_planes(rng, params)
        labs.append(np.concatenate([sl, tl]))
        preds.append(np.concatenate([sr, tr]).astype(np.uint8))
        pos_in_region.append((sl[sr].mean() + tl[tr].mean()) / 2)
    lab = np.concatenate(labs)
    pred = np.concatenate(preds)
    score, p, r = f1(pred, lab)
    print(f"{kind:10s} pos_rate={lab.mean():.3f} P(label=1|region)={np.mean(pos_in_region):.3f} "
          f"oracle F1={score:.3f} (P={p:.3f} R={r:.3f})")
