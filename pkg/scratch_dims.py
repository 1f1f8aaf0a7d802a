"""Dev scratch: tune composite dims for label purity."""
import numpy as np

from dbreg import geometry as geo
import scratch_labels as sl

variants = {
    "current": geo.DEFAULT_COMPOSITE_DIMS,
    "slim": {
        "box_half": (0.70, 0.36, 0.20),
        "boss_radius": 0.13,
        "boss_length": 0.55,
        "boss_offset": (0.12, 0.07),
        "fin_half": (0.09, 0.22, 0.04),
        "fin_center": (-0.48, 0.0, 0.24),
    },
    "slimmer": {
        "box_half": (0.75, 0.30, 0.16),
        "boss_radius": 0.11,
        "boss_length": 0.60,
        "boss_offset": (0.10, 0.06),
        "fin_half": (0.08, 0.20, 0.04),
        "fin_center": (-0.50, 0.0, 0.20),
    },
}

for name, dims in variants.items():
    rng = np.random.default_rng(3)
    pc = geo.synthesize_shape("composite", 20000, rng, dims)
    # effective normalized area via NN spacing: lambda ~ n / area
    params = geo.CorruptionParams()
    labs, preds, purity = [], [], []
    rng = np.random.default_rng(11)
    saved = geo.DEFAULT_COMPOSITE_DIMS
    geo.DEFAULT_COMPOSITE_DIMS = dims
    try:
        for _ in range(40):
            s, t, sr, tr = sl.pair_with_planes(rng, params)
            labs.append(np.concatenate([s, t]))
            preds.append(np.concatenate([sr, tr]).astype(np.uint8))
            purity.append((s[sr].mean() + t[tr].mean()) / 2)
    finally:
        geo.DEFAULT_COMPOSITE_DIMS = saved
    lab, pred = np.concatenate(labs), np.concatenate(preds)
    score, p, r = sl.f1(pred, lab)
    print(f"{name:10s} pos_rate={lab.mean():.3f} purity={np.mean(purity):.3f} regionF1={score:.3f} P={p:.3f} R={r:.3f}")
