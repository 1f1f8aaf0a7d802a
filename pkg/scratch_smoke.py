"""Dev scratch: end-to-end forward/backward smoke + per-sample timing."""
import time

import numpy as np

from dbreg import dualreg, geometry as geo, overlap, training
from dbreg.numerics import Graph

params = geo.CorruptionParams()
data = geo.generate_dataset(0, 3, params)
net = training.PipelineConfig.desk_scale()
cfg = training.TrainConfig(stage="overlap", epochs=1, seed=0)

rng = np.random.default_rng(0)
from dbreg.numerics import ParamStore

store = ParamStore()
overlap.init_params(store, net.overlap, rng)
dualreg.init_params(store, net.reg, rng)
print("params:", store.n_values(), "values in", len(store), "arrays")

prepped = training.prep_pairs(data, net.overlap.extractor)

t0 = time.perf_counter()
g = Graph()
px, py = overlap.overlap_logits(g, store, net.overlap, prepped[0].plan_x, prepped[0].plan_y,
                                prepped[0].pe_x, prepped[0].pe_y)
lx = overlap.focal_loss(g, px, data[0].source_overlap_labels, 0.5, 4.0)
loss = 0.5 * (lx + overlap.focal_loss(g, py, data[0].target_overlap_labels, 0.5, 4.0))
t1 = time.perf_counter()
grads = g.backward(loss)
t2 = time.perf_counter()
print(f"overlap fwd {t1 - t0:.3f}s bwd {t2 - t1:.3f}s loss {float(loss.data):.4f} nodes {len(g.nodes)}")

# registration path with fresh (untrained) overlap weights
t0 = time.perf_counter()
filt = training.prep_filtered(data[:1], store, net)
t1 = time.perf_counter()
print(f"prep_filtered {t1 - t0:.3f}s |X'|={filt[0].xp.shape[0]} |Y'|={filt[0].yp.shape[0]}")

t0 = time.perf_counter()
g = Graph()
loss, fwd = training.registration_sample_loss(g, store, net, filt[0], training.TrainConfig(stage="registration"))
t1 = time.perf_counter()
grads = g.backward(loss)
t2 = time.perf_counter()
print(f"reg fwd {t1 - t0:.3f}s bwd {t2 - t1:.3f}s loss {float(loss.data):.4f} nodes {len(g.nodes)}")
print("R=\n", fwd.rot_matrix.data, "\nt=", fwd.translation.data)

# overlap-parameter gradient leakage check (freeze contract)
leak = [k for k, v in grads.items() if k.startswith("overlap.") and np.abs(v).max() > 0]
print("overlap grads nonzero:", leak)

# timing loop for a realistic per-step estimate
for label, fn in [
    ("overlap step", lambda: _ov_step()),
    ("reg step", lambda: _reg_step()),
]:
    def _ov_step():
        g = Graph()
        px, py = overlap.overlap_logits(g, store, net.overlap, prepped[1].plan_x, prepped[1].plan_y,
                                        prepped[1].pe_x, prepped[1].pe_y)
        l = 0.5 * (overlap.focal_loss(g, px, data[1].source_overlap_labels, 0.5, 4.0)
                   + overlap.focal_loss(g, py, data[1].target_overlap_labels, 0.5, 4.0))
        g.backward(l)

    def _reg_step():
        g = Graph()
        l, _ = training.registration_sample_loss(g, store, net, filt[0], training.TrainConfig(stage="registration"))
        g.backward(l)

    fn()  # warm
    t0 = time.perf_counter()
    n = 5
    for _ in range(n):
        fn()
    dt = (time.perf_counter() - t0) / n
    print(f"{label}: {dt * 1000:.1f} ms/sample")
