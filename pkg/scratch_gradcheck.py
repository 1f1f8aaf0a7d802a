"""Dev scratch: finite-difference sweep over every op backward."""
import numpy as np

from dbreg import numerics as nm

rng = np.random.default_rng(0)


def check(name, builder, params, eps=1e-5, tol=1e-5):
    rep = nm.grad_check(builder, params, eps)
    status = "ok " if rep.max_rel_error < tol else "FAIL"
    print(f"{status} {name:24s} {rep.max_rel_error:.3e}")
    return rep.max_rel_error < tol


ok = True
x0 = rng.standard_normal((3, 4))
y0 = rng.standard_normal((3, 4))
m34 = rng.standard_normal((3, 4))
m43 = rng.standard_normal((4, 3))
m38 = rng.standard_normal((3, 8))
m524 = rng.standard_normal((5, 2, 4))
m328 = rng.standard_normal((3, 2, 8))
v4 = rng.standard_normal(4)
v3 = rng.standard_normal(3)
m46 = rng.standard_normal((4, 6))

ok &= check("add", lambda g, p: (p["x"] + p["y"]).sum(), {"x": x0, "y": y0})
ok &= check("sub", lambda g, p: ((p["x"] - p["y"]) * m34).sum(), {"x": x0, "y": y0})
ok &= check("mul", lambda g, p: (p["x"] * p["y"]).sum(), {"x": x0, "y": y0})
ok &= check("div", lambda g, p: (p["x"] / (p["y"] * p["y"] + 1.0)).sum(), {"x": x0, "y": y0})
ok &= check("broadcast", lambda g, p: ((p["x"] + p["b"]) * p["c"]).sum(), {"x": x0, "b": rng.standard_normal(4), "c": rng.standard_normal((3, 1))})
ok &= check("exp", lambda g, p: p["x"].exp().sum(), {"x": x0})
ok &= check("log", lambda g, p: (p["x"] * p["x"] + 0.5).log().sum(), {"x": x0})
ok &= check("sqrt", lambda g, p: (p["x"] * p["x"] + 0.5).sqrt().sum(), {"x": x0})
ok &= check("abs", lambda g, p: p["x"].abs().sum(), {"x": x0})
ok &= check("pow", lambda g, p: (p["x"] ** 4).sum(), {"x": x0})
ok &= check("relu", lambda g, p: p["x"].relu().sum(), {"x": x0})
ok &= check("leaky_relu", lambda g, p: (p["x"].leaky_relu() * y0).sum(), {"x": x0})
ok &= check("sigmoid", lambda g, p: (p["x"].sigmoid() * y0).sum(), {"x": x0})
ok &= check("softplus", lambda g, p: (p["x"].softplus() * y0).sum(), {"x": x0})
ok &= check("clamp", lambda g, p: nm.clamp(p["x"], -0.4, 0.4).sum(), {"x": x0})
ok &= check("matmul", lambda g, p: nm.matmul(p["a"], p["b"]).sum(), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))})
ok &= check("transpose", lambda g, p: (p["x"].T * m43).sum(), {"x": x0})
ok &= check("reshape", lambda g, p: (p["x"].reshape((4, 3)) * m43).sum(), {"x": x0})
ok &= check("concat", lambda g, p: (nm.concat([p["x"], p["y"]], axis=1) * m38).sum(), {"x": x0, "y": y0})
idx = rng.integers(0, 3, size=(5, 2))
ok &= check("gather_rows", lambda g, p: (nm.gather_rows(p["x"], idx) * m524).sum(), {"x": x0})
cidx = np.array([0, 2, 1])
nidx = rng.integers(0, 3, size=(3, 2))
ok &= check("neighbor_pairs", lambda g, p: (nm.neighbor_pairs(p["x"], cidx, nidx, diff=True) * m328).sum(), {"x": x0})
ok &= check("neighbor_pairs_nd", lambda g, p: (nm.neighbor_pairs(p["x"], cidx, nidx, diff=False) * m328).sum(), {"x": x0})
ok &= check("sum_axis", lambda g, p: (p["x"].sum(axis=0) * v4).sum(), {"x": x0})
ok &= check("mean_axis", lambda g, p: (p["x"].mean(axis=1) * v3).sum(), {"x": x0})
ok &= check("max_axis", lambda g, p: (p["x"].max(axis=1) * v3).sum(), {"x": x0})
ok &= check("softmax", lambda g, p: (nm.softmax(p["x"], axis=1) * m34).sum(), {"x": x0})
ok &= check("layer_norm", lambda g, p: (nm.layer_norm(p["x"], p["gain"], p["bias"]) * m46).sum(),
            {"x": rng.standard_normal((4, 6)), "gain": rng.uniform(0.5, 1.5, 6), "bias": rng.standard_normal(6)})
ok &= check("l2norm", lambda g, p: nm.l2norm(p["x"]), {"x": x0})

w0 = rng.standard_normal((3, 3))
h0 = rng.standard_normal((3, 3))
ok &= check("procrustes", lambda g, p: (nm.procrustes_rotation(p["h"]) * w0).sum(), {"h": h0}, tol=2e-5)
h1 = rng.standard_normal((3, 3))
h1[:, 0] *= -1
ok &= check("procrustes_neg", lambda g, p: (nm.procrustes_rotation(p["h"]) * w0).sum(), {"h": h1}, tol=2e-5)
ok &= check("procrustes_chain", lambda g, p: nm.l2norm(nm.procrustes_rotation(nm.matmul(p["a"], p["b"])) - np.eye(3)),
            {"a": rng.standard_normal((3, 5)), "b": rng.standard_normal((5, 3))}, tol=2e-5)

print("ALL OK" if ok else "FAILURES PRESENT")
