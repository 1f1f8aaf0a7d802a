import numpy as np
import time

def sinkhorn_np(c, iters, tol=1e-6, slack=True):
    m, n = c.shape
    M = c.copy()
    if slack:
        M = np.concatenate([M, np.ones((m, 1))], axis=1)
        M = np.concatenate([M, np.ones((1, n + 1))], axis=0)
    it_used = 0
    for it in range(iters):
        M[:m, :] /= M[:m, :].sum(axis=1, keepdims=True)
        M[:, :n] /= M[:, :n].sum(axis=0, keepdims=True)
        it_used = it + 1
        rd = np.abs(M[:m, :].sum(axis=1) - 1).max()
        cd = np.abs(M[:, :n].sum(axis=0) - 1).max()
        if max(rd, cd) < tol:
            break
    return M, it_used, max(rd, cd)

rng = np.random.default_rng(0)
worst = {}
for trial in range(300):
    m = rng.integers(4, 65)
    n = rng.integers(4, 49)
    c = rng.uniform(0.0, 1.0, (m, n)) + 1e-6
    for iters in (5, 10, 20, 50, 100):
        M, used, dev = sinkhorn_np(c, iters)
        worst[iters] = max(worst.get(iters, 0), dev)
print("uniform(0,1] worst dev by budget:", {k: f"{v:.2e}" for k, v in worst.items()})

# annealed-style matrices: exp(-beta(d - alpha)) with untrained-ish spread
worst = {}
for trial in range(100):
    m, n = 180, 180
    d = rng.uniform(0, 8, (m, n))
    beta = rng.uniform(0.5, 3)
    alpha = rng.uniform(0, 2)
    c = np.exp(np.clip(-beta * (d - alpha), -50, 50))
    for iters in (5, 10, 20, 50, 100):
        M, used, dev = sinkhorn_np(c, iters)
        worst[iters] = max(worst.get(iters, 0), dev)
print("annealed 180x180 worst dev by budget:", {k: f"{v:.2e}" for k, v in worst.items()})
