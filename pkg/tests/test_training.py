import numpy as np
import pytest

from dbreg import dualreg, geometry as geo, overlap, training
from dbreg import numerics as nm
from dbreg.geometry import RigidTransform, euler_zyx_matrix, random_transform
from dbreg.numerics import Graph, ParamStore, grad_check
from dbreg.training import (AdamW, TrainConfig, TrainingError, clip_gradients,
                            correspondence_loss, lr_schedule,
                            registration_distance_loss, total_registration_loss,
                            train_overlap_stage, train_registration_stage,
                            transformation_loss)


def _r(seed=0):
    return np.random.default_rng(seed)


# -- transformation loss -----------------------------------------------------------


def test_transformation_loss_zero_at_gt():
    rng = _r(1)
    for _ in range(1000):
        T = random_transform(rng)
        g = Graph()
        loss = transformation_loss(g, T, g.leaf(T.R), g.leaf(T.t), eps=1.0)
        assert 0 <= float(loss.data) < 1e-9


def test_transformation_loss_translation_offset():
    T = RigidTransform.identity()
    g = Graph()
    loss = transformation_loss(g, T, g.leaf(np.eye(3)), g.leaf(np.array([1.0, 0, 0])), eps=1.0)
    assert abs(float(loss.data) - 1.0) < 1e-12


def test_transformation_loss_180deg_z():
    gt = RigidTransform.identity()
    r180 = euler_zyx_matrix(180.0, 0.0, 0.0)
    g = Graph()
    loss = transformation_loss(g, gt, g.leaf(r180), g.leaf(np.zeros(3)), eps=1.0)
    # R_gt^T R_pred - I = diag(-2, -2, 0): entrywise l1 sums to 4
    assert abs(float(loss.data) - 4.0) < 1e-12


# -- correspondence loss ------------------------------------------------------------


def _augment(c):
    m, n = c.shape
    out = np.zeros((m + 1, n + 1))
    out[:m, :n] = c
    return out


def test_correspondence_loss_perfect_permutation():
    rng = _r(2)
    xp = rng.standard_normal((6, 3))
    T = random_transform(rng)
    perm = rng.permutation(6)
    yp = T.apply(xp)[perm]
    c = np.zeros((6, 6))
    c[np.arange(6), np.argsort(perm)] = 1.0
    g = Graph()
    cv = g.leaf(_augment(c))
    loss = correspondence_loss(g, xp, yp, cv, cv, T)
    assert float(loss.data) < 1e-9


def test_correspondence_loss_uniform_centroid_case():
    rng = _r(3)
    xp = rng.standard_normal((5, 3))
    yp = rng.standard_normal((8, 3))
    yp = yp - yp.mean(axis=0)  # centered target
    c = np.full((5, 8), 1.0 / 8)
    g = Graph()
    cv = g.leaf(_augment(c))
    loss = correspondence_loss(g, xp, yp, cv, cv, RigidTransform.identity())
    expected = np.abs(xp).sum() / 5
    assert abs(float(loss.data) - expected) < 1e-12


def test_correspondence_loss_matches_naive_oracle():
    rng = _r(4)
    xp = rng.standard_normal((7, 3))
    yp = rng.standard_normal((9, 3))
    T = random_transform(rng)
    c1 = rng.uniform(0.01, 1, (7, 9))
    c2 = rng.uniform(0.01, 1, (7, 9))
    g = Graph()
    loss = correspondence_loss(g, xp, yp, g.leaf(_augment(c1)), g.leaf(_augment(c2)), T)

    def one(c):
        rows = c / c.sum(axis=1, keepdims=True)
        total = 0.0
        for i in range(7):
            target = sum(rows[i, j] * yp[j] for j in range(9))
            total += np.abs(T.R @ xp[i] + T.t - target).sum()
        return total / 7

    assert abs(float(loss.data) - 0.5 * (one(c1) + one(c2))) < 1e-12


def test_correspondence_loss_renormalizes_slack_mass():
    rng = _r(5)
    xp = rng.standard_normal((4, 3))
    yp = rng.standard_normal((5, 3))
    T = RigidTransform.identity()
    c = rng.uniform(0.1, 1, (4, 5))
    full = _augment(c)
    full[:4, 5] = 0.5  # slack column mass
    g = Graph()
    loss_with_slack = correspondence_loss(g, xp, yp, g.leaf(full), g.leaf(full), T)
    g2 = Graph()
    loss_plain = correspondence_loss(g2, xp, yp, g2.leaf(_augment(c)), g2.leaf(_augment(c)), T)
    assert abs(float(loss_with_slack.data) - float(loss_plain.data)) < 1e-12


# -- registration distance loss ---------------------------------------------------------


def test_distance_loss_zero_at_gt():
    rng = _r(6)
    pts = rng.standard_normal((10, 3))
    T = random_transform(rng)
    g = Graph()
    loss = registration_distance_loss(g, pts, T, g.leaf(T.R), g.leaf(T.t))
    assert float(loss.data) < 1e-12


def test_distance_loss_translation_offset():
    rng = _r(7)
    pts = rng.standard_normal((6, 3))
    delta = np.array([0.2, -0.4, 1.0])
    T = RigidTransform.identity()
    g = Graph()
    loss = registration_distance_loss(g, pts, T, g.leaf(np.eye(3)), g.leaf(delta))
    assert abs(float(loss.data) - np.abs(delta).sum()) < 1e-12


def test_distance_loss_matches_pointwise_oracle():
    rng = _r(8)
    pts = rng.standard_normal((9, 3))
    gt = random_transform(rng)
    pred = random_transform(rng)
    g = Graph()
    loss = registration_distance_loss(g, pts, gt, g.leaf(pred.R), g.leaf(pred.t))
    total = sum(np.abs((gt.R @ p + gt.t) - (pred.R @ p + pred.t)).sum() for p in pts)
    assert abs(float(loss.data) - total / 9) < 1e-12


# -- total loss ---------------------------------------------------------------------------


def test_total_loss_zero():
    g = Graph()
    z = g.leaf(0.0)
    assert float(total_registration_loss(z, z, z).data) == 0.0


def test_total_loss_weighted_sum():
    g = Graph()
    one = g.leaf(1.0)
    out = total_registration_loss(one, one, one, 1.0, 10.0, 1.0)
    assert float(out.data) == 12.0


def test_total_loss_gradient_is_weighted_sum():
    rng = _r(9)
    x0 = rng.standard_normal(5)

    def part(g, p, k):
        return (p["x"] ** (k + 1)).sum()

    g = Graph()
    p = {"x": g.param("x", x0)}
    total = total_registration_loss(part(g, p, 1), part(g, p, 2), part(g, p, 3), 1.0, 10.0, 1.0)
    grads = g.backward(total)
    expected = 1.0 * 2 * x0 + 10.0 * 3 * x0**2 + 1.0 * 4 * x0**3
    assert np.abs(grads["x"] - expected).max() < 1e-12


def test_all_losses_gradcheck():
    rng = _r(10)
    xp = rng.standard_normal((5, 3))
    yp = rng.standard_normal((6, 3))
    gt = random_transform(rng)

    def builder(g, p):
        r = nm.procrustes_rotation(p["h"])
        t = p["t"]
        lt = transformation_loss(g, gt, r, t, eps=1.0)
        c_full = sinkhorn(g, p)
        lc = correspondence_loss(g, xp, yp, c_full, c_full, gt)
        ld = registration_distance_loss(g, xp, gt, r, t)
        return total_registration_loss(lt, lc, ld)

    def sinkhorn(g, p):
        return dualreg.sinkhorn_normalize(g, p["c"].exp(), iters=3, tol=0.0)

    rep = grad_check(builder, {
        "h": rng.standard_normal((3, 3)),
        "t": rng.standard_normal(3),
        "c": rng.uniform(-1, 1, (5, 6)),
    }, eps=1e-5)
    assert rep.max_rel_error < 1e-5, rep


# -- optimizer -------------------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_keeps_params():
    store = ParamStore()
    store["w"] = np.array([1.0, -2.0])
    opt = AdamW(store, ["w"], lr=0.1, weight_decay=0.0)
    opt.step({"w": np.zeros(2)})
    assert np.array_equal(store["w"], [1.0, -2.0])


def test_adamw_first_step_magnitude():
    store = ParamStore()
    store["w"] = np.array([0.0])
    opt = AdamW(store, ["w"], lr=0.01, weight_decay=0.0)
    opt.step({"w": np.array([3.7])})
    assert abs(abs(store["w"][0]) - 0.01) < 1e-8


def test_adamw_matches_scalar_reference_on_quadratic():
    # independent transcription of the update rule, plain python floats
    lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8
    w_ref, m, v = 1.5, 0.0, 0.0
    store = ParamStore()
    store["w"] = np.array([1.5])
    opt = AdamW(store, ["w"], lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
    for t in range(1, 101):
        grad = 2.0 * w_ref  # d/dw of w^2
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w_ref = w_ref - lr * (mhat / (np.sqrt(vhat) + eps) + wd * w_ref)
        opt.step({"w": 2.0 * store["w"]})
        assert abs(store["w"][0] - w_ref) < 1e-10


def test_gradient_clipping():
    grads = {"a": np.array([3.0, 4.0]), "b": np.zeros(2)}
    clipped = clip_gradients(grads, 1.0)
    norm = np.sqrt(sum((g**2).sum() for g in clipped.values()))
    assert abs(norm - 1.0) < 1e-12
    same = clip_gradients(grads, 100.0)
    assert np.array_equal(same["a"], grads["a"])


# -- schedule ----------------------------------------------------------------------------------


def test_schedule_endpoints():
    assert lr_schedule(0, 100, 0.1, 1e-3) == 0.0
    assert abs(lr_schedule(10, 100, 0.1, 1e-3) - 1e-3) < 1e-15
    assert abs(lr_schedule(100, 100, 0.1, 1e-3)) < 1e-12


def test_schedule_continu_at_junction():
    base = 3e-4
    before = lr_schedule(99, 1000, 0.1, base)
    after = lr_schedule(101, 1000, 0.1, base)
    at = lr_schedule(100, 1000, 0.1, base)
    assert abs(at - base) < 1e-15
    assert before < at
    assert abs(after - at) < base * 0.01


def test_schedule_no_warmup():
    assert abs(lr_schedule(0, 50, 0.0, 1.0) - 1.0) < 1e-15


def test_schedule_range_errors():
    with pytest.raises(TrainingError):
        lr_schedule(-1, 10, 0.1, 1.0)
    with pytest.raises(TrainingError):
        lr_schedule(11, 10, 0.1, 1.0)


# -- stage smoke runs ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(stage="bogus")
    with pytest.raises(TrainingError):
        TrainConfig(lam2=-1.0)
    with pytest.raises(TrainingError):
        TrainConfig(lr=0.0)
    with pytest.raises(TrainingError):
        TrainConfig(eps_overlap=0.0)


def test_overlap_smoke_loss_decreases(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="overlap", epochs=2, batch_size=4, lr=1e-3, seed=0)
    res = train_overlap_stage(tiny_dataset, cfg, tiny_net)
    losses = [r["loss"] for r in res.curves if r["split"] == "train"]
    assert losses[-1] < losses[0]


def test_overlap_smoke_deterministic(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="overlap", epochs=2, batch_size=4, lr=1e-3, seed=3)
    r1 = train_overlap_stage(tiny_dataset, cfg, tiny_net)
    r2 = train_overlap_stage(tiny_dataset, cfg, tiny_net)
    l1 = [r["loss"] for r in r1.curves]
    l2 = [r["loss"] for r in r2.curves]
    assert l1 == l2
    for k in r1.store.names():
        assert np.array_equal(r1.store[k], r2.store[k])


def test_overlap_frozen_reeval_reproduces(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="overlap", epochs=1, batch_size=4, lr=1e-3, seed=4)
    res = train_overlap_stage(tiny_dataset, cfg, tiny_net)
    m1 = training.overlap_eval(res.store, training.prep_pairs(tiny_dataset, tiny_net.overlap.extractor), tiny_net)
    m2 = training.overlap_eval(res.store, training.prep_pairs(tiny_dataset, tiny_net.overlap.extractor), tiny_net)
    assert m1 == m2


@pytest.fixture(scope="module")
def tiny_overlap_ckpt(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="overlap", epochs=1, batch_size=4, lr=1e-3, seed=5)
    res = train_overlap_stage(tiny_dataset, cfg, tiny_net)
    return res.store.subset("overlap.")


def test_registration_stage_freeze_contract(tiny_net, tiny_dataset, tiny_overlap_ckpt):
    cfg = TrainConfig(stage="registration", epochs=1, batch_size=4, lr=1e-3, seed=6)
    before = {k: v.copy() for k, v in tiny_overlap_ckpt.items()}
    leaked = []

    def probe(grads, store):
        for k, v in grads.items():
            if k.startswith("overlap.") and np.abs(v).max() > 0:
                leaked.append(k)

    res = train_registration_stage(tiny_dataset, cfg, tiny_net, tiny_overlap_ckpt,
                                   grad_probe=probe)
    assert not leaked
    for k, v in before.items():
        assert np.array_equal(res.store[k], v), k


def test_registration_stage_requires_overlap_params(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="registration", epochs=1, seed=0)
    with pytest.raises(TrainingError):
        train_registration_stage(tiny_dataset, cfg, tiny_net, {})


def test_registration_smoke_improves_over_untrained(tiny_net, tiny_dataset, tiny_overlap_ckpt):
    cfg = TrainConfig(stage="registration", epochs=3, batch_size=4, lr=1e-3, seed=7)
    res = train_registration_stage(tiny_dataset, cfg, tiny_net, tiny_overlap_ckpt,
                                   val=tiny_dataset)
    # untrained baseline: same init (seed), zero epochs of updates
    store0 = ParamStore()
    for k, v in tiny_overlap_ckpt.items():
        store0[k] = v
    dualreg.init_params(store0, tiny_net.reg, np.random.default_rng(cfg.seed))
    prepped = training.prep_filtered(tiny_dataset, store0, tiny_net)
    untrained = training.registration_eval(store0, prepped, tiny_net)
    trained_loss = [r["loss"] for r in res.curves if r["split"] == "train"]
    assert trained_loss[-1] < trained_loss[0]
    assert res.final_metric["iso_r"] <= untrained["iso_r"] * 1.5 + 5.0


def test_registration_smoke_deterministic(tiny_net, tiny_dataset, tiny_overlap_ckpt):
    cfg = TrainConfig(stage="registration", epochs=1, batch_size=4, lr=1e-3, seed=8)
    r1 = train_registration_stage(tiny_dataset, cfg, tiny_net, tiny_overlap_ckpt)
    r2 = train_registration_stage(tiny_dataset, cfg, tiny_net, tiny_overlap_ckpt)
    assert [r["loss"] for r in r1.curves] == [r["loss"] for r in r2.curves]


def test_joint_stage_runs(tiny_net, tiny_dataset):
    cfg = TrainConfig(stage="registration", epochs=1, batch_size=4, lr=1e-3, seed=9)
    res = training.train_joint_stage(tiny_dataset[:4], cfg, tiny_net)
    assert any(k.startswith("overlap.") for k in res.store.names())
    assert any(k.startswith("reg.") for k in res.store.names())
    assert len([r for r in res.curves if r["split"] == "train"]) == 1
