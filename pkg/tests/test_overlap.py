import math

import numpy as np
import pytest

from dbreg import multires, overlap
from dbreg import numerics as nm
from dbreg.attention import positional_encode
from dbreg.geometry import PointCloud
from dbreg.numerics import Graph, ParamStore, grad_check
from dbreg.overlap import focal_loss, predict_overlap, threshold_mask


def _make_store(net, seed=0):
    store = ParamStore()
    overlap.init_params(store, net.overlap, np.random.default_rng(seed))
    return store


def test_prediction_shapes_and_range(tiny_net, rng):
    store = _make_store(tiny_net)
    X = PointCloud(rng.standard_normal((10, 3)))
    Y = PointCloud(rng.standard_normal((14, 3)))
    px, py = predict_overlap(store, X, Y, tiny_net.overlap)
    assert px.probs.shape == (10,)
    assert py.probs.shape == (14,)
    for p in (px, py):
        assert (p.probs >= 0).all() and (p.probs <= 1).all()
        assert set(np.unique(p.mask)) <= {0, 1}


def test_probs_in_unit_interval_many(tiny_net):
    rng = np.random.default_rng(0)
    store = _make_store(tiny_net)
    d = tiny_net.overlap.extractor.out_dim
    for _ in range(25):
        pts = rng.standard_normal((8, 3))
        plan = multires.build_plan(pts, tiny_net.overlap.extractor)
        pe = positional_encode(pts, d)
        g = Graph()
        px, py = overlap.overlap_logits(g, store, tiny_net.overlap, plan, plan, pe, pe)
        assert (px.data > 0).all() and (px.data < 1).all()


def test_identical_clouds_symmetric_outputs(tiny_net, rng):
    store = _make_store(tiny_net)
    pts = rng.standard_normal((12, 3))
    px, py = predict_overlap(store, PointCloud(pts), PointCloud(pts), tiny_net.overlap)
    assert np.abs(px.probs - py.probs).max() < 1e-12


def test_permutation_equivariance(tiny_net):
    rng = np.random.default_rng(3)
    store = _make_store(tiny_net)
    xs = rng.standard_normal((11, 3))
    ys = rng.standard_normal((9, 3))
    px, _ = predict_overlap(store, PointCloud(xs), PointCloud(ys), tiny_net.overlap)
    perm = rng.permutation(11)
    px2, _ = predict_overlap(store, PointCloud(xs[perm]), PointCloud(ys), tiny_net.overlap)
    assert np.abs(px2.probs - px.probs[perm]).max() < 1e-9


def test_threshold_all_ones():
    mask, kept = threshold_mask(np.ones(10), 0.5, 4)
    assert mask.sum() == 10
    assert np.array_equal(kept, np.arange(10))


def test_threshold_fallback_floor():
    probs = np.linspace(0.0, 0.4, 20)  # nothing reaches tau
    mask, kept = threshold_mask(probs, 0.5, 6)
    assert mask.sum() == 6
    assert set(kept.tolist()) == set(np.argsort(-probs, kind="stable")[:6].tolist())


def test_threshold_matches_comparison_oracle():
    rng = np.random.default_rng(4)
    probs = rng.uniform(0, 1, 50)
    mask, kept = threshold_mask(probs, 0.5, 4)
    expected = (probs >= 0.5).astype(np.uint8)
    if expected.sum() >= 4:
        assert np.array_equal(mask, expected)
    assert np.array_equal(kept, np.nonzero(mask)[0])


def test_threshold_mask_invariant_when_no_fallback():
    rng = np.random.default_rng(5)
    probs = rng.uniform(0.4, 1.0, 30)
    mask, _ = threshold_mask(probs, 0.5, 2)
    assert all((m == 1) == (p >= 0.5) for m, p in zip(mask, probs))


def test_focal_loss_perfect_prediction():
    g = Graph()
    probs = g.leaf(np.ones(4))
    loss = focal_loss(g, probs, np.ones(4), alpha=1.0, gamma=4.0)
    assert float(loss.data) < 1e-12


def test_focal_loss_gamma0_is_half_bce():
    rng = np.random.default_rng(6)
    p0 = rng.uniform(0.05, 0.95, 12)
    labels = (rng.uniform(size=12) < 0.5).astype(float)
    g = Graph()
    loss = focal_loss(g, g.leaf(p0), labels, alpha=0.5, gamma=0.0)
    bce = -(labels * np.log(p0) + (1 - labels) * np.log(1 - p0)).mean()
    assert abs(float(loss.data) - 0.5 * bce) < 1e-12


def test_focal_loss_scalar_oracle():
    # single positive at p = 0.5, alpha 1, gamma 4: (1-p)^4 * (-log p)
    expected = 0.5**4 * -math.log(0.5)
    g = Graph()
    loss = focal_loss(g, g.leaf(np.array([0.5])), np.array([1.0]), alpha=1.0, gamma=4.0)
    assert abs(float(loss.data) - expected) < 1e-12
    assert abs(expected - 0.043322) < 5e-7


def test_focal_loss_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p0 = rng.uniform(0, 1, 9)
        labels = (rng.uniform(size=9) < 0.6).astype(float)
        g = Graph()
        loss = focal_loss(g, g.leaf(p0), labels, alpha=rng.uniform(0, 1), gamma=rng.uniform(0, 5))
        assert float(loss.data) >= 0


def test_focal_loss_monotone_for_positives():
    labels = np.ones(1)
    vals = []
    for p in np.linspace(0.05, 0.95, 19):
        g = Graph()
        vals.append(float(focal_loss(g, g.leaf(np.array([p])), labels, 0.5, 4.0).data))
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_focal_loss_rejects_bad_labels():
    g = Graph()
    with pytest.raises(ValueError):
        focal_loss(g, g.leaf(np.array([0.5])), np.array([0.3]))


def test_focal_loss_gradient_through_head():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 3))
    labels = (rng.uniform(size=6) < 0.5).astype(float)

    def builder(g, p):
        probs = nm.sigmoid(nm.matmul(g.constant(x), p["w"]) + p["b"]).reshape((6,))
        return focal_loss(g, probs, labels, alpha=0.5, gamma=4.0)

    rep = grad_check(builder, {"w": rng.standard_normal((3, 1)), "b": rng.standard_normal(1)})
    assert rep.max_rel_error < 1e-5


def test_focal_gradient_through_full_module(tiny_net):
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((8, 3))
    plan = multires.build_plan(pts, tiny_net.overlap.extractor)
    pe = positional_encode(pts, tiny_net.overlap.extractor.out_dim)
    labels = (rng.uniform(size=8) < 0.5).astype(float)
    store = _make_store(tiny_net)
    # probe a slice of the parameters to keep the finite differencing cheap
    probe = {k: store[k] for k in ["overlap.head.l2.w", "overlap.head.l2.b",
                                   "overlap.att.blk0.cross.q.w", "overlap.ext.proj.w"]}

    def builder(g, params):
        store2 = ParamStore()
        for k, v in store.items():
            store2[k] = v
        for k, v in params.items():
            store2[k] = v.data
        px, py = overlap.overlap_logits(g, store2, tiny_net.overlap, plan, plan, pe, pe)
        return 0.5 * (focal_loss(g, px, labels, 0.5, 4.0) + focal_loss(g, py, labels, 0.5, 4.0))

    rep = grad_check(builder, probe, eps=1e-5)
    assert rep.max_rel_error < 1e-5, rep
