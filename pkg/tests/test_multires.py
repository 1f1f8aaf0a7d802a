import numpy as np
import pytest

from dbreg import multires as mr
from dbreg import numerics as nm
from dbreg.geometry import PointCloud
from dbreg.multires import (ConfigError, MultiResConfig, build_plan, fuse,
                            interp_weights, interpolate, query_down, stage_update,
                            transition_down, transition_up)
from dbreg.numerics import Graph, ParamStore, grad_check


TINY = MultiResConfig(branches=2, stages=2, k=2, widths=(4, 6), out_dim=6, interp_k=2)


def cloud(rng, n=16):
    return rng.standard_normal((n, 3))


def test_config_validation():
    with pytest.raises(ConfigError):
        MultiResConfig(branches=2, stages=1, k=2, widths=(4,), out_dim=6)
    with pytest.raises(ConfigError):
        MultiResConfig(branches=1, stages=1, k=2, widths=(4,), out_dim=8)


def test_branch_sizes_follow_halving():
    rng = np.random.default_rng(0)
    for n in (13, 16, 21, 64):
        cfg = MultiResConfig(branches=3, stages=1, k=2, widths=(4, 4, 4), out_dim=6)
        if n < cfg.min_points():
            continue
        plan = build_plan(cloud(rng, n), cfg)
        sizes = [b.points.shape[0] for b in plan.branches]
        assert sizes[0] == n
        assert sizes[1] == (n + 1) // 2
        assert sizes[2] == (sizes[1] + 1) // 2


def test_plan_indices_form_chain():
    rng = np.random.default_rng(1)
    cfg = MultiResConfig(branches=3, stages=1, k=2, widths=(4, 4, 4), out_dim=6)
    plan = build_plan(cloud(rng, 32), cfg)
    for l in range(1, 3):
        sub = set(plan.branches[l].indices.tolist())
        sup = set(plan.branches[l - 1].indices.tolist())
        assert sub <= sup
        assert len(sub) == plan.branches[l].indices.size


def test_too_small_cloud_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ConfigError):
        build_plan(cloud(rng, 3), TINY)


def test_transition_down_halves():
    rng = np.random.default_rng(3)
    plan = build_plan(cloud(rng, 8), TINY)
    assert plan.branches[1].points.shape[0] == 4


def test_transition_down_k1_equals_map_output():
    rng = np.random.default_rng(4)
    store = ParamStore()
    nm.add_mlp2(store, "td", 8, 6, 6, rng)
    feats = rng.standard_normal((5, 4))
    centers = np.array([0, 2])
    nbrs = np.array([[1], [3]])  # k = 1
    g = Graph()
    out = transition_down(g, store, "td", g.leaf(feats), centers, nbrs)
    g2 = Graph()
    pair = np.concatenate([feats[centers], feats[nbrs[:, 0]]], axis=1)
    direct = nm.apply_mlp2(g2, store, "td", g2.leaf(pair))
    assert np.abs(out.data - direct.data).max() < 1e-15


def test_transition_down_neighbor_permutation_invariant():
    rng = np.random.default_rng(5)
    store = ParamStore()
    nm.add_mlp2(store, "td", 8, 6, 6, rng)
    feats = rng.standard_normal((7, 4))
    centers = np.array([1, 4])
    nbrs = np.array([[0, 2, 5], [3, 6, 1]])
    g = Graph()
    a = transition_down(g, store, "td", g.leaf(feats), centers, nbrs)
    perm = nbrs[:, [2, 0, 1]]
    g2 = Graph()
    b = transition_down(g2, store, "td", g2.leaf(feats), centers, perm)
    assert np.abs(a.data - b.data).max() < 1e-15


def test_stage_update_identical_features():
    rng = np.random.default_rng(6)
    store = ParamStore()
    nm.add_mlp2(store, "ec", 8, 4, 4, rng)
    feats = np.tile(rng.standard_normal(4), (6, 1))
    knn_idx = np.stack([np.roll(np.arange(6), -i)[:3] for i in range(6)])
    g = Graph()
    out = stage_update(g, store, "ec", g.leaf(feats), knn_idx)
    # identical inputs: every edge difference is zero, so all rows agree
    assert np.abs(out.data - out.data[0]).max() < 1e-15


def test_stage_update_single_point_self_edge():
    rng = np.random.default_rng(7)
    store = ParamStore()
    nm.add_mlp2(store, "ec", 4, 4, 4, rng)
    feats = rng.standard_normal((1, 2))
    g = Graph()
    out = stage_update(g, store, "ec", g.leaf(feats), np.array([[0]]))
    g2 = Graph()
    pair = np.concatenate([feats, np.zeros((1, 2))], axis=1)
    direct = nm.apply_mlp2(g2, store, "ec", g2.leaf(pair))
    assert np.abs(out.data - direct.data).max() < 1e-15


def test_stage_update_permutation_invariance():
    rng = np.random.default_rng(8)
    store = ParamStore()
    nm.add_mlp2(store, "ec", 8, 5, 5, rng)
    feats = rng.standard_normal((6, 4))
    idx = np.array([[1, 2, 3], [0, 2, 4], [5, 1, 0], [2, 4, 5], [3, 0, 1], [4, 2, 3]])
    g = Graph()
    a = stage_update(g, store, "ec", g.leaf(feats), idx)
    g2 = Graph()
    b = stage_update(g2, store, "ec", g2.leaf(feats), idx[:, [1, 2, 0]])
    assert np.abs(a.data - b.data).max() < 1e-15


def _identity_mlp2_params(store, name, w):
    """Exact identity through the leaky-relu pair: y = a*lrelu(x) - a*lrelu(-x)
    with a = 1/(1 + slope) gives back x for slope 0.1."""
    a = 1.0 / 1.1
    store[name + ".l1.w"] = np.concatenate([np.eye(w), -np.eye(w)], axis=1)
    store[name + ".l1.b"] = np.zeros(2 * w)
    store[name + ".l2.w"] = np.concatenate([a * np.eye(w), -a * np.eye(w)], axis=0)
    store[name + ".l2.b"] = np.zeros(w)


def test_identity_map_construction():
    rng = np.random.default_rng(9)
    store = ParamStore()
    _identity_mlp2_params(store, "idm", 5)
    x = rng.standard_normal((7, 5))
    g = Graph()
    out = nm.apply_mlp2(g, store, "idm", g.leaf(x))
    assert np.abs(out.data - x).max() < 1e-12


def test_query_down_identity_map_selects_rows():
    rng = np.random.default_rng(10)
    store = ParamStore()
    _identity_mlp2_params(store, "qd", 6)
    feats = rng.standard_normal((9, 6))
    rows = np.array([7, 0, 3])
    g = Graph()
    out = query_down(g, store, "qd", g.leaf(feats), rows)
    assert np.abs(out.data - feats[rows]).max() < 1e-12


def test_query_down_gather_matches_lookup_oracle():
    rng = np.random.default_rng(11)
    feats = rng.standard_normal((8, 3))
    rows = np.array([2, 2, 5, 0])
    g = Graph()
    got = nm.gather_rows(g.leaf(feats), rows)
    for i, r in enumerate(rows):
        assert np.array_equal(got.data[i], feats[r])


def test_interp_zero_distance_takes_full_weight():
    support = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    query = np.array([[1.0, 0, 0]])
    idx, w = interp_weights(query, support, k=2)
    feats = np.array([[10.0], [20.0], [30.0]])
    g = Graph()
    out = interpolate(g.leaf(feats), idx, w)
    assert np.abs(out.data - 20.0).max() < 1e-15


def test_interp_constant_features():
    rng = np.random.default_rng(12)
    support = rng.standard_normal((6, 3))
    query = rng.standard_normal((4, 3))
    idx, w = interp_weights(query, support, k=3)
    feats = np.tile([1.5, -2.0], (6, 1))
    g = Graph()
    out = interpolate(g.leaf(feats), idx, w)
    assert np.abs(out.data - np.array([1.5, -2.0])).max() < 1e-12


def test_interp_matches_weighted_sum_oracle():
    rng = np.random.default_rng(13)
    support = rng.standard_normal((7, 3))
    query = rng.standard_normal((5, 3))
    feats = rng.standard_normal((7, 4))
    idx, w = interp_weights(query, support, k=3)
    g = Graph()
    out = interpolate(g.leaf(feats), idx, w)
    for i in range(5):
        d = np.linalg.norm(query[i] - support[idx[i]], axis=1)
        raw = 1.0 / d
        expect = (feats[idx[i]] * (raw / raw.sum())[:, None]).sum(axis=0)
        assert np.abs(out.data[i] - expect).max() < 1e-12


def test_interp_consistency_at_support_points():
    rng = np.random.default_rng(14)
    support = rng.standard_normal((6, 3))
    feats = rng.standard_normal((6, 5))
    idx, w = interp_weights(support, support, k=3)
    g = Graph()
    out = interpolate(g.leaf(feats), idx, w)
    assert np.abs(out.data - feats).max() < 1e-12


def test_fuse_single_branch_identity():
    rng = np.random.default_rng(15)
    cfg = MultiResConfig(branches=1, stages=1, k=2, widths=(4,), out_dim=6)
    plan = build_plan(cloud(rng, 8), cfg)
    store = ParamStore()
    g = Graph()
    hat = [g.leaf(rng.standard_normal((8, 4)))]
    out = fuse(g, store, "x", 0, hat, plan)
    assert out[0] is hat[0]


def test_fuse_zero_other_branches():
    rng = np.random.default_rng(16)
    cfg = MultiResConfig(branches=2, stages=2, k=2, widths=(4, 6), out_dim=6)
    pts = cloud(rng, 10)
    plan = build_plan(pts, cfg)
    store = ParamStore()
    mr.init_params(store, "m", cfg, rng)
    g = Graph()
    own = rng.standard_normal((10, 4))
    hat = [g.leaf(own), g.leaf(np.zeros((5, 6)))]
    out = fuse(g, store, "m", 0, hat, plan)
    # zero features through zero-bias maps contribute exactly zero
    assert np.abs(out[0].data - own).max() < 1e-15


def test_fuse_matches_hand_assembly():
    rng = np.random.default_rng(17)
    cfg = MultiResConfig(branches=3, stages=2, k=2, widths=(4, 5, 6), out_dim=6)
    pts = cloud(rng, 16)
    plan = build_plan(pts, cfg)
    store = ParamStore()
    mr.init_params(store, "m", cfg, rng)
    sizes = [b.points.shape[0] for b in plan.branches]
    feats = [rng.standard_normal((s, w)) for s, w in zip(sizes, cfg.widths)]
    g = Graph()
    hat = [g.leaf(f) for f in feats]
    out = fuse(g, store, "m", 0, hat, plan)

    g2 = Graph()
    hat2 = [g2.leaf(f) for f in feats]
    for dst in range(3):
        acc = hat2[dst]
        for src in range(3):
            if src == dst:
                continue
            name = f"m.fuse0.{src}to{dst}"
            if src < dst:
                acc = acc + query_down(g2, store, name, hat2[src], plan.down_rows[(src, dst)])
            else:
                idx, w = plan.up_interp[(src, dst)]
                acc = acc + transition_up(g2, store, name, hat2[src], idx, w)
        assert np.abs(out[dst].data - acc.data).max() < 1e-14


def test_extract_shape_and_determinism():
    rng = np.random.default_rng(18)
    pts = cloud(rng, 12)
    plan = build_plan(pts, TINY)
    store = ParamStore()
    mr.init_params(store, "m", TINY, rng)

    def run():
        g = Graph()
        return mr.extract(g, store, "m", plan, TINY).data.copy()

    a, b = run(), run()
    assert a.shape == (12, 6)
    assert np.array_equal(a, b)


def test_extract_translation_invariant_plan():
    rng = np.random.default_rng(19)
    pts = cloud(rng, 20)
    plan_a = build_plan(pts, TINY)
    plan_b = build_plan(pts + np.array([5.0, -3.0, 2.0]), TINY)
    for ba, bb in zip(plan_a.branches, plan_b.branches):
        assert np.array_equal(ba.indices, bb.indices)
        assert np.array_equal(ba.knn_self, bb.knn_self)
        if ba.down_nbrs is not None:
            assert np.array_equal(ba.down_nbrs, bb.down_nbrs)


def test_extract_finite_on_random_inputs():
    rng = np.random.default_rng(20)
    store = ParamStore()
    mr.init_params(store, "m", TINY, rng)
    for _ in range(1000):
        pts = cloud(rng, 8)
        plan = build_plan(pts, TINY)
        g = Graph()
        out = mr.extract(g, store, "m", plan, TINY)
        assert np.isfinite(out.data).all()


def test_extract_all_maps_pass_grad_check():
    # grad_check pre-registers every parameter on the graph; extract's own
    # g.param calls then hit the cache, so gradients attach to the probes
    rng = np.random.default_rng(21)
    cfg = MultiResConfig(branches=2, stages=2, k=2, widths=(3, 4), out_dim=6)
    pts = cloud(rng, 6)
    plan = build_plan(pts, cfg)
    store = ParamStore()
    mr.init_params(store, "m", cfg, rng)
    target = rng.standard_normal((6, 6))

    def builder(g, params):
        store2 = ParamStore()
        for k, v in params.items():
            store2[k] = v.data
        out = mr.extract(g, store2, "m", plan, cfg)
        return ((out - g.constant(target)) ** 2).mean()

    rep = grad_check(builder, dict(store.items()), eps=1e-5)
    assert rep.max_rel_error < 1e-5, rep
