"""End-to-end reachability runs, neuron selection, backtracking, dumps."""

import numpy as np
import pytest

from latreach import (Hyperplane, InputSpec, LayerDesc, Network, ReachConfig,
                      ModelError, reach, backtrack, select_neurons,
                      result_to_dict, sets_from_dict, validate_set)
from conftest import (batch_forward, check_soundness, completeness_error,
                      dedup_vertex_set, in_union, random_toy_net)


def relu_net(W1, b1, W2, b2, labels):
    W1 = np.asarray(W1, dtype=float)
    W2 = np.asarray(W2, dtype=float)
    return Network((LayerDesc("affine", W1.shape[1], W1.shape[0], W1, b1),
                    LayerDesc("relu", W1.shape[0], W1.shape[0]),
                    LayerDesc("affine", W1.shape[0], W2.shape[0], W2, b2)),
                   W1.shape[1], labels)


def test_select_neurons_counts_and_ranking():
    net = relu_net(np.diag([1.0, -2.0, 0.5]), np.zeros(3),
                   [[1.0, 1.0, 1.0]], [0.0], ("y",))
    spec = InputSpec(np.ones(3), (0, 1, 2), 0.1)
    # relu input at baseline: (1, -2, 0.5); gradient there: (1, 0, 0.5)
    sel = select_neurons(net, spec, 1.0)[1]
    assert sel.selected.tolist() == [True, True, True]
    sel = select_neurons(net, spec, 0.67)[1]
    assert sel.selected.tolist() == [True, False, True]
    sel = select_neurons(net, spec, 0.01)[1]
    assert sel.selected.tolist() == [True, False, False]
    sel = select_neurons(net, spec, 0.0)[1]
    assert sel.selected.tolist() == [False, False, False]


def test_select_neurons_tie_prefers_lower_index():
    net = relu_net(np.diag([1.0, 1.0, 0.5]), np.zeros(3),
                   [[1.0, 1.0, 1.0]], [0.0], ("y",))
    spec = InputSpec(np.ones(3), (0, 1, 2), 0.1)
    sel = select_neurons(net, spec, 0.34)[1]
    assert sel.selected.tolist() == [True, False, False]


def test_reach_affine_only_partitions():
    W = np.array([[2.0], [-1.0]])
    net = Network((LayerDesc("affine", 1, 2, W, [1.0, 0.0]),), 1, ("a", "b"))
    spec = InputSpec(np.zeros(1), (0,), 1.0)
    res = reach(net, spec, ReachConfig(partitions=4))
    assert res.set_count == 4 and res.partitions_done == 4
    assert not res.truncated
    # leaves in spatial order, each mapped through the affine layer
    edges = [(-1.0, -0.5), (-0.5, 0.0), (0.0, 0.5), (0.5, 1.0)]
    for s, (lo, hi) in zip(res.sets, edges):
        want = {(2 * lo + 1.0, -lo), (2 * hi + 1.0, -hi)}
        assert dedup_vertex_set(s) == frozenset(want)
        assert {tuple(v) for v in np.round(s.region_vertices, 9)} \
            == {(lo,), (hi,)}


def test_reach_quadrant_relu_net():
    net = Network((LayerDesc("relu", 2, 2),
                   LayerDesc("affine", 2, 2, np.eye(2), np.zeros(2))),
                  2, ("a", "b"))
    spec = InputSpec(np.zeros(2), (0, 1), 1.0)
    res = reach(net, spec, ReachConfig())
    assert res.set_count == 4
    assert res.counters["splits"] == 3
    assert res.counters["sets_per_layer"] == [4, 4]
    for s in res.sets:
        validate_set(s)


def test_reach_point_input():
    net = relu_net([[2.0, 0.0], [0.0, -1.0]], [0.1, 0.2],
                   np.eye(2), np.zeros(2), ("a", "b"))
    spec = InputSpec(np.array([0.5, 0.3]), (0,), 0.0)
    res = reach(net, spec, ReachConfig())
    assert res.set_count == 1
    want = batch_forward(net, spec.baseline)[0]
    assert np.allclose(res.sets[0].vertices, want, atol=1e-12)


def test_reach_width_mismatch():
    net = relu_net(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), ("a", "b"))
    with pytest.raises(ModelError):
        reach(net, InputSpec(np.zeros(3), (0,), 0.1), ReachConfig())


def test_reach_config_validation():
    with pytest.raises(ValueError):
        ReachConfig(mode="approximate")
    with pytest.raises(ValueError):
        ReachConfig(relaxation=1.5)
    with pytest.raises(ValueError):
        ReachConfig(partitions=0)
    with pytest.raises(ValueError):
        ReachConfig(timeout=0.0)
    with pytest.raises(ValueError):
        ReachConfig(workers=0)


def test_reach_timeout_truncates():
    net, spec = random_toy_net(3)
    res = reach(net, spec, ReachConfig(timeout=1e-6))
    assert res.truncated
    assert res.set_count == 0


def test_reach_max_sets_truncates():
    net = Network((LayerDesc("relu", 4, 4),
                   LayerDesc("affine", 4, 2, np.ones((2, 4)), np.zeros(2))),
                  4, ("a", "b"))
    spec = InputSpec(np.zeros(4), (0, 1, 2, 3), 1.0)
    full = reach(net, spec, ReachConfig())
    assert full.set_count == 16 and not full.truncated
    capped = reach(net, spec, ReachConfig(max_sets=10))
    assert capped.truncated
    assert capped.set_count <= 10


def test_reach_soundness_and_completeness_random(rng):
    for seed in range(6):
        net, spec = random_toy_net(seed)
        res = reach(net, spec, ReachConfig())
        assert not res.truncated
        assert completeness_error(net, res.sets) <= 1e-7
        covered = check_soundness(net, spec, res.sets, 400, 1e-6, rng)
        assert covered.all()


def test_reach_partitions_cover_same_image(rng):
    net, spec = random_toy_net(7)
    one = reach(net, spec, ReachConfig())
    four = reach(net, spec, ReachConfig(partitions=4))
    assert four.partitions_done == 4
    X = rng.uniform(-1, 1, size=(200, len(net.labels)))
    # sample boundary-ish points from the unpartitioned output sets instead
    pts = np.vstack([s.vertices for s in one.sets])
    assert in_union(four.sets, pts, 1e-7).all()
    pts4 = np.vstack([s.vertices for s in four.sets])
    assert in_union(one.sets, pts4, 1e-7).all()
    del X


def test_reach_workers_match_sequential():
    net, spec = random_toy_net(11)
    seq = reach(net, spec, ReachConfig(partitions=4, workers=1))
    par = reach(net, spec, ReachConfig(partitions=4, workers=2))
    assert par.partitions_done == 4
    a = sorted(sorted(dedup_vertex_set(s)) for s in seq.sets)
    b = sorted(sorted(dedup_vertex_set(s)) for s in par.sets)
    assert a == b
    assert par.counters["splits"] == seq.counters["splits"]


def test_fast_outputs_inside_exact(rng):
    for seed in (0, 2, 5, 9):
        net, spec = random_toy_net(seed)
        exact = reach(net, spec, ReachConfig())
        fast = reach(net, spec, ReachConfig(mode="fast", relaxation=0.3))
        assert 1 <= fast.set_count <= exact.set_count
        for s in fast.sets:
            assert in_union(exact.sets, s.vertices, 1e-6).all()
            assert in_union(exact.sets, s.region_vertices, 1e-6,
                            use_region=True).all()


def test_fast_full_relaxation_equals_exact():
    for seed in (1, 4):
        net, spec = random_toy_net(seed)
        exact = reach(net, spec, ReachConfig())
        fast = reach(net, spec, ReachConfig(mode="fast", relaxation=1.0))
        a = sorted(sorted(dedup_vertex_set(s)) for s in exact.sets)
        b = sorted(sorted(dedup_vertex_set(s)) for s in fast.sets)
        assert a == b


def test_fast_set_count_monotone_in_relaxation():
    net = relu_net(np.array([[1.0, 0.4], [-0.6, 1.0], [0.5, -0.8]]),
                   [0.05, -0.02, 0.0],
                   np.array([[1.0, -1.0, 0.5], [0.2, 0.7, -0.3]]),
                   [0.0, 0.0], ("a", "b"))
    spec = InputSpec(np.zeros(2), (0, 1), 1.0)
    counts = [reach(net, spec,
                    ReachConfig(mode="fast", relaxation=d)).set_count
              for d in (0.0, 0.34, 0.67, 1.0)]
    assert counts == sorted(counts)
    assert counts[0] == 1
    assert counts[-1] == reach(net, spec, ReachConfig()).set_count


def test_backtrack_no_constraints_returns_region():
    net, spec = random_toy_net(2)
    res = reach(net, spec, ReachConfig())
    s = res.sets[0]
    back = backtrack(s, [])
    assert back is not None
    assert np.array_equal(back.vertices, s.region_vertices)
    assert np.array_equal(back.region_vertices, s.region_vertices)


def test_backtrack_unreachable_constraint():
    net = relu_net([[2.0]], [0.0], [[0.5]], [0.0], ("y",))
    spec = InputSpec(np.zeros(1), (0,), 1.0)
    res = reach(net, spec, ReachConfig())
    # output never exceeds 1: y >= 2 excludes every set
    h = Hyperplane(np.array([1.0]), -2.0)
    assert all(backtrack(s, [h]) is None for s in res.sets)


def test_backtrack_threshold_endpoints():
    # y = 0.5 * relu(2x) = max(0, x) on x in [-1, 1]; y >= 0.5 <=> x >= 0.5
    net = relu_net([[2.0]], [0.0], [[0.5]], [0.0], ("y",))
    spec = InputSpec(np.zeros(1), (0,), 1.0)
    res = reach(net, spec, ReachConfig())
    assert res.set_count == 2
    h = Hyperplane(np.array([1.0]), -0.5)
    regions = [backtrack(s, [h]) for s in res.sets]
    kept = [b for b in regions if b is not None]
    assert len(kept) == 1
    xs = sorted(float(v) for v in kept[0].vertices[:, 0])
    assert xs == pytest.approx([0.5, 1.0], abs=1e-9)
    validate_set(kept[0])


def test_backtrack_two_constraints_box():
    net = Network((LayerDesc("affine", 2, 2, np.eye(2), np.zeros(2)),),
                  2, ("a", "b"))
    spec = InputSpec(np.zeros(2), (0, 1), 1.0)
    res = reach(net, spec, ReachConfig())
    hs = [Hyperplane(np.array([1.0, 0.0]), -0.25),
          Hyperplane(np.array([0.0, -1.0]), 0.5)]
    back = backtrack(res.sets[0], hs)
    got = {tuple(v) for v in np.round(back.vertices, 9)}
    assert got == {(0.25, -1.0), (1.0, -1.0), (0.25, 0.5), (1.0, 0.5)}


def test_result_dump_roundtrip():
    net, spec = random_toy_net(5)
    res = reach(net, spec, ReachConfig())
    doc = result_to_dict(res, "exact", 1.0)
    assert set(doc) == {"mode", "relaxation", "sets", "set_count",
                        "wall_time_s", "truncated"}
    assert doc["mode"] == "exact" and doc["set_count"] == res.set_count
    assert doc["truncated"] is False
    import json
    doc = json.loads(json.dumps(doc))  # must survive JSON serialization
    rebuilt = sets_from_dict(doc)
    assert len(rebuilt) == len(res.sets)
    for s, r in zip(res.sets, rebuilt):
        assert np.allclose(s.vertices, r.vertices, atol=0)
        assert np.allclose(s.region_vertices, r.region_vertices, atol=0)
        assert s.lattice.n_faces == r.lattice.n_faces
        validate_set(r)
