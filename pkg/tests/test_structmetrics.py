import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

import shapes
from avdiffusion.structmetrics import (auc, build_vessel_graph, channel_report, count_components, count_holes,
                                       empty_sample_rate, pixel_metrics, skeletonize, struct_report)
from avdiffusion.synthvessel import AVMask, VesselTreeConfig, generate_dataset


def brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def random_blobs(rng, size=24, p=0.45, smooth=1):
    img = rng.random((size, size)) < p
    img = ndimage.binary_opening(img, iterations=smooth)
    return img.astype(np.uint8)


# ---------------------------------------------------------------- skeleton


def test_skeleton_examples():
    assert not skeletonize(np.zeros((5, 5))).any()
    one = np.zeros((5, 5), np.uint8)
    one[2, 3] = 1
    np.testing.assert_array_equal(skeletonize(one), one)
    bar = np.zeros((7, 15), np.uint8)
    bar[2:5, 2:13] = 1
    sk = skeletonize(bar)
    assert sk[:, 4:11].sum(axis=0).max() == 1
    assert count_components(sk) == count_components(bar) == 1


@pytest.mark.parametrize("seed", range(40))
def test_skeleton_preserves_topology(seed):
    img = random_blobs(np.random.default_rng(seed))
    sk = skeletonize(img)
    assert count_components(sk) == count_components(img)
    assert count_holes(sk) == count_holes(img)
    assert not (sk & ~img.astype(bool)).any()


# ---------------------------------------------------------------- graph


def test_graph_examples():
    two = np.zeros((5, 5), np.uint8)
    two[1, 1] = two[2, 2] = 1
    assert len(build_vessel_graph(two, 1).edges) == 1
    far = np.zeros((5, 5), np.uint8)
    far[0, 0] = far[3, 0] = 1
    assert len(build_vessel_graph(far, 1).edges) == 0
    assert len(build_vessel_graph(far, 3, prune_corners=False).edges) == 1
    line = np.zeros((3, 12), np.uint8)
    line[1, 1:11] = 1
    g = build_vessel_graph(line, 1)
    assert len(g.edges) == 9
    assert sorted(g.degree) == [1, 1] + [2] * 8
    with pytest.raises(ValueError):
        build_vessel_graph(line, 0)


def test_corner_pruning_removes_triangle():
    ell = np.zeros((4, 4), np.uint8)
    ell[1, 1] = ell[1, 2] = ell[2, 1] = 1
    raw = build_vessel_graph(ell, 1, prune_corners=False)
    pruned = build_vessel_graph(ell, 1)
    assert raw.cycle_rank() == 1 and pruned.cycle_rank() == 0
    assert pruned.component_count() == raw.component_count() == 1


@pytest.mark.parametrize("radius, prune", [(1, True), (1, False), (2, False), (3, False)])
def test_graph_edges_are_exactly_the_window_pairs(radius, prune):
    rng = np.random.default_rng(radius)
    for _ in range(20):
        sk = (rng.random((9, 9)) < 0.3).astype(np.uint8)
        g = build_vessel_graph(sk, radius, prune_corners=prune)
        edges = {tuple(e) for e in g.edges.tolist()}
        assert len(edges) == len(g.edges)
        assert all(i < j for i, j in edges)
        for i, j in edges:
            assert np.abs(g.vertices[i] - g.vertices[j]).max() <= radius
        if not prune:
            want = {(i, j) for i, j in itertools.combinations(range(len(g.vertices)), 2)
                    if np.abs(g.vertices[i] - g.vertices[j]).max() <= radius}
            assert edges == want


@pytest.mark.parametrize("seed", range(30))
def test_cycle_rank_matches_networkx(seed):
    rng = np.random.default_rng(seed)
    sk = (rng.random((12, 12)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
    for radius, prune in ((1, True), (1, False), (2, False)):
        g = build_vessel_graph(sk, radius, prune_corners=prune)
        G = nx.Graph()
        G.add_nodes_from(range(len(g.vertices)))
        G.add_edges_from(g.edges.tolist())
        assert g.component_count() == nx.number_connected_components(G)
        assert g.cycle_rank() == len(nx.cycle_basis(G))


@pytest.mark.parametrize("seed", range(20))
def test_pruning_keeps_eight_connectivity(seed):
    img = random_blobs(np.random.default_rng(seed), p=0.5, smooth=0)
    assert build_vessel_graph(img, 1).component_count() == count_components(img)


# ---------------------------------------------------------------- reports


def test_empty_report():
    r = struct_report(AVMask.empty(8, 8))
    assert r.empty_flag
    for ch in (r.artery, r.vein):
        assert (ch.component_count, ch.branch_point_count, ch.trifurcation_count, ch.loop_count) == (0, 0, 0, 0)
    assert r.crossing_pixel_count == 0


@pytest.mark.parametrize("name", sorted(shapes.CHANNEL_FIXTURES))
def test_hand_built_fixtures(name):
    make, comps, branches, loops = shapes.CHANNEL_FIXTURES[name]
    r = struct_report(shapes.as_mask(make()))
    assert (r.artery.component_count, r.artery.branch_point_count, r.artery.loop_count) == (comps, branches, loops)
    assert r.vein.component_count == 0 and r.crossing_pixel_count == 0


def test_crossing_pair():
    r = struct_report(shapes.crossing_pair())
    assert r.crossing_pixel_count == 1
    assert r.artery.component_count == r.vein.component_count == 1
    assert r.artery.branch_point_count == r.vein.branch_point_count == 0


def test_plus_shape_is_a_trifurcation():
    a = shapes.blank()
    a[10, 5:16] = 1
    a[5:16, 10] = 1
    c = channel_report(a)
    assert c.branch_point_count == 1 and c.trifurcation_count == 1 and c.loop_count == 0


def test_empty_flag_threshold():
    a = shapes.blank()
    a[0, :3] = 1  # 3/400 = 0.75 %
    assert not struct_report(shapes.as_mask(a)).empty_flag
    assert struct_report(shapes.as_mask(a), empty_threshold=0.01).empty_flag


def test_report_json_fields():
    d = struct_report(shapes.crossing_pair()).to_dict()
    assert set(d) == {"artery", "vein", "crossing_pixel_count", "foreground_fraction", "empty_flag"}
    assert set(d["artery"]) == {"component_count", "branch_point_count", "trifurcation_count", "loop_count",
                                "foreground_fraction"}


_DATA = generate_dataset(12, VesselTreeConfig(), rng=1)


@given(st.sampled_from(range(len(_DATA))), st.integers(-8, 8), st.integers(-8, 8))
def test_report_translation_invariant(i, dy, dx):
    m = _DATA[i]
    big = np.zeros((2, 48, 48), np.uint8)
    big[:, 8:40, 8:40] = m.to_array()
    a = AVMask.from_array(big)
    b = AVMask.from_array(np.roll(big, (dy, dx), axis=(1, 2)))
    ra, rb = struct_report(a).to_dict(), struct_report(b).to_dict()
    assert ra == rb
    assert struct_report(a).to_dict() == ra


@pytest.mark.parametrize("seed", range(20))
def test_loop_count_equals_cycle_rank(seed):
    img = random_blobs(np.random.default_rng(100 + seed))
    c = channel_report(img)
    g = build_vessel_graph(skeletonize(img))
    assert c.loop_count == len(g.edges) - len(g.vertices) + g.component_count() >= 0


# ---------------------------------------------------------------- pixel metrics


def test_pixel_metrics_examples():
    gt = np.zeros((4, 5), np.uint8)
    gt[1, 1:4] = 1
    m = pixel_metrics(gt, gt)
    assert (m.accuracy, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)
    m = pixel_metrics(np.zeros_like(gt), gt)
    assert (m.sensitivity, m.specificity) == (0.0, 1.0)
    assert m.accuracy == pytest.approx(17 / 20)
    assert pixel_metrics(gt, np.zeros_like(gt)).sensitivity is None
    with pytest.raises(ValueError):
        pixel_metrics(gt, gt.T)


@given(st.integers(0, 2**32 - 1))
def test_pixel_metric_identities(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((2, 6, 7)) < rng.random(2)[:, None, None]
    m = pixel_metrics(pred, gt)
    assert m.tp + m.tn + m.fp + m.fn == 42
    assert m.accuracy == (m.tp + m.tn) / 42
    if m.tp + m.fn:
        assert m.sensitivity == m.tp / (m.tp + m.fn)
    if m.tn + m.fp:
        assert m.specificity == m.tn / (m.tn + m.fp)


# ---------------------------------------------------------------- auc


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1])


@given(st.integers(0, 2**32 - 1))
def test_auc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.standard_normal(n)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    assert abs(auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_auc_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    n = 40
    scores = rng.integers(-5, 6, n) / 2.0
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    ref = auc(scores, labels)
    for f in (lambda s: 3 * s + 1, np.exp, lambda s: s ** 3, np.arctan):
        assert auc(f(scores), labels) == ref


# ---------------------------------------------------------------- empty rate


def test_empty_sample_rate_examples():
    empty = AVMask.empty(10, 10)
    full = AVMask(np.ones((10, 10), np.uint8), np.zeros((10, 10), np.uint8))
    assert empty_sample_rate([empty] * 4, 0.005) == 1.0
    assert empty_sample_rate([full] * 4, 0.005) == 0.0
    assert empty_sample_rate([empty] * 3 + [full] * 7, 0.005) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        empty_sample_rate([])
