import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bounded_attention.bounded import AttentionRecord, SubjectMasks, coarse_masks
from bounded_attention.errors import NoRecords, ZeroMass
from bounded_attention.refinement import (RefinementConfig, assign_clusters, cross_attention_masks, iom,
                                          is_refinement_step, kmeans, refine, self_attention_features)

from helpers import iou, planted


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def soft_mask_oracle(a, s=10.0, sigma=0.2):
    """Literal per-element evaluation of the soft threshold."""
    total = sum(a)
    soft = [sig(s * (v / total) - sigma) for v in a]
    z = sum(soft)
    return np.array([v / z for v in soft])


def iom_oracle(m, c):
    inter = sum(mi * ci for mi, ci in zip(m, c))
    return inter / min(sum(m), sum(c))


def rec(kind, attn, layer=0, head=0):
    return AttentionRecord(layer, head, kind, None, None, None, None, np.asarray(attn, float))


# features

def test_features_identity_idempotent_mean():
    a = np.random.default_rng(0).random((4, 4))
    b = np.random.default_rng(1).random((4, 4))
    assert np.array_equal(self_attention_features([rec("self", a)]), a)
    np.testing.assert_allclose(self_attention_features([rec("self", a, 0), rec("self", a, 1)]), a, atol=1e-15)
    np.testing.assert_allclose(self_attention_features([rec("self", a, 0), rec("self", b, 1)]), (a + b) / 2)
    with pytest.raises(NoRecords):
        self_attention_features([rec("cross", a)])


# kmeans

def test_kmeans_identical_rows():
    res = kmeans(np.tile([1.0, 2.0, 3.0], (6, 1)), 1)
    np.testing.assert_allclose(res.centers[0], [1, 2, 3])
    assert res.inertia_history[-1] == 0.0


def test_kmeans_two_groups():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, (20, 3))
    b = rng.normal(5, 0.1, (30, 3))
    res = kmeans(np.vstack([a, b]), 2, seed=1)
    got = sorted(res.centers.tolist(), key=lambda c: c[0])
    np.testing.assert_allclose(got, [a.mean(0), b.mean(0)], atol=1e-12)


def test_kmeans_warm_start_fixed_point():
    x = np.random.default_rng(2).random((40, 5))
    first = kmeans(x, 3, seed=0)
    again = kmeans(x, 3, init_centers=first.centers)
    assert again.n_iter == 1 and np.array_equal(again.assignment, first.assignment)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (25, 3), elements=st.floats(-5, 5)), st.integers(1, 5), st.integers(0, 10))
def test_kmeans_properties(x, K, seed):
    a = kmeans(x, K, seed=seed)
    b = kmeans(x, K, seed=seed)
    assert np.array_equal(a.assignment, b.assignment)
    assert a.assignment.shape == (25,) and set(a.assignment) <= set(range(K))
    h = np.array(a.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h.max()))


# soft cross masks

def test_cross_mask_examples():
    np.testing.assert_allclose(cross_attention_masks(np.ones(4)), [0.25] * 4, atol=1e-15)
    got = cross_attention_masks(np.array([1.0, 0, 0, 0]))
    hi, lo = sig(9.8), sig(-0.2)
    np.testing.assert_allclose(got, np.array([hi, lo, lo, lo]) / (hi + 3 * lo), atol=1e-12)
    np.testing.assert_allclose(got, [0.425428, 0.191524, 0.191524, 0.191524], atol=1e-6)
    with pytest.raises(ZeroMass):
        cross_attention_masks(np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 9, elements=st.floats(0, 10)).filter(lambda a: a.sum() > 1e-6),
       st.floats(0.5, 20), st.floats(0.05, 0.9), st.floats(0.1, 100))
def test_cross_mask_oracle_and_scale_invariance(a, s, sigma, scale):
    m = cross_attention_masks(a, s, sigma)
    np.testing.assert_allclose(m, soft_mask_oracle(a, s, sigma), atol=1e-12)
    assert np.all(m > 0) and abs(m.sum() - 1) < 1e-12
    assert np.array_equal(cross_attention_masks(a * 2.0, s, sigma), m)


# iom

def test_iom_examples():
    c = np.array([1, 1, 0, 0], float)
    assert iom(c / c.sum(), c) == 1.0
    assert iom(np.array([0, 0, 1.0, 1.0]), c) == 0.0
    assert iom(np.array([0.5, 0.5, 0, 0]), np.array([1, 0, 0, 1.0])) == 0.5
    with pytest.raises(ZeroMass):
        iom(np.zeros(4), c)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 12, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-6),
       hnp.arrays(np.bool_, 12).filter(lambda c: c.any()), hnp.arrays(np.bool_, 12).filter(lambda c: c.any()))
def test_iom_properties(m, c, d):
    v = iom(m, c)
    assert v == pytest.approx(iom_oracle(m, c.astype(float)), abs=1e-12)
    assert 0 <= v <= 1 + 1e-12
    assert iom(c, d) == pytest.approx(iom(d, c), abs=1e-15)
    assert iom(c, c) == 1.0


# cluster assignment

def test_assign_matching_clusters():
    C = np.array([[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]], bool)
    M = np.array([[0.5, 0.5, 0, 0, 0, 0], [0, 0, 0.5, 0.5, 0, 0]])
    masks, labels = assign_clusters(C, M, binarize_cross=False)
    assert labels.tolist() == [0, 1, -1]
    assert np.array_equal(masks.flat, C[:2])


def test_assign_below_threshold_is_background():
    C = np.array([[1, 0, 0, 0], [0, 1, 1, 1]], bool)
    M = np.array([[0.1, 0.0, 0.0, 0.9]])
    _, labels = assign_clusters(C, M, sigma_cluster=0.2, coarse=SubjectMasks(np.ones((1, 2, 2), bool)),
                                binarize_cross=False)
    assert labels.tolist() == [-1, 0]


def test_assign_matches_brute_force_8x8():
    rng = np.random.default_rng(4)
    C = np.zeros((3, 64), bool)
    C[0, :20], C[1, 20:45], C[2, 45:] = True, True, True
    M = np.stack([cross_attention_masks(rng.random(64) * np.r_[np.full(20, 5), np.ones(44)]),
                  cross_attention_masks(rng.random(64) * np.r_[np.ones(45), np.full(19, 5)])])
    for binar in (False, True):
        _, labels = assign_clusters(C, M, 0.2, SubjectMasks(np.ones((2, 8, 8), bool)), binar)
        Mb = np.stack([m > m.sum() / m.size for m in M]).astype(float) if binar else M
        table = np.array([[iom_oracle(Mb[i], C[j].astype(float)) for i in range(2)] for j in range(3)])
        want = [int(np.argmax(r)) if r.max() >= 0.2 else -1 for r in table]
        assert labels.tolist() == want


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 8))
def test_refined_masks_disjoint_nonempty(seed, n, K):
    rng = np.random.default_rng(seed)
    assign = rng.integers(0, K, 36)
    C = np.stack([assign == k for k in range(K)])
    M = rng.random((n, 36))
    boxes = rng.random((n, 6, 6)) < 0.5
    boxes[:, 0, 0] = True
    coarse = SubjectMasks(boxes)
    masks, _ = assign_clusters(C, M, 0.2, coarse)
    assert masks.flat.any(1).all()
    # overlap only arises from a fallback subject whose whole box was already claimed
    fallback = [i for i in range(n) if np.array_equal(masks.flat[i], coarse.flat[i])]
    shared = masks.flat.sum(0) > 1
    for x in np.flatnonzero(shared):
        assert any(masks.flat[i, x] for i in fallback)


# refine

def test_refine_off_cadence_returns_previous():
    lab, scene, recs = planted(0, 2)
    prev = coarse_masks(scene)
    out, centers = refine(17, recs, scene, prev, "c", RefinementConfig(), start_step=16)
    assert out is prev and centers == "c"
    assert is_refinement_step(16, 16, 5) and is_refinement_step(21, 16, 5) and not is_refinement_step(15, 16, 5)


def test_refine_reuses_centers_fixed_point():
    lab, scene, recs = planted(3, 2)
    coarse = coarse_masks(scene)
    cfg = RefinementConfig()
    m1, c1 = refine(16, recs, scene, coarse, None, cfg, coarse, start_step=16, n_blocks=3)
    m2, c2 = refine(21, recs, scene, m1, c1, cfg, coarse, start_step=16, n_blocks=3)
    assert np.array_equal(m1.masks, m2.masks) and np.array_equal(c1, c2)


def test_refine_recovers_planted_blobs():
    for seed, n in itertools.product(range(4), (2, 3)):
        lab, scene, recs = planted(seed, n)
        coarse = coarse_masks(scene)
        m, _ = refine(16, recs, scene, coarse, None, RefinementConfig(seed=seed), coarse, start_step=16,
                      n_blocks=3)
        assert m.provenance == "refined-cluster"
        assert min(iou(m.masks[i], lab == i) for i in range(n)) >= 0.9


def test_config_validation():
    for bad in ({"s": 0}, {"sigma_noun": 1.0}, {"sigma_cluster": 0}, {"interval": 0}):
        with pytest.raises(ValueError):
            RefinementConfig(**bad)
