import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homoglyph import index as kd
from homoglyph.evaluate import (
    DegenerateLabels,
    RocResult,
    auc_rank,
    auc_summary,
    cluster_separation,
    histogram_csv,
    oracle_top1,
    pca_project,
    percent_bucket,
    percent_edit_distance_histogram,
    recall_vs_checks,
    roc_auc,
    synthetic_embeddings,
    top_eigenvectors,
)


def auc_pairs(scores, labels):
    """O(n^2) count: spoof (label 0) scored below benign wins, ties count half."""
    s, y = np.asarray(scores, float), np.asarray(labels)
    pos, neg = s[y == 0], s[y == 1]
    wins = sum((p < n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc_rank([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_rank([0.8, 0.9, 0.1, 0.2], [0, 0, 1, 1]) == 0.0
    assert auc_rank([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    assert auc_rank([0.1, 0.5, 0.3, 0.9], [0, 1, 1, 0]) == 0.5


labelled = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
    )
)


@settings(max_examples=300, deadline=None)
@given(labelled)
def test_auc_equals_pair_count(case):
    s, y = case
    assert auc_rank(s, y) == auc_pairs(s, y)


@settings(max_examples=100, deadline=None)
@given(labelled)
def test_auc_invariant_under_monotone_transform(case):
    s, y = case
    t = [math.exp(v) * 3 + 1 for v in s]
    assert auc_rank(s, y) == auc_rank(t, y)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_roc_curve_shape(case):
    s, y = case
    r = roc_auc(s, y)
    assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)
    assert (np.diff(r.fpr) >= 0).all() and (np.diff(r.tpr) >= 0).all()
    assert (np.diff(r.thresholds) > 0).all()
    assert r.trapezoid() == pytest.approx(r.auc, abs=1e-12)


def test_random_scores_near_half():
    rng = np.random.default_rng(0)
    s, y = rng.random(20_000), rng.integers(0, 2, 20_000)
    assert abs(auc_rank(s, y) - 0.5) < 0.02


def test_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        auc_rank([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc_rank([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        auc_rank([0.1], [0, 1])


def test_threshold_at_fpr():
    # four spoofs then four benign, one benign interleaved low
    s = [0.1, 0.2, 0.3, 0.35, 0.4, 0.6, 0.7, 0.8]
    y = [0, 0, 0, 1, 0, 1, 1, 1]
    r = roc_auc(s, y)
    assert r.threshold_at_fpr(0.0) == 0.3
    assert r.threshold_at_fpr(0.25) == 0.4
    assert r.threshold_at_fpr(1.0) == 0.4  # no gain in TPR beyond this point; first such threshold
    lines = r.to_csv().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == 2 + len(s)


def test_threshold_when_nothing_fits():
    r = RocResult(np.array([0.0, 0.5, 1.0]), np.array([0.0, 1.0, 1.0]), np.array([1.0, 2.0]), 0.75)
    assert r.threshold_at_fpr(0.01) == float("-inf")


# --- histogram --------------------------------------------------------------


@pytest.mark.parametrize("f,b", [(0.0, 0), (0.05, 0), (0.0500001, 1), (0.25, 4), (0.26, 5), (1.0, 19)])
def test_percent_bucket(f, b):
    assert percent_bucket(f) == b


def test_histogram_example():
    h = percent_edit_distance_histogram(["abcd", "abce"])
    assert h[4] == 2 and h.sum() == 2
    assert histogram_csv(h).splitlines()[5] == "20,25,2"


def test_histogram_counts_every_name():
    names = [f"name{i:03d}.exe" for i in range(0, 300, 7)] + ["zz.exe", "qqqqqqqqqq.dll"]
    assert percent_edit_distance_histogram(names).sum() == len(names)


# --- PCA --------------------------------------------------------------------


def test_pca_recovers_planar_data():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(32, 2)))[0].T
    x = rng.normal(size=(200, 2)) * [5.0, 2.0] @ basis + 3.0
    coords, comps, mean = pca_project(x)
    back = coords @ comps + mean
    assert np.abs(back - x).max() <= 1e-8
    assert coords[:, 0].var() > coords[:, 1].var()
    assert abs(comps[0] @ comps[1]) < 1e-10


def test_eigenvectors_match_lapack():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 32))
    cov = np.cov(x, rowvar=False)
    vals, vecs = top_eigenvectors(cov, 2)
    w, v = np.linalg.eigh(cov)
    for k in range(2):
        ref = v[:, -1 - k]
        assert vals[k] == pytest.approx(w[-1 - k], rel=1e-6)
        assert min(np.abs(vecs[k] - ref).max(), np.abs(vecs[k] + ref).max()) < 1e-6


def test_pca_sign_convention_is_stable():
    x = np.random.default_rng(2).normal(size=(50, 8))
    a = pca_project(x)[1]
    b = pca_project(x[::-1])[1]
    assert np.allclose(a, b, atol=1e-8)


def test_pca_needs_three_rows():
    with pytest.raises(ValueError):
        pca_project(np.zeros((2, 4)))


# --- clusters and summary ---------------------------------------------------


def test_cluster_separation_example():
    intra, inter = cluster_separation({"a": [[0, 0], [1, 0]], "b": [[0, 1], [1, 1]]})
    assert intra == 1.0
    assert inter == pytest.approx((1 + math.sqrt(2) + math.sqrt(2) + 1) / 4)
    with pytest.raises(ValueError):
        cluster_separation([[[0, 0], [1, 1]]])


def test_auc_summary():
    y = [0, 1]
    res = {"edit": roc_auc([1, 0], y), "model": roc_auc([0, 1], y)}
    out = auc_summary(res)
    assert out["auc"] == {"edit": 0.0, "model": 1.0}
    assert out["gain_over_edit"]["model"] == {"absolute": 1.0, "relative": None}


# --- recall curve -----------------------------------------------------------


def test_recall_curve_monotone_and_saturating():
    pts, queries = synthetic_embeddings(3000, 200, seed=3)
    f = kd.build(pts, seed=1)
    oracle = oracle_top1(f, queries)
    checks = [1, 2, 4, 8, 16, 32, 64, 128, 256, f.num_leaves]
    curve = recall_vs_checks(f, queries, oracle, checks, repeats=1)
    assert all(b >= a for a, b in zip(curve.recall, curve.recall[1:]))
    assert curve.recall[-1] == 1.0
    assert curve.to_csv().splitlines()[0] == "checks,recall_at_1,mean_query_us"
    # timing grows with budget, allowing 10% jitter between neighbouring budgets
    assert all(b >= 0.9 * a for a, b in zip(curve.query_us, curve.query_us[1:]))
    with pytest.raises(ValueError):
        recall_vs_checks(f, queries, oracle[:-1], [1])


def test_synthetic_embeddings_shape_and_seed():
    a, qa = synthetic_embeddings(100, 10, seed=4)
    b, qb = synthetic_embeddings(100, 10, seed=4)
    assert a.shape == (100, 32) and qa.shape == (10, 32)
    assert np.array_equal(a, b) and np.array_equal(qa, qb)
