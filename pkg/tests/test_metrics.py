import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import sqrtm
from scipy.stats import ortho_group

from text2pose.metrics import (GaussianStats, diversity, fid, fid_from_features, gaussian_stats, mm_dist,
                               multimodality, nearest_centroid, r_precision, evaluate)


def brute_stats(x):
    m, d = x.shape
    mean = [sum(x[i, j] for i in range(m)) / m for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((x[i, a] - mean[a]) * (x[i, b] - mean[b]) for i in range(m)) / (m - 1)
    return np.array(mean), cov


def test_gaussian_stats_examples(rng):
    s = gaussian_stats(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(s.mean, [1, 0])
    np.testing.assert_array_equal(s.cov, [[2, 0], [0, 0]])
    const = gaussian_stats(np.ones((5, 3)) * 7)
    assert np.all(const.cov == 0)
    x = rng.normal(size=(20, 4))
    mean, cov = brute_stats(x)
    s = gaussian_stats(x)
    np.testing.assert_allclose(s.mean, mean, atol=1e-12)
    np.testing.assert_allclose(s.cov, cov, atol=1e-12)
    assert s.cov.dtype == np.float64
    with pytest.raises(ValueError):
        gaussian_stats(np.ones((1, 3)))


def test_fid_examples():
    a = GaussianStats(np.zeros(1), np.ones((1, 1)))
    b = GaussianStats(np.ones(1), np.ones((1, 1)))
    assert fid(a, b) == pytest.approx(1.0, abs=1e-8)
    assert abs(fid(a, a)) <= 1e-8
    da = GaussianStats(np.zeros(2), np.diag([4.0, 1.0]))
    db = GaussianStats(np.zeros(2), np.eye(2))
    assert fid(da, db) == pytest.approx(1.0, abs=1e-10)


def test_fid_errors():
    a = GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        fid(a, a)
    with pytest.raises(ValueError):
        fid(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_fid_symmetric_nonnegative_matches_scipy(seed, d):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(3 * d + 2, d)), rng.normal(loc=0.3, scale=1.5, size=(3 * d + 2, d))
    a, b = gaussian_stats(x), gaussian_stats(y)
    v = fid(a, b)
    assert v >= -1e-8
    assert fid(b, a) == pytest.approx(v, abs=1e-6)
    ref_sqrt = sqrtm(a.cov @ b.cov).real
    ref = ((a.mean - b.mean) ** 2).sum() + np.trace(a.cov + b.cov - 2 * ref_sqrt)
    assert v == pytest.approx(ref, abs=1e-6 * max(1.0, abs(ref)))


def test_fid_same_distribution_shrinks_with_samples():
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        small = fid_from_features(rng.normal(size=(100, 4)), rng.normal(size=(100, 4)))
        large = fid_from_features(rng.normal(size=(10_000, 4)), rng.normal(size=(10_000, 4)))
        wins += large < small
    assert wins == 5


def test_r_precision_perfect_and_random():
    e = np.eye(40)
    assert r_precision(e, e) == (1.0, 1.0, 1.0)
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(10_000, 8)), rng.normal(size=(10_000, 8))
    top1, top2, top3 = r_precision(p, t)
    assert abs(top1 - 1 / 32) < 0.02
    assert top1 <= top2 <= top3


def test_r_precision_errors():
    with pytest.raises(ValueError):
        r_precision(np.eye(10), np.eye(10))
    with pytest.raises(ValueError):
        r_precision(np.eye(40), np.eye(40)[:, :5])


@given(st.integers(0, 10_000))
def test_r_precision_rotation_invariant_and_nested(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(40, 5))
    t = p + rng.normal(scale=1.0, size=(40, 5))
    q = ortho_group.rvs(5, random_state=seed)
    base = r_precision(p, t, seed=seed)
    assert r_precision(p @ q, t @ q, seed=seed) == base
    assert base[0] <= base[1] <= base[2]
    assert base == r_precision(p, t, seed=seed)


def brute_diversity(x, s_dis, seed):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(x))[: 2 * s_dis]
    total = 0.0
    for i in range(s_dis):
        a, b = x[idx[i]], x[idx[s_dis + i]]
        total += math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(len(a))))
    return total / s_dis


def test_diversity_matches_brute_force(rng):
    x = rng.normal(size=(512, 16))
    assert diversity(x, 200, seed=3) == pytest.approx(brute_diversity(x, 200, 3), abs=1e-9)


def test_diversity_properties(rng):
    assert diversity(np.ones((700, 4)), 300) == 0
    x = rng.normal(size=(700, 4))
    assert diversity(2 * x, 300, seed=1) == pytest.approx(2 * diversity(x, 300, seed=1), rel=1e-12)
    clusters = np.zeros((1000, 2))
    clusters[500:, 0] = 2.0
    assert diversity(clusters, 300, seed=0) == pytest.approx(brute_diversity(clusters, 300, 0), abs=1e-9)
    assert 0.7 < diversity(clusters, 300, seed=0) < 1.3
    assert diversity(x[:50], 300, seed=0) > 0
    with pytest.raises(ValueError):
        diversity(x[:1], 300)


def brute_mm(groups):
    total = 0.0
    for g in groups:
        for j in range(32):
            a, b = g[j], g[(j + 16) % 32]
            total += math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(len(a))))
    return total / (32 * len(groups))


def test_multimodality(rng):
    groups = [rng.normal(size=(32, 16)) for _ in range(16)]
    assert multimodality(groups) == pytest.approx(brute_mm(groups), abs=1e-9)
    assert multimodality([np.ones((32, 3))] * 4) == 0
    assert multimodality([3 * g for g in groups]) == pytest.approx(3 * multimodality(groups), rel=1e-12)
    with pytest.raises(ValueError):
        multimodality([rng.normal(size=(31, 4))])


def test_mm_dist(rng):
    x = rng.normal(size=(512, 16))
    assert mm_dist(x, x) == 0
    y = rng.normal(size=(512, 16))
    loop = sum(math.sqrt(sum((x[i, k] - y[i, k]) ** 2 for k in range(16))) for i in range(512)) / 512
    assert mm_dist(x, y) == pytest.approx(loop, abs=1e-9)
    e = np.eye(4)
    assert mm_dist(e, np.roll(e, 1, axis=1)) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        mm_dist(x, y[:, :3])


def test_nearest_centroid():
    c = np.array([[0.0, 0.0], [10.0, 0.0]])
    assert nearest_centroid(np.array([[1.0, 1.0], [9.0, -1.0]]), c).tolist() == [0, 1]


def test_evaluate_report_deterministic(rng):
    gt, pred, txt = rng.normal(size=(64, 8)), rng.normal(size=(64, 8)), rng.normal(size=(64, 8))
    r1 = evaluate(gt, pred, txt, s_dis=20)
    assert r1 == evaluate(gt, pred, txt, s_dis=20)
    assert set(r1) == {"fid", "rp_top1", "rp_top2", "rp_top3", "diversity", "mm", "mm_dist"}
    assert abs(evaluate(gt, gt, txt, s_dis=20)["fid"]) < 1e-8


def test_evaluate_retrieval_ignores_row_scale(rng):
    gt, pred, txt = (rng.normal(size=(40, 6)) for _ in range(3))
    scaled = pred * rng.uniform(0.5, 3.0, size=(40, 1))
    a, b = evaluate(gt, pred, txt, s_dis=20), evaluate(gt, scaled, txt * 7.0, s_dis=20)
    assert a["rp_top1"] == b["rp_top1"] and a["mm_dist"] == pytest.approx(b["mm_dist"])
    assert a["fid"] != pytest.approx(b["fid"])
