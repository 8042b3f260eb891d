"""Evaluation metrics over CLoP feature space: FID, R-precision, Diversity, MultiModality, MM Dist."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def _features(fs, name="features") -> np.ndarray:
    x = np.asarray(fs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be an M x d matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contain non-finite values")
    return x


def gaussian_stats(fs) -> GaussianStats:
    """Sample mean and unbiased (M - 1) covariance in float64."""
    x = _features(fs)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 feature rows for a covariance")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, cov)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2).

    The trace of (S_a S_b)^1/2 equals that of (S_a^1/2 S_b S_a^1/2)^1/2, which is
    symmetric PSD, so both square roots come from clamped eigendecompositions.
    """
    sa, sb = np.asarray(a.cov, np.float64), np.asarray(b.cov, np.float64)
    if sa.shape != sb.shape or a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    for s in (sa, sb):
        if not np.allclose(s, s.T, atol=1e-9, rtol=0):
            raise ValueError("covariance is not symmetric")
    root_a = _sqrt_psd(sa)
    w = np.linalg.eigvalsh(root_a @ sb @ root_a)
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = np.asarray(a.mean, np.float64) - np.asarray(b.mean, np.float64)
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_cross)


def fid_from_features(x, y) -> float:
    return fid(gaussian_stats(x), gaussian_stats(y))


def r_precision(pose_features, text_features, pool_size: int = 32, seed: int = 0,
                top_k: int = 3) -> tuple[float, ...]:
    """Top-1..top_k hit rates ranking each text's matched pose among pool_size - 1 distractors.

    Distractors are drawn without replacement from the other rows; ranking is by
    Euclidean distance and ties count against the match.
    """
    p = _features(pose_features, "pose features")
    e = _features(text_features, "text features")
    if p.shape != e.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {e.shape}")
    m = p.shape[0]
    if m < pool_size:
        raise ValueError(f"need at least {pool_size} pairs, got {m}")
    rng = np.random.default_rng(seed)
    hits = np.zeros(top_k)
    for i in range(m):
        others = np.delete(np.arange(m), i)
        pool = np.concatenate([[i], rng.choice(others, pool_size - 1, replace=False)])
        d = np.linalg.norm(p[pool] - e[i], axis=1)
        rank = int((d[1:] <= d[0]).sum()) + 1
        hits += rank <= np.arange(1, top_k + 1)
    return tuple(float(h) for h in hits / m)


def diversity(fs, s_dis: int = 300, seed: int = 0) -> float:
    """Mean distance over s_dis random disjoint pairs of rows."""
    x = _features(fs)
    m = x.shape[0]
    if m < 2:
        raise ValueError("need at least 2 feature rows")
    rng = np.random.default_rng(seed)
    if m >= 2 * s_dis:
        idx = rng.permutation(m)[: 2 * s_dis]
        first, second = idx[:s_dis], idx[s_dis:]
    else:
        log.info("diversity: %d rows < 2 * %d, sampling pairs with replacement", m, s_dis)
        first = rng.integers(0, m, s_dis)
        second = (first + rng.integers(1, m, s_dis)) % m
    return float(np.linalg.norm(x[first] - x[second], axis=1).mean())


def multimodality(per_text_samples, samples: int = 32) -> float:
    """Mean distance between sample j and sample (j + samples/2) mod samples, over all texts."""
    groups = [_features(g, "per-text samples") for g in per_text_samples]
    if not groups:
        raise ValueError("no texts given")
    total = 0.0
    for i, g in enumerate(groups):
        if g.shape[0] != samples:
            raise ValueError(f"text {i} has {g.shape[0]} samples, expected {samples}")
        partner = (np.arange(samples) + samples // 2) % samples
        total += np.linalg.norm(g - g[partner], axis=1).sum()
    return float(total / (samples * len(groups)))


def mm_dist(pose_features, text_features) -> float:
    p = _features(pose_features, "pose features")
    e = _features(text_features, "text features")
    if p.shape != e.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {e.shape}")
    return float(np.linalg.norm(p - e, axis=1).mean())


def nearest_centroid(features, centroids) -> np.ndarray:
    x = _features(features)
    c = _features(centroids, "centroids")
    return np.argmin(((x[:, None, :] - c[None]) ** 2).sum(-1), axis=1)


def _unit_rows(x) -> np.ndarray:
    x = _features(x)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def evaluate(gt, pred, texts, pool_size: int = 32, s_dis: int = 300, seed: int = 0,
             per_text_samples=None) -> dict:
    """Report dict with fid, rp_top1..3, diversity, mm and mm_dist.

    ``texts`` rows pair with ``pred`` rows. R-precision and MM Dist compare
    L2-normalized rows; FID, Diversity and MultiModality use the features as
    given. Without ``per_text_samples`` the MultiModality entry is None.
    """
    unit_pred, unit_text = _unit_rows(pred), _unit_rows(texts)
    top = (r_precision(unit_pred, unit_text, pool_size, seed) if len(pred) >= pool_size
           else (None, None, None))
    return {
        "fid": fid_from_features(gt, pred),
        "rp_top1": top[0], "rp_top2": top[1], "rp_top3": top[2],
        "diversity": diversity(pred, s_dis, seed),
        "mm": None if per_text_samples is None else multimodality(per_text_samples),
        "mm_dist": mm_dist(unit_pred, unit_text),
    }
