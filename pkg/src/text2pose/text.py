"""Fixed caption featurizer producing the 1024-d text condition for the denoiser.

Stands in for a frozen pretrained text model: each unigram and bigram maps to a
seeded Gaussian vector; a caption is the normalized sum, scaled to unit RMS.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

import numpy as np

DIM = 1024


def _words(caption: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", caption.lower())


@lru_cache(maxsize=4096)
def _vector(term: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(term.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def caption_features(caption: str, dim: int = DIM) -> np.ndarray:
    words = _words(caption)
    terms = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    if not terms:
        terms = ["<empty>"]
    v = np.sum([_vector(t, dim) for t in terms], axis=0)
    return (v / np.linalg.norm(v) * np.sqrt(dim)).astype(np.float32)


def batch_caption_features(captions, dim: int = DIM) -> np.ndarray:
    return np.stack([caption_features(c, dim) for c in captions])
