import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from text2pose import clop as C
from text2pose import tensor as T

TINY = C.ClopConfig(text_width=16, text_layers=1, pose_width=16, pose_layers=1, heads=2, embed_dim=8,
                    text_feature_dim=32, keypoints=128, steps=5, batch_size=4)
CAPTIONS = ["a person waves the left arm upward", "a person swings the right leg downward",
            "a person waves the right arm downward", "a person swings the left leg upward"]


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    vocab = C.Vocabulary.build(CAPTIONS)
    cfg = C.ClopConfig(**{**TINY.__dict__, "vocab_size": len(vocab)})
    return C.Clop(cfg).eval(), vocab


def test_vocabulary_roundtrip(tmp_path):
    vocab = C.Vocabulary.build(CAPTIONS)
    assert vocab.tokens[:4] == list(C.SPECIALS)
    ids = vocab.encode("a person waves")
    assert ids[0] == C.BOS and ids[-1] == C.EOS and C.UNK not in ids
    assert vocab.encode("a dragon waves")[2] == C.UNK
    vocab.save(tmp_path / "v.txt")
    assert C.Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens
    assert len(vocab.encode("word " * 200)) == C.MAX_TOKENS


def test_embed_text_properties(model):
    m, vocab = model
    a = C.embed_text(m, vocab, C.TextInput(CAPTIONS[0]))
    b = C.embed_text(m, vocab, C.TextInput(CAPTIONS[0]))
    assert np.array_equal(a.vector, b.vector)
    assert abs(np.linalg.norm(a.vector) - 1) < 1e-6 and a.normalized
    empty = C.embed_text(m, vocab, C.TextInput(""))
    assert np.isfinite(empty.vector).all()


def test_embed_text_unknown_token_id(model):
    m, vocab = model
    with pytest.raises(C.TokenizerError):
        C.embed_text(m, vocab, C.TextInput(tokens=[C.BOS, 999, C.EOS]))


def test_embed_text_precomputed(model):
    m, vocab = model
    vec = np.random.default_rng(0).normal(size=32)
    e = C.embed_text(m, vocab, C.TextInput(precomputed=vec))
    assert abs(np.linalg.norm(e.vector) - 1) < 1e-6
    with pytest.raises(T.ShapeError):
        C.embed_text(m, vocab, C.TextInput(precomputed=np.zeros(5)))


def test_embed_pose_properties(model, rng):
    m, _ = model
    p = rng.uniform(-1, 1, size=(8, 128, 3)).astype(np.float32)
    a = C.embed_pose(m, p)
    assert abs(np.linalg.norm(a.vector) - 1) < 1e-6
    assert np.array_equal(a.vector, C.embed_pose(m, p).vector)
    shuffled = C.embed_pose(m, p[::-1].copy())
    assert not np.allclose(a.vector, shuffled.vector)
    with pytest.raises(T.ShapeError):
        C.embed_pose(m, p[:, :100])


def test_similarity_examples():
    e = np.zeros(4)
    e[0] = 1
    f = np.zeros(4)
    f[1] = 1
    a, b = C.ClopEmbedding(e), C.ClopEmbedding(f)
    assert C.similarity(a, a) == 1.0
    assert C.similarity(a, b) == 0.0
    assert C.similarity(a, C.ClopEmbedding(-e)) == -1.0
    with pytest.raises(ValueError):
        C.similarity(C.ClopEmbedding(2 * e), a)
    with pytest.raises(ValueError):
        C.similarity(C.ClopEmbedding(e, normalized=False), a)


def test_contrastive_single_pair_is_zero():
    assert C.contrastive_loss(torch.randn(1, 8), torch.randn(1, 8)).item() == pytest.approx(0, abs=1e-7)


def test_contrastive_orthogonal_pairs_low_temperature():
    e = torch.eye(6)
    assert C.contrastive_loss(e, e, 1e-3).item() < 1e-6


def test_contrastive_matches_manual_formula():
    g = torch.Generator().manual_seed(1)
    h_e, h_p = torch.randn(5, 7, generator=g, dtype=torch.float64), torch.randn(5, 7, generator=g, dtype=torch.float64)
    tau = 0.3
    a = (h_e / h_e.norm(dim=1, keepdim=True)).numpy()
    b = (h_p / h_p.norm(dim=1, keepdim=True)).numpy()
    logits = a @ b.T / tau
    ce_rows = np.mean([-logits[i, i] + np.log(np.exp(logits[i]).sum()) for i in range(5)])
    ce_cols = np.mean([-logits[i, i] + np.log(np.exp(logits[:, i]).sum()) for i in range(5)])
    assert C.contrastive_loss(h_e, h_p, tau).item() == pytest.approx((ce_rows + ce_cols) / 2, abs=1e-12)


def test_contrastive_batch_mismatch():
    with pytest.raises(T.ShapeError):
        C.contrastive_loss(torch.randn(3, 4), torch.randn(4, 4))


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_contrastive_symmetry_and_permutation(seed, b):
    g = torch.Generator().manual_seed(seed)
    h_e, h_p = torch.randn(b, 6, generator=g, dtype=torch.float64), torch.randn(b, 6, generator=g, dtype=torch.float64)
    base = C.contrastive_loss(h_e, h_p, 0.5).item()
    assert C.contrastive_loss(h_p, h_e, 0.5).item() == pytest.approx(base, abs=1e-12)
    perm = torch.randperm(b, generator=g)
    assert C.contrastive_loss(h_e[perm], h_p[perm], 0.5).item() == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_gradient_check(seed):
    g = torch.Generator().manual_seed(seed)
    h_p = torch.randn(4, 8, generator=g, dtype=torch.float64)
    h_e = torch.randn(4, 8, generator=g, dtype=torch.float64)
    assert T.gradient_check(lambda x: C.contrastive_loss(x, h_p, 0.5), h_e) < 1e-4
    assert T.gradient_check(lambda x: C.contrastive_loss(h_e, x, 0.5), h_p) < 1e-4


def test_temperature_init_and_clamp():
    m = C.Clop(TINY)
    assert m.temperature.item() == pytest.approx(0.07, rel=1e-6)
    with torch.no_grad():
        m.log_tau.fill_(math.log(1e-4))
    assert m.temperature.item() == pytest.approx(0.01)
    with torch.no_grad():
        m.log_tau.fill_(3.0)
    assert m.temperature.item() == pytest.approx(1.0)
    fixed = C.Clop(C.ClopConfig(**{**TINY.__dict__, "temperature": 1.0, "learn_temperature": False}))
    assert not fixed.log_tau.requires_grad


def test_train_deterministic_with_duplicates(rng):
    poses = rng.uniform(-1, 1, size=(6, 8, 128, 3)).astype(np.float32)
    captions = [CAPTIONS[0]] * 3 + CAPTIONS[1:4]
    m1, v1, h1 = C.train_clop(poses, captions, C.ClopConfig(**TINY.__dict__))
    m2, v2, h2 = C.train_clop(poses, captions, C.ClopConfig(**TINY.__dict__))
    assert h1 == h2 and len(h1) == 5
    assert v1.tokens == v2.tokens


def test_init_loss_near_log_batch(rng):
    poses = rng.uniform(-1, 1, size=(32, 8, 128, 3)).astype(np.float32)
    captions = [f"a person waves number {i}" for i in range(32)]
    cfg = C.ClopConfig(**{**TINY.__dict__, "steps": 1, "batch_size": 32, "temperature": 1.0})
    _, _, hist = C.train_clop(poses, captions, cfg)
    assert abs(hist[0]["loss"] - math.log(32)) < 0.1 * math.log(32)


def test_checkpoint_and_embeddings_roundtrip(tmp_path, model):
    m, vocab = model
    C.save_clop(m, vocab, tmp_path / "clop.ckpt")
    m2, vocab2 = C.load_clop(tmp_path / "clop.ckpt")
    e1 = C.embed_text(m, vocab, C.TextInput(CAPTIONS[1]))
    e2 = C.embed_text(m2, vocab2, C.TextInput(CAPTIONS[1]))
    assert np.array_equal(e1.vector, e2.vector)
    vecs = np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)
    C.save_embeddings(tmp_path / "e.bin", [4, 5, 9], vecs)
    ids, back = C.load_embeddings(tmp_path / "e.bin")
    assert ids == [4, 5, 9] and np.array_equal(back, vecs)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "e.bin").read_bytes()[:-2])
    with pytest.raises(ValueError):
        C.load_embeddings(tmp_path / "bad.bin")
