"""CLoP: contrastive text/pose encoders sharing an l2-normalized embedding space."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .layers import TransformerBlock, sinusoidal_embedding

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)
MAX_TOKENS = 77
TEXT_FEATURE_DIM = 1024


class TokenizerError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @staticmethod
    def words(caption: str) -> list[str]:
        return re.findall(r"[a-z0-9']+", caption.lower())

    @classmethod
    def build(cls, captions) -> "Vocabulary":
        return cls(sorted({w for c in captions for w in cls.words(c)}))

    def encode(self, caption: str, max_len: int = MAX_TOKENS) -> list[int]:
        ids = [self.index.get(w, UNK) for w in self.words(caption)][:max_len - 2]
        return [BOS] + ids + [EOS]

    def check(self, ids) -> None:
        bad = [i for i in ids if not 0 <= i < len(self)]
        if bad:
            raise TokenizerError(f"token ids {bad} outside vocabulary of size {len(self)}")

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text().split("\n") if line])


@dataclass
class TextInput:
    caption: str = ""
    tokens: list[int] | None = None
    precomputed: np.ndarray | None = None


@dataclass(frozen=True)
class ClopEmbedding:
    vector: np.ndarray
    normalized: bool = True


@dataclass
class ClopConfig:
    vocab_size: int = 64
    frames: int = 64
    keypoints: int = 128
    text_width: int = 128
    text_layers: int = 2
    pose_width: int = 128
    pose_layers: int = 2
    heads: int = 4
    embed_dim: int = 256
    text_feature_dim: int = TEXT_FEATURE_DIM
    temperature: float = 0.07
    learn_temperature: bool = True
    lr: float = 5e-4
    weight_decay: float = 0.01
    steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    tag: str = "eval"


class TextEncoder(nn.Module):
    """Token embedding + transformer; the EOS state is mapped to a 1024-d caption feature."""

    def __init__(self, cfg: ClopConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.randn(MAX_TOKENS, cfg.text_width) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.text_width, cfg.heads) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(cfg.text_width)
        self.out = nn.Linear(cfg.text_width, cfg.text_feature_dim)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        b, n = ids.shape
        x = self.tok(ids) + self.pos[:n]
        valid = torch.arange(n)[None, :] < lengths[:, None]
        mask = valid[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask=mask)
        x = self.norm(x)
        return self.out(x[torch.arange(b), lengths - 1])


class PoseEncoder(nn.Module):
    """Per-frame tokens with sinusoidal frame positions and a learnable summary token."""

    def __init__(self, cfg: ClopConfig):
        super().__init__()
        self.keypoints = cfg.keypoints
        self.width = cfg.pose_width
        self.frame_proj = nn.Linear(cfg.keypoints * 3, cfg.pose_width)
        self.summary = nn.Parameter(torch.randn(cfg.pose_width) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.pose_width, cfg.heads) for _ in range(cfg.pose_layers))
        self.norm = nn.LayerNorm(cfg.pose_width)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.dim() != 4 or p.shape[2] != self.keypoints or p.shape[3] != 3:
            raise T.ShapeError(f"pose batch must be (B, f, {self.keypoints}, 3), got {tuple(p.shape)}")
        b, f = p.shape[:2]
        x = self.frame_proj(p.reshape(b, f, -1))
        x = x + sinusoidal_embedding(torch.arange(f), self.width).to(x.dtype)
        x = torch.cat([self.summary.expand(b, 1, -1), x], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x[:, 0])


class Clop(nn.Module):
    def __init__(self, config: ClopConfig | None = None):
        super().__init__()
        self.config = cfg = config or ClopConfig()
        self.text = TextEncoder(cfg)
        self.pose = PoseEncoder(cfg)
        self.w_e = nn.Linear(cfg.text_feature_dim, cfg.embed_dim, bias=False)
        self.w_p = nn.Linear(cfg.pose_width, cfg.embed_dim, bias=False)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.temperature)),
                                    requires_grad=cfg.learn_temperature)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(0.01, 1.0)

    def text_features(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """F_e: the 1024-d caption feature (also the denoiser's text condition)."""
        return self.text(ids, lengths)

    def project_text(self, features: torch.Tensor) -> torch.Tensor:
        return self.w_e(features)

    def project_pose(self, p: torch.Tensor) -> torch.Tensor:
        """F_p(p) W_p before normalization."""
        return self.w_p(self.pose(p))

    def forward(self, ids, lengths, poses):
        h_e = self.project_text(self.text_features(ids, lengths))
        h_p = self.project_pose(poses)
        return h_e, h_p


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def contrastive_loss(h_e: torch.Tensor, h_p: torch.Tensor, temperature=1.0) -> torch.Tensor:
    """Symmetric cross-entropy over normalized similarity logits with diagonal labels."""
    if h_e.shape != h_p.shape:
        raise T.ShapeError(f"text batch {tuple(h_e.shape)} and pose batch {tuple(h_p.shape)} differ")
    logits = l2_normalize(h_e) @ l2_normalize(h_p).T / temperature
    labels = torch.arange(h_e.shape[0])
    ce = nn.functional.cross_entropy
    return (ce(logits, labels) + ce(logits.T, labels)) / 2


def batch_tokens(vocab: Vocabulary, captions: list[str]):
    seqs = [vocab.encode(c) for c in captions]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.tensor(s)
    return ids, torch.tensor([len(s) for s in seqs])


def _tokens_to_batch(vocab: Vocabulary, tokens: list[int]):
    vocab.check(tokens)
    return torch.tensor([tokens]), torch.tensor([len(tokens)])


@torch.no_grad()
def text_features(model: Clop, vocab: Vocabulary, captions: list[str], chunk: int = 256) -> torch.Tensor:
    out = []
    for i in range(0, len(captions), chunk):
        out.append(model.text_features(*batch_tokens(vocab, captions[i:i + chunk])))
    return torch.cat(out)


@torch.no_grad()
def pose_features(model: Clop, poses, chunk: int = 128) -> torch.Tensor:
    """Projected, unnormalized pose embeddings for a (S, f, N, 3) batch."""
    poses = torch.as_tensor(np.asarray(poses, dtype=np.float32))
    return torch.cat([model.project_pose(poses[i:i + chunk]) for i in range(0, len(poses), chunk)])


@torch.no_grad()
def embed_text(model: Clop, vocab: Vocabulary, t: TextInput) -> ClopEmbedding:
    if t.precomputed is not None:
        feats = torch.as_tensor(np.asarray(t.precomputed, dtype=np.float32)).reshape(1, -1)
        if feats.shape[1] != model.config.text_feature_dim:
            raise T.ShapeError(f"precomputed caption vector must be {model.config.text_feature_dim}-d")
    else:
        tokens = t.tokens if t.tokens is not None else vocab.encode(t.caption)
        feats = model.text_features(*_tokens_to_batch(vocab, tokens))
    return ClopEmbedding(l2_normalize(model.project_text(feats))[0].numpy())


@torch.no_grad()
def embed_pose(model: Clop, pose) -> ClopEmbedding:
    data = pose.data if hasattr(pose, "data") and not isinstance(pose, torch.Tensor) else pose
    p = torch.as_tensor(np.asarray(data, dtype=np.float32))[None]
    return ClopEmbedding(l2_normalize(model.project_pose(p))[0].numpy())


def similarity(a: ClopEmbedding, b: ClopEmbedding) -> float:
    for e in (a, b):
        norm = float(np.linalg.norm(e.vector))
        if not e.normalized or abs(norm - 1.0) > 1e-5:
            raise ValueError(f"similarity expects unit-norm embeddings (norm {norm:.6f})")
    return float(np.dot(a.vector, b.vector))


def train_clop(poses: np.ndarray, captions: list[str], config: ClopConfig | None = None,
               vocab: Vocabulary | None = None, callback=None):
    """Fit CLoP on normalized (S, f, N, 3) poses and their captions. Returns (model, vocab, history)."""
    config = config or ClopConfig()
    vocab = vocab or Vocabulary.build(captions)
    config.vocab_size = len(vocab)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = Clop(config)
    poses_t = torch.as_tensor(np.asarray(poses, dtype=np.float32))
    ids, lengths = batch_tokens(vocab, captions)
    opt = T.AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    n = len(captions)
    bs = min(config.batch_size, n)
    order = torch.randperm(n, generator=gen)
    cursor = 0
    history = []
    for step in range(config.steps):
        if cursor + bs > n:
            order, cursor = torch.randperm(n, generator=gen), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        h_e, h_p = model(ids[idx], lengths[idx], poses_t[idx])
        loss = contrastive_loss(h_e, h_p, model.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"step": step, "loss": loss.item(), "temperature": model.temperature.item()}
        history.append(record)
        if callback is not None:
            callback(record)
        if step % 250 == 0 or step == config.steps - 1:
            log.info("clop step %d loss %.4f tau %.4f", step, record["loss"], record["temperature"])
    model.eval()
    return model, vocab, history


def save_clop(model: Clop, vocab: Vocabulary, path) -> None:
    T.save_checkpoint(path, dict(model.state_dict()))
    T.write_sidecar(path, asdict(model.config))
    vocab.save(Path(str(path) + ".vocab"))


def load_clop(path):
    cfg = ClopConfig(**T.read_sidecar(path))
    model = Clop(cfg)
    model.load_state_dict(T.load_checkpoint(path))
    model.eval()
    return model, Vocabulary.load(Path(str(path) + ".vocab"))


def save_embeddings(path, ids: list[int], vectors: np.ndarray) -> None:
    """``MVEM`` rows of (id u32, dim float32)."""
    import struct
    vectors = np.asarray(vectors, dtype="<f4")
    rows = [struct.pack("<4sII", b"MVEM", len(ids), vectors.shape[1])]
    for i, v in zip(ids, vectors):
        rows.append(struct.pack("<I", i) + v.tobytes())
    Path(path).write_bytes(b"".join(rows))


def load_embeddings(path) -> tuple[list[int], np.ndarray]:
    import struct
    raw = Path(path).read_bytes()
    magic, count, dim = struct.unpack_from("<4sII", raw)
    if magic != b"MVEM":
        raise ValueError(f"{path}: not an embedding file")
    row = 4 + 4 * dim
    if len(raw) != 12 + count * row:
        raise ValueError(f"{path}: expected {count} rows of dim {dim}")
    ids, vecs = [], np.empty((count, dim), dtype=np.float32)
    for k in range(count):
        off = 12 + k * row
        ids.append(struct.unpack_from("<I", raw, off)[0])
        vecs[k] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 4)
    return ids, vecs
