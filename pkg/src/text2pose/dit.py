"""MotionDiT: a diffusion transformer over pose latents with local and global attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import tensor as T
from .layers import Mlp, MultiHeadAttention, band_mask, sinusoidal_embedding


class ForwardError(ArithmeticError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class DitConfig:
    latent_points: int = 16
    latent_channels: int = 4
    patch: int = 2
    layers: int = 13
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    text_dim: int = 1024
    clop_dim: int = 256
    lama_hidden: int = 256
    lama_layer: int | None = None
    global_layer: int | None = None
    global_attention: bool = True
    spatial_window: int | None = None
    temporal_window: int | None = None

    def __post_init__(self):
        if self.latent_points % self.patch:
            raise ValueError(f"{self.latent_points} latent points not divisible by patch {self.patch}")
        if self.lama_layer is None:
            self.lama_layer = self.layers // 2
        if self.global_layer is None:
            self.global_layer = self.layers // 2
        if not 0 <= self.lama_layer < self.layers:
            raise ValueError(f"lama_layer {self.lama_layer} outside [0, {self.layers})")

    @property
    def tokens_per_frame(self) -> int:
        return self.latent_points // self.patch


@dataclass
class LamaTap:
    layer: int
    features: torch.Tensor  # (B, f, m, d)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class PatchEmbed(nn.Module):
    """Groups ``patch`` adjacent latent points into one token: (B, f, n, c) -> (B, f, n/patch, d)."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.patch = cfg.patch
        self.proj = nn.Linear(cfg.patch * cfg.latent_channels, cfg.width)

    def forward(self, z):
        b, f, n, c = z.shape
        if n % self.patch:
            raise ValueError(f"latent points {n} not divisible by patch {self.patch}")
        return self.proj(z.reshape(b, f, n // self.patch, self.patch * c))


def unpatch(tokens: torch.Tensor, patch: int, channels: int) -> torch.Tensor:
    b, f, m, _ = tokens.shape
    return tokens.reshape(b, f, m * patch, channels)


class LocalResBlock(nn.Module):
    """Kernel-3 1D ResNet branch over the token (point) axis of each frame."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=1)
        self.conv2 = nn.Conv1d(width, width, 3, padding=1)

    def forward(self, x):
        b, f, m, d = x.shape
        h = x.reshape(b * f, m, d).transpose(1, 2)
        h = T.conv1d(T.silu(T.conv1d(h, self.conv1.weight, self.conv1.bias, padding=1)),
                     self.conv2.weight, self.conv2.bias, padding=1)
        return h.transpose(1, 2).reshape(b, f, m, d)


class DitBlock(nn.Module):
    """Local aggregation -> spatial attention -> text cross-attention -> temporal attention -> MLP."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        d = cfg.width
        self.cfg = cfg
        self.norm_res = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.res = LocalResBlock(d)
        self.norm_sa = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.spatial = MultiHeadAttention(d, cfg.heads)
        self.norm_ca = nn.LayerNorm(d, eps=1e-6)
        self.cross = MultiHeadAttention(d, cfg.heads)
        self.norm_ta = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.temporal = MultiHeadAttention(d, cfg.heads)
        self.norm_mlp = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 12 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c, text):
        b, f, m, d = x.shape
        mods = self.ada(c)[:, None, None, :].chunk(12, dim=-1)
        (sh_r, sc_r, g_r, sh_s, sc_s, g_s, sh_t, sc_t, g_t, sh_m, sc_m, g_m) = mods

        x = x + g_r * self.res(modulate(self.norm_res(x), sh_r, sc_r))

        h = modulate(self.norm_sa(x), sh_s, sc_s).reshape(b * f, m, d)
        h = self.spatial(h, mask=band_mask(m, self.cfg.spatial_window))
        x = x + g_s * h.reshape(b, f, m, d)

        h = self.cross(self.norm_ca(x).reshape(b, f * m, d), context=text)
        x = x + h.reshape(b, f, m, d)

        h = modulate(self.norm_ta(x), sh_t, sc_t).transpose(1, 2).reshape(b * m, f, d)
        h = self.temporal(h, mask=band_mask(f, self.cfg.temporal_window))
        x = x + g_t * h.reshape(b, m, f, d).transpose(1, 2)

        return x + g_m * self.mlp(modulate(self.norm_mlp(x), sh_m, sc_m))


class GlobalAttention(nn.Module):
    """Self-attention over every (frame, point) token at once."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.width, eps=1e-6)
        self.attn = MultiHeadAttention(cfg.width, cfg.heads)
        nn.init.zeros_(self.attn.out.bias)
        self.attn.out.bias.requires_grad_(False)

    def forward(self, x):
        b, f, m, d = x.shape
        h = self.attn(self.norm(x).reshape(b, f * m, d))
        return x + h.reshape(b, f, m, d)


class LamaProjector(nn.Module):
    """g_omega: mean-pool over frames and points, then a two-layer MLP into CLoP space."""

    def __init__(self, width: int, hidden: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, features):
        return self.fc2(T.silu(self.fc1(features.mean(dim=(1, 2)))))


class MotionDiT(nn.Module):
    def __init__(self, config: DitConfig | None = None):
        super().__init__()
        self.config = cfg = config or DitConfig()
        d = cfg.width
        self.patch_embed = PatchEmbed(cfg)
        self.point_pos = nn.Parameter(torch.randn(cfg.tokens_per_frame, d) * 0.02)
        self.t_embed = TimestepEmbedder(d)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.blocks = nn.ModuleList(DitBlock(cfg) for _ in range(cfg.layers))
        self.global_attn = GlobalAttention(cfg) if cfg.global_attention else None
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        self.final = nn.Linear(d, cfg.patch * cfg.latent_channels)
        self.lama = LamaProjector(d, cfg.lama_hidden, cfg.clop_dim)
        self.tap: LamaTap | None = None

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, MultiHeadAttention)]

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``z_t`` (B, f, n, c) at integer steps ``t`` (B,) given (B, 1024) text."""
        cfg = self.config
        if z_t.dim() != 4 or z_t.shape[2:] != (cfg.latent_points, cfg.latent_channels):
            raise T.ShapeError(f"z_t must be (B, f, {cfg.latent_points}, {cfg.latent_channels}), "
                               f"got {tuple(z_t.shape)}")
        b, f = z_t.shape[:2]
        x = self.patch_embed(z_t) + self.point_pos
        x = x + sinusoidal_embedding(torch.arange(f), cfg.width).to(x.dtype)[None, :, None, :]
        c = self.t_embed(t)
        text = self.text_proj(text_emb.reshape(b, 1, -1))
        self.tap = None
        for i, block in enumerate(self.blocks):
            x = block(x, c, text)
            if i == cfg.global_layer and self.global_attn is not None:
                x = self.global_attn(x)
            if not torch.isfinite(x).all():
                raise ForwardError(f"non-finite activations after block {i}")
            if i == cfg.lama_layer:
                self.tap = LamaTap(i, x)
        shift, scale = self.final_ada(c)[:, None, None, :].chunk(2, dim=-1)
        out = self.final(modulate(self.final_norm(x), shift, scale))
        return unpatch(out, cfg.patch, cfg.latent_channels)

    def lama_projection(self, tap: LamaTap | None = None) -> torch.Tensor:
        tap = tap or self.tap
        if tap is None:
            raise StateError("LAMA tap is empty; run forward first")
        return self.lama(tap.features)


def lama_distance(projected: torch.Tensor, h_p: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    """Mean over the batch of 1 - cos(g(h), h_p), or the mean squared error."""
    if metric == "cosine":
        cos = (projected * h_p).sum(-1) / (projected.norm(dim=-1) * h_p.norm(dim=-1)).clamp_min(1e-12)
        return (1 - cos).mean()
    if metric == "mse":
        return T.mse(projected, h_p)
    raise ValueError(f"unknown LAMA metric {metric!r}")


def save_dit(model: MotionDiT, path, extra: dict | None = None) -> None:
    T.save_checkpoint(path, dict(model.state_dict()))
    T.write_sidecar(path, {"dit": asdict(model.config), **(extra or {})})


def load_dit(path):
    meta = T.read_sidecar(path)
    model = MotionDiT(DitConfig(**meta.pop("dit")))
    model.load_state_dict(T.load_checkpoint(path))
    model.eval()
    return model, meta
