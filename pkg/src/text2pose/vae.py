"""Pose VAE: kernel-3 ResNet1D encoder/decoder over the keypoint axis, 8x downsampling."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .layers import ResBlock1d

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class LossError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, last_good_state=None, step=None):
        super().__init__(msg)
        self.last_good_state = last_good_state
        self.step = step


@dataclass
class VaeConfig:
    keypoints: int = 128
    in_channels: int = 3
    latent_channels: int = 4
    widths: tuple[int, ...] = (64, 128, 256)
    beta: float = 1e-7
    skip_drop: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 2000
    batch_frames: int = 64
    seed: int = 0

    @property
    def factor(self) -> int:
        return 2 ** len(self.widths)


@dataclass
class VaeLatentParams:
    mu: torch.Tensor
    log_var: torch.Tensor
    skips: list[torch.Tensor] | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.mu.numel()


class PoseVAE(nn.Module):
    """Frames are independent: every convolution runs along the keypoint axis only."""

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config = config or VaeConfig()
        if config.keypoints % config.factor:
            raise ConfigurationError(
                f"{config.keypoints} keypoints not divisible by downsampling factor {config.factor}")
        w = list(config.widths)
        self.stem = nn.Conv1d(config.in_channels, w[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(ResBlock1d(c) for c in w)
        self.downs = nn.ModuleList(
            nn.Conv1d(w[i], w[min(i + 1, len(w) - 1)], 4, stride=2, padding=1) for i in range(len(w)))
        self.enc_mid = ResBlock1d(w[-1])
        self.to_stats = nn.Conv1d(w[-1], 2 * config.latent_channels, 1)

        self.from_latent = nn.Conv1d(config.latent_channels, w[-1], 3, padding=1)
        self.dec_mid = ResBlock1d(w[-1])
        self.ups = nn.ModuleList(
            nn.Conv1d(w[min(i + 1, len(w) - 1)], w[i], 3, padding=1) for i in range(len(w)))
        self.dec_blocks = nn.ModuleList(ResBlock1d(c) for c in w)
        self.head = nn.Sequential(nn.GroupNorm(8 if w[0] % 8 == 0 else 1, w[0]), nn.SiLU(),
                                  nn.Conv1d(w[0], config.in_channels, 3, padding=1))

    @property
    def latent_points(self) -> int:
        return self.config.keypoints // self.config.factor

    def _to_rows(self, p: torch.Tensor):
        if p.shape[-2] != self.config.keypoints or p.shape[-1] != self.config.in_channels:
            raise T.ShapeError(f"expected (..., {self.config.keypoints}, {self.config.in_channels}), "
                               f"got {tuple(p.shape)}")
        lead = p.shape[:-2]
        return p.reshape(-1, p.shape[-2], p.shape[-1]).transpose(1, 2), lead

    def encode(self, p: torch.Tensor) -> VaeLatentParams:
        """``p``: (..., N, 3) -> mu, log_var of shape (..., N/8, c) plus per-stage skip activations."""
        h, lead = self._to_rows(p)
        h = self.stem(h)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            h = block(h)
            skips.append(h)
            h = down(h)
        h = self.to_stats(self.enc_mid(h))
        c = self.config.latent_channels
        mu = h[:, :c].transpose(1, 2).reshape(*lead, -1, c)
        log_var = h[:, c:].transpose(1, 2).reshape(*lead, -1, c)
        return VaeLatentParams(mu, log_var, skips)

    def decode(self, z: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        """``z``: (..., N/8, c) -> (..., N, 3). Without ``skips`` the stage skips are zero."""
        if z.shape[-2:] != (self.latent_points, self.config.latent_channels):
            raise T.ShapeError(f"latent must end in ({self.latent_points}, {self.config.latent_channels}), "
                               f"got {tuple(z.shape)}")
        lead = z.shape[:-2]
        h = z.reshape(-1, z.shape[-2], z.shape[-1]).transpose(1, 2)
        h = self.dec_mid(self.from_latent(h))
        for i in reversed(range(len(self.ups))):
            h = torch.repeat_interleave(h, 2, dim=-1)
            h = self.ups[i](h)
            if skips is not None:
                h = h + skips[i]
            h = self.dec_blocks[i](h)
        out = self.head(h)
        return out.transpose(1, 2).reshape(*lead, self.config.keypoints, self.config.in_channels)

    def forward(self, p, noise=None, skip_mask=None):
        params = self.encode(p)
        z = params.mu if noise is None else reparameterize(params, noise)
        skips = params.skips
        if skip_mask is not None:
            skips = [s * skip_mask[:, None, None] for s in skips]
        return self.decode(z, skips), params


def reparameterize(params: VaeLatentParams, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != params.mu.shape:
        raise T.ShapeError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(params.mu.shape)}")
    return params.mu + torch.exp(0.5 * params.log_var) * noise


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """0.5 * sum(sigma^2 + mu^2 - log sigma^2 - 1) over every latent entry."""
    if not torch.isfinite(log_var).all():
        raise LossError("non-finite log-variance in KL term")
    return 0.5 * (torch.exp(log_var) + mu * mu - log_var - 1.0).sum()


def recon_loss(p: torch.Tensor, p_r: torch.Tensor) -> torch.Tensor:
    if p.shape != p_r.shape:
        raise T.ShapeError(f"reconstruction shape {tuple(p_r.shape)} != input shape {tuple(p.shape)}")
    return ((p - p_r) ** 2).sum()


def vae_loss(p, p_r, params: VaeLatentParams, beta: float):
    """Returns (L_VAE, L_R, L_KL) with L_VAE = L_R + beta * L_KL."""
    l_r = recon_loss(p, p_r)
    l_kl = kl_loss(params.mu, params.log_var)
    return l_r + beta * l_kl, l_r, l_kl


def train_vae(sequences: np.ndarray, config: VaeConfig | None = None, callback=None):
    """Fit a :class:`PoseVAE` on ``sequences`` of shape (S, f, N, 3).

    Batches are ``batch_frames`` frames drawn from the whole pool; losses are
    sums divided by the number of frames in the batch. Returns ``(model, history)``.
    """
    config = config or VaeConfig()
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    model = PoseVAE(config)
    frames = torch.as_tensor(np.asarray(sequences, dtype=np.float32)).reshape(-1, config.keypoints, 3)
    opt = T.AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    last_good = copy.deepcopy(model.state_dict())
    for step in range(config.steps):
        idx = torch.randint(0, frames.shape[0], (config.batch_frames,), generator=gen)
        batch = frames[idx]
        noise = torch.randn(batch.shape[0], model.latent_points, config.latent_channels, generator=gen)
        keep = (torch.rand(batch.shape[0], generator=gen) >= config.skip_drop).float()
        recon, params = model(batch, noise, keep)
        try:
            loss, l_r, l_kl = vae_loss(batch, recon, params, config.beta)
        except LossError as exc:
            raise TrainingError(f"step {step}: {exc}", last_good, step) from exc
        loss = loss / batch.shape[0]
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite VAE loss at step {step}", last_good, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"step": step, "loss": loss.item(), "recon": l_r.item() / batch.shape[0],
                  "kl": l_kl.item() / batch.shape[0], "recon_mse": l_r.item() / batch.numel()}
        history.append(record)
        if callback is not None:
            callback(record)
        if step % 200 == 0 or step == config.steps - 1:
            log.info("vae step %d loss %.5f recon_mse %.6f kl %.2f",
                     step, record["loss"], record["recon_mse"], record["kl"])
            last_good = copy.deepcopy(model.state_dict())
    model.eval()
    return model, history


@torch.no_grad()
def reconstruct(model: PoseVAE, p: torch.Tensor, use_skips: bool = True) -> torch.Tensor:
    """decode(encode-mean(p)), chunked over frames."""
    params = model.encode(p)
    return model.decode(params.mu, params.skips if use_skips else None)


def save_vae(model: PoseVAE, path) -> None:
    T.save_checkpoint(path, dict(model.state_dict()))
    T.write_sidecar(path, asdict(model.config))


def load_vae(path) -> PoseVAE:
    cfg = T.read_sidecar(path)
    cfg["widths"] = tuple(cfg["widths"])
    model = PoseVAE(VaeConfig(**cfg))
    model.load_state_dict(T.load_checkpoint(path))
    model.eval()
    return model
