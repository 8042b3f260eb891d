"""DDPM noise schedule, denoiser training objective, ancestral and inpainting samplers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import tensor as T
from .dit import DitConfig, MotionDiT, lama_distance, load_dit, save_dit
from .pose import PoseSequence
from .text import batch_caption_features, caption_features

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class LossError(ArithmeticError):
    pass


class NoiseSchedule:
    """Linear betas; ``alpha_bars[t]`` is the signal fraction at step t in [0, T_max)."""

    def __init__(self, t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        self.t_max = t_max
        self.betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def _check(self, t: torch.Tensor) -> None:
        if (t < 0).any() or (t >= self.t_max).any():
            raise ValueError(f"timestep outside [0, {self.t_max})")

    def coefficients(self, t: torch.Tensor, dtype=torch.float32):
        self._check(t)
        ab = torch.as_tensor(self.alpha_bars, dtype=torch.float64)[t.long()]
        return ab.sqrt().to(dtype), (1 - ab).sqrt().to(dtype)

    def q_sample(self, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one t per leading batch item."""
        t = torch.as_tensor(t).reshape(-1)
        a, s = self.coefficients(t, z0.dtype)
        shape = (-1,) + (1,) * (z0.dim() - 1)
        if t.numel() == 1:
            shape = (1,) * z0.dim()
        return a.reshape(shape) * z0 + s.reshape(shape) * eps

    def respaced(self, steps: int | None) -> list[int]:
        """Descending timesteps for sampling; ``None`` or ``t_max`` means every step."""
        if steps is None or steps >= self.t_max:
            return list(range(self.t_max - 1, -1, -1))
        ts = np.unique(np.round(np.linspace(0, self.t_max - 1, steps)).astype(int))
        return ts[::-1].tolist()


@dataclass
class TrainBatch:
    z0: torch.Tensor
    text: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    h_p: torch.Tensor | None = None


def diffusion_loss(batch: TrainBatch, model, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean over batch and elements of (eps - eps_pred)^2."""
    z_t = schedule.q_sample(batch.z0, batch.t, batch.eps)
    pred = model(z_t, batch.t, batch.text)
    loss = T.mse(pred, batch.eps)
    if not torch.isfinite(loss):
        raise LossError("non-finite denoising loss")
    return loss


def total_loss(batch: TrainBatch, model: MotionDiT, schedule: NoiseSchedule, lambda_f: float,
               metric: str = "cosine"):
    """L = L_d + lambda_f * L_f. Returns (L, L_d, L_f); L_f is None when lambda_f == 0."""
    l_d = diffusion_loss(batch, model, schedule)
    if lambda_f == 0:
        return l_d, l_d, None
    if batch.h_p is None:
        raise ConfigurationError("LAMA term requested but no CLoP pose embeddings were supplied")
    l_f = lama_distance(model.lama_projection(), batch.h_p, metric)
    return l_d + lambda_f * l_f, l_d, l_f


@dataclass
class DiffusionConfig:
    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    lambda_f: float = 0.1
    lama_metric: str = "cosine"
    lr: float = 2e-4
    weight_decay: float = 0.0
    steps: int = 10000
    batch_size: int = 4
    seed: int = 0
    caption_dropout: float = 0.0
    sample_steps: int = 50
    guidance_scale: float = 1.0
    dit: DitConfig = field(default_factory=DitConfig)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.t_max, self.beta_start, self.beta_end)


@dataclass
class LatentStats:
    """Per (latent point, channel) mean and std of the training latents.

    Pose latents carry large constant offsets per point and channel next to a
    small spread across clips, so the denoiser works on standardized latents.
    """

    mean: np.ndarray  # (n, c)
    std: np.ndarray

    def normalize(self, z):
        return (z - self._like(self.mean, z)) / self._like(self.std, z)

    def denormalize(self, z):
        return z * self._like(self.std, z) + self._like(self.mean, z)

    @staticmethod
    def _like(a: np.ndarray, z):
        return torch.as_tensor(a, dtype=z.dtype) if isinstance(z, torch.Tensor) else a.astype(np.asarray(z).dtype)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "LatentStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, points: int, channels: int) -> "LatentStats":
        return cls(np.zeros((points, channels)), np.ones((points, channels)))


def latent_stats(latents) -> LatentStats:
    """Statistics over clips and frames of (S, f, n, c) latents; std is floored at 1e-6."""
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 4:
        raise T.ShapeError(f"latents must be (S, f, n, c), got shape {z.shape}")
    return LatentStats(z.mean(axis=(0, 1)), np.maximum(z.std(axis=(0, 1)), 1e-6))


def train_dit(latents, text_features, config: DiffusionConfig, h_p=None, callback=None):
    """Train MotionDiT on standardized clean latents (S, f, n, c) with (S, 1024) text features.

    ``h_p`` holds the frozen CLoP pose embeddings of the clean poses, required when
    ``lambda_f > 0``. Returns ``(model, history)``.
    """
    if config.lambda_f > 0 and h_p is None:
        raise ConfigurationError("lambda_f > 0 needs CLoP pose embeddings (eval checkpoint)")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    schedule = config.schedule()
    model = MotionDiT(config.dit)
    z_all = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    txt_all = torch.as_tensor(np.asarray(text_features, dtype=np.float32))
    hp_all = None if h_p is None else torch.as_tensor(np.asarray(h_p, dtype=np.float32))
    opt = T.AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for step in range(config.steps):
        idx = torch.randint(0, z_all.shape[0], (config.batch_size,), generator=gen)
        t = torch.randint(0, schedule.t_max, (config.batch_size,), generator=gen)
        eps = torch.randn(z_all[idx].shape, generator=gen)
        text = txt_all[idx]
        if config.caption_dropout > 0:
            drop = torch.rand(config.batch_size, generator=gen) < config.caption_dropout
            text = torch.where(drop[:, None], torch.zeros_like(text), text)
        batch = TrainBatch(z_all[idx], text, t, eps, None if hp_all is None else hp_all[idx])
        loss, l_d, l_f = total_loss(batch, model, schedule, config.lambda_f, config.lama_metric)
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"step": step, "loss": loss.item(), "l_d": l_d.item(),
                  "l_f": None if l_f is None else l_f.item()}
        history.append(record)
        if callback is not None:
            callback(record)
        if step % 500 == 0 or step == config.steps - 1:
            log.info("dit step %d loss %.4f l_d %.4f l_f %s", step, record["loss"], record["l_d"], record["l_f"])
    model.eval()
    return model, history


def ancestral_sample(eps_fn: Callable, shape, schedule: NoiseSchedule, steps: int | None = None,
                     generator: torch.Generator | None = None, known: torch.Tensor | None = None,
                     known_mask: torch.Tensor | None = None, dtype=torch.float32) -> torch.Tensor:
    """DDPM ancestral sampling from N(0, I), optionally over a strided subset of steps.

    ``eps_fn(z_t, t)`` predicts noise for a batch at integer steps ``t`` (B,).
    With ``known``/``known_mask`` (broadcastable to ``shape``), masked entries are
    replaced by a fresh forward-noised copy of ``known`` before every model call
    and by ``known`` itself at the end.
    """
    ts = schedule.respaced(steps)
    ab = schedule.alpha_bars
    z = torch.randn(shape, generator=generator, dtype=torch.float64)
    if known is not None:
        known = known.to(torch.float64)
        known_mask = known_mask.to(torch.bool)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        if known is not None:
            noise = torch.randn(shape, generator=generator, dtype=torch.float64)
            noised = np.sqrt(ab[t]) * known + np.sqrt(1 - ab[t]) * noise
            z = torch.where(known_mask, noised, z)
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        eps = eps_fn(z.to(dtype), t_batch).to(torch.float64)
        ab_t = ab[t]
        ab_prev = ab[t_prev] if t_prev >= 0 else 1.0
        beta = 1 - ab_t / ab_prev
        mean = (z - beta / np.sqrt(1 - ab_t) * eps) / np.sqrt(1 - beta)
        if t_prev >= 0:
            var = beta * (1 - ab_prev) / (1 - ab_t)
            z = mean + np.sqrt(var) * torch.randn(shape, generator=generator, dtype=torch.float64)
        else:
            z = mean
    if known is not None:
        z = torch.where(known_mask, known, z)
    return z.to(dtype)


class TextToPose:
    """Trained denoiser + VAE decoder: caption in, pose sequence out."""

    def __init__(self, dit: MotionDiT, vae, stats: LatentStats, config: DiffusionConfig, frames: int = 64):
        self.dit, self.vae, self.stats, self.config, self.frames = dit, vae, stats, config, frames
        self.schedule = config.schedule()

    def _eps_fn(self, text: torch.Tensor):
        g = self.config.guidance_scale

        def eps_fn(z, t):
            eps = self.dit(z, t, text)
            if g != 1.0:
                eps_u = self.dit(z, t, torch.zeros_like(text))
                eps = eps_u + g * (eps - eps_u)
            return eps
        return eps_fn

    @torch.no_grad()
    def sample_latents(self, captions: list[str], seed: int, steps: int | None = None,
                       known: torch.Tensor | None = None, known_mask: torch.Tensor | None = None):
        steps = self.config.sample_steps if steps is None else steps
        cfg = self.dit.config
        text = text_condition(captions)
        shape = (len(captions), self.frames, cfg.latent_points, cfg.latent_channels)
        gen = torch.Generator().manual_seed(seed)
        return ancestral_sample(self._eps_fn(text), shape, self.schedule, steps, gen, known, known_mask)

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(self.stats.denormalize(z))

    @torch.no_grad()
    def encode(self, poses: torch.Tensor) -> torch.Tensor:
        return self.stats.normalize(self.vae.encode(poses).mu)

    def sample(self, caption: str, seed: int = 0, steps: int | None = None) -> PoseSequence:
        z = self.sample_latents([caption], seed, steps)
        return PoseSequence(_clamp_pose(self.decode(z)[0]).numpy())

    def sample_batch(self, captions: list[str], seed: int = 0, steps: int | None = None) -> torch.Tensor:
        return _clamp_pose(self.decode(self.sample_latents(captions, seed, steps)))

    def inpaint_sample(self, caption: str, known: PoseSequence, known_frames, seed: int = 0,
                       steps: int | None = None) -> PoseSequence:
        """Generate the frames not listed in ``known_frames``, pinning the listed ones."""
        known_frames = sorted(set(int(i) for i in known_frames))
        if len(known_frames) == known.frames == self.frames:
            return known
        if not known_frames:
            return self.sample(caption, seed, steps)
        poses = torch.tensor(known.data)[None]
        z_known = self.encode(poses)
        mask = torch.zeros(1, self.frames, 1, 1, dtype=torch.bool)
        mask[0, known_frames] = True
        mask = mask.expand_as(z_known)
        z = self.sample_latents([caption], seed, steps, z_known, mask)
        return PoseSequence(_clamp_pose(self.decode(z)[0]).numpy())


def _clamp_pose(p: torch.Tensor) -> torch.Tensor:
    p = p.clone()
    p[..., 2] = p[..., 2].clamp(0, 1)
    return p


def save_pipeline(path, model: MotionDiT, config: DiffusionConfig, stats: LatentStats) -> None:
    cfg = asdict(config)
    cfg.pop("dit")
    save_dit(model, path, {"diffusion": cfg, "latent_stats": stats.to_json()})


def load_pipeline(path, vae) -> TextToPose:
    model, meta = load_dit(path)
    config = DiffusionConfig(**meta["diffusion"], dit=model.config)
    return TextToPose(model, vae, LatentStats.from_json(meta["latent_stats"]), config)


def text_condition(captions) -> torch.Tensor:
    return torch.as_tensor(batch_caption_features(list(captions)))


__all__ = [
    "NoiseSchedule", "TrainBatch", "DiffusionConfig", "diffusion_loss", "total_loss", "train_dit",
    "ancestral_sample", "TextToPose", "LatentStats", "latent_stats", "save_pipeline", "load_pipeline",
    "caption_features", "text_condition",
]
