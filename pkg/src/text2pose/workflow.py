"""Glue between modules: dataset loading, latent encoding, feature extraction."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import clop as C
from .pose import FrameDims, PoseSequence, crop_to_window, load_pose_sequence, normalize_coordinates


class DataError(ValueError):
    pass


def load_dataset(manifest, frames: int = 64, kept_only: bool = True):
    """Normalized (S, frames, N, 3) poses, captions and ids from a manifest.

    Records carrying a ``kept`` flag of False are skipped when ``kept_only``.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest {manifest} not found")
    poses, captions, ids = [], [], []
    with manifest.open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if kept_only and rec.get("kept") is False:
                continue
            path = Path(rec["pose_path"])
            if not path.is_absolute():
                path = manifest.parent / path
            seq = load_pose_sequence(path)
            if seq.frames > frames:
                seq = crop_to_window(seq, frames)
            elif seq.frames < frames:
                raise DataError(f"{path}: {seq.frames} frames, need {frames}")
            dims = FrameDims(rec.get("frame_width", 512), rec.get("frame_height", 512))
            poses.append(normalize_coordinates(seq, dims).data)
            captions.append(rec.get("caption", ""))
            ids.append(rec.get("id", path.stem))
    if not poses:
        raise DataError(f"no usable clips in {manifest}")
    return np.stack(poses), captions, ids


@torch.no_grad()
def encode_latents(vae, poses, chunk: int = 32) -> np.ndarray:
    """Posterior means (S, f, n, c) for normalized poses."""
    p = torch.as_tensor(np.asarray(poses, dtype=np.float32))
    return torch.cat([vae.encode(p[i:i + chunk]).mu for i in range(0, len(p), chunk)]).numpy()


@torch.no_grad()
def decode_latents(vae, z, chunk: int = 32) -> np.ndarray:
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    return torch.cat([vae.decode(z[i:i + chunk]) for i in range(0, len(z), chunk)]).numpy()


@torch.no_grad()
def pose_embeddings(model: C.Clop, poses, normalize: bool = False) -> np.ndarray:
    h = C.pose_features(model, poses)
    return (C.l2_normalize(h) if normalize else h).numpy()


@torch.no_grad()
def text_embeddings(model: C.Clop, vocab: C.Vocabulary, captions, normalize: bool = True) -> np.ndarray:
    h = model.project_text(C.text_features(model, vocab, list(captions)))
    return (C.l2_normalize(h) if normalize else h).numpy()


def to_pixels(poses: np.ndarray, dims: FrameDims) -> np.ndarray:
    out = np.asarray(poses, dtype=np.float64).copy()
    out[..., 0] = (out[..., 0] + 1) * dims.width / 2
    out[..., 1] = (out[..., 1] + 1) * dims.height / 2
    out[..., 2] = out[..., 2].clip(0, 1)
    return out.astype(np.float32)


def pixel_sequence(pose: np.ndarray, dims: FrameDims) -> PoseSequence:
    return PoseSequence(to_pixels(pose, dims))
