"""Numeric substrate: differentiable primitives, gradient checking, AdamW and checkpoints.

Tensors are ``torch.Tensor``; torch's autograd records the computation tape.
The primitives here add the shape contracts the rest of the package relies on
(no implicit broadcasting beyond a leading batch dimension).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class OptimizerError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.dim() >= 2 and b.dim() >= 2, "matmul needs rank >= 2 operands")
    _require(a.shape[-1] == b.shape[-2], f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    _require(b.dim() == 2 or a.shape[:-2] == b.shape[:-2],
             f"matmul batch dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _same_or_batch(a: Tensor, b: Tensor, op: str) -> None:
    ok = a.shape == b.shape or (b.dim() < a.dim() and a.shape[a.dim() - b.dim():] == b.shape)
    _require(ok, f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_batch(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_batch(a, b, "mul")
    return a * b


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """``x``: (batch, c_in, length); ``weight``: (c_out, c_in, kernel)."""
    _require(x.dim() == 3 and weight.dim() == 3, "conv1d expects (B, C, L) input and (O, C, K) weight")
    _require(x.shape[1] == weight.shape[1], f"conv1d channel mismatch {x.shape[1]} vs {weight.shape[1]}")
    _require(x.shape[2] + 2 * padding >= weight.shape[2], "conv1d kernel longer than padded input")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; ``mask`` is True where attending is allowed."""
    _require(q.shape[-1] == k.shape[-1], "attention: q and k widths differ")
    _require(k.shape[-2] == v.shape[-2], "attention: k and v lengths differ")
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def attention_weights(q: Tensor, k: Tensor, mask: Tensor | None = None) -> Tensor:
    """The explicit softmax(q k^T / sqrt(d)) matrix (reference path for :func:`attention`)."""
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return softmax(logits, dim=-1)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")


def mean(x: Tensor, dim=None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def mse(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mse: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between autograd and central finite differences of ``f`` at ``x``.

    Evaluated in float64. Per element the error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ValueError(f"gradient_check needs a scalar function, got shape {tuple(y.shape)}")
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)
    numeric = torch.zeros_like(analytic)
    flat = x.detach().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            probe = flat.clone()
            probe[i] += eps
            hi = f(probe.view_as(x)).item()
            probe[i] -= 2 * eps
            lo = f(probe.view_as(x)).item()
            numeric[i] = (hi - lo) / (2 * eps)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(1e-6, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())


def gradient_check_params(loss_fn: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-4,
                          max_entries: int | None = None, generator: torch.Generator | None = None) -> float:
    """Like :func:`gradient_check`, but over (a sample of) the entries of parameter tensors in place."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat_idx = torch.arange(p.numel())
        if max_entries is not None and p.numel() > max_entries:
            flat_idx = torch.randperm(p.numel(), generator=generator)[:max_entries]
        with torch.no_grad():
            view = p.view(-1)
            for i in flat_idx.tolist():
                orig = view[i].item()
                view[i] = orig + eps
                hi = loss_fn().item()
                view[i] = orig - eps
                lo = loss_fn().item()
                view[i] = orig
                num = (hi - lo) / (2 * eps)
                ana = g.reshape(-1)[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


def adamw_step(params: list[Tensor], grads: list[Tensor], state: dict, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8, names: list[str] | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place. ``state`` carries step count and moments."""
    names = names or [f"param[{i}]" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name}")
    step = state.get("step", 0) + 1
    state["step"] = step
    b1, b2 = betas
    moments = state.setdefault("moments", {})
    with torch.no_grad():
        for name, p, g in zip(names, params, grads):
            m, v = moments.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            moments[name] = (m, v)
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a module's named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self) -> None:
        names, params, grads = [], [], []
        for n, p in self.named:
            if p.grad is None:
                continue
            names.append(n)
            params.append(p)
            grads.append(p.grad)
        adamw_step(params, grads, self.state, self.lr, self.betas, self.weight_decay, self.eps, names)


CKPT_MAGIC = b"MVCK"


def save_checkpoint(path, tensors: dict[str, Tensor]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw_name = name.encode("utf-8")
        t = t.detach().to(torch.float32).contiguous()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = math.prod(dims)
            if pos + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            values = torch.frombuffer(bytearray(raw[pos:pos + 4 * n]), dtype=torch.float32)
            out[name] = values.reshape(dims).clone()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated archive") from exc
    return out


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_sidecar(path, config: dict) -> None:
    """Architecture config stored next to a checkpoint as ``<path>.json``."""
    import json
    sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    import json
    p = sidecar_path(path)
    if not p.exists():
        raise CheckpointError(f"missing architecture config {p}")
    return json.loads(p.read_text())
