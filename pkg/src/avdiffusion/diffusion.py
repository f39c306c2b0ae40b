"""Forward noising, the two noise-prediction losses and the ancestral sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import numerics as nx
from .schedule import NoiseSchedule, posterior_variance
from .synthvessel import AVMask

# A denoiser maps (noised images, integer timesteps) to a noise estimate.
Denoiser = Callable[[nx.Tensor, np.ndarray], Union[nx.Tensor, np.ndarray]]

DEFAULT_C = 2.0
DEFAULT_THRESHOLD = 0.0


@dataclass(frozen=True)
class LossConfig:
    variant: str = "vessel"
    c: float = DEFAULT_C

    def __post_init__(self):
        if self.variant not in ("simple", "vessel"):
            raise ValueError(f"loss variant must be 'simple' or 'vessel', got {self.variant!r}")
        if self.c < 0:
            raise ValueError(f"weight exponent c must be >= 0, got {self.c!r}")


@dataclass(frozen=True)
class DiffusionBatch:
    x0: np.ndarray  # B x 2 x H x W in [-1, 1]
    raw_mask: np.ndarray  # same shape, {0, 1}
    t: np.ndarray  # B integer timesteps
    eps: np.ndarray  # standard normal, same shape as x0


def make_batch(raw_mask: np.ndarray, s: NoiseSchedule, rng: np.random.Generator, dtype=np.float32) -> DiffusionBatch:
    """Draw timesteps and noise for a stack of {0,1} masks."""
    raw_mask = np.asarray(raw_mask)
    if raw_mask.ndim != 4 or raw_mask.shape[1] != 2:
        raise ValueError(f"expected masks of shape Bx2xHxW, got {raw_mask.shape}")
    t = rng.integers(0, s.num_steps, size=raw_mask.shape[0])
    eps = rng.standard_normal(raw_mask.shape).astype(dtype)
    m = raw_mask.astype(dtype)
    return DiffusionBatch(x0=2 * m - 1, raw_mask=m, t=t, eps=eps)


def _check_timesteps(t, batch: int, s: NoiseSchedule) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t))
    if t.shape == (1,) and batch != 1:
        t = np.repeat(t, batch)
    if t.shape != (batch,):
        raise ValueError(f"need one timestep per batch element ({batch}), got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"timesteps must be integers, got dtype {t.dtype}")
    if t.min() < 0 or t.max() >= s.num_steps:
        raise ValueError(f"timesteps must lie in [0, {s.num_steps}), got range [{t.min()}, {t.max()}]")
    return t


def forward_diffuse(x0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """Noise clean images directly to timestep t in closed form."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} and noise shape {eps.shape} differ")
    t = _check_timesteps(t, x0.shape[0], s)
    ab = s.alpha_bars[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, eps.dtype), copy=False)


def _squared_error(denoiser: Denoiser, batch: DiffusionBatch, s: NoiseSchedule) -> nx.Tensor:
    x_t = forward_diffuse(batch.x0, batch.t, batch.eps, s)
    pred = denoiser(nx.Tensor(x_t), batch.t)
    diff = nx.sub(nx.Tensor(batch.eps), pred)
    return nx.mul(diff, diff)


def loss_simple(denoiser: Denoiser, batch: DiffusionBatch, s: NoiseSchedule) -> nx.Tensor:
    """Mean squared noise-prediction error over batch and pixels."""
    return nx.mean(_squared_error(denoiser, batch, s))


def loss_vessel(denoiser: Denoiser, batch: DiffusionBatch, s: NoiseSchedule, c: float = DEFAULT_C) -> nx.Tensor:
    """Noise-prediction error weighted by exp(c * mask) per pixel.

    Background pixels keep weight 1 and vessel pixels get e**c, so c = 0
    recovers :func:`loss_simple`.
    """
    if c < 0:
        raise ValueError(f"weight exponent c must be >= 0, got {c!r}")
    sq = _squared_error(denoiser, batch, s)
    weight = nx.exp(nx.Tensor(c * batch.raw_mask, dtype=sq.data.dtype))
    return nx.mean(nx.mul(sq, weight))


def diffusion_loss(denoiser: Denoiser, batch: DiffusionBatch, s: NoiseSchedule, cfg: LossConfig) -> nx.Tensor:
    if cfg.variant == "simple":
        return loss_simple(denoiser, batch, s)
    return loss_vessel(denoiser, batch, s, cfg.c)


def ddpm_sample(denoiser: Denoiser, s: NoiseSchedule, rng: np.random.Generator, shape,
                dtype=np.float32, x_T: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise down to a clamped x_0 estimate."""
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or shape[1] != 2:
        raise ValueError(f"sample shape must be Bx2xHxW, got {shape}")
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    b = shape[0]
    for t in range(s.num_steps - 1, -1, -1):
        eps = denoiser(nx.Tensor(x.astype(dtype)), np.full(b, t, dtype=np.int64))
        eps = np.asarray(getattr(eps, "data", eps), dtype=np.float64)
        coef = s.betas[t] / math.sqrt(1.0 - s.alpha_bars[t])
        x = (x - coef * eps) / math.sqrt(s.alphas[t])
        if t > 0:
            x = x + math.sqrt(posterior_variance(s, t)) * rng.standard_normal(shape)
    return np.clip(x, -1.0, 1.0).astype(dtype)


def binarize(sampled, threshold: float = DEFAULT_THRESHOLD):
    """Threshold samples in [-1, 1]; returns one AVMask per sample.

    A single 2xHxW sample gives a single mask, a stack gives a list.
    """
    if not -1 < threshold < 1:
        raise ValueError(f"threshold must lie in (-1, 1), got {threshold!r}")
    arr = np.asarray(getattr(sampled, "data", sampled))
    if arr.ndim == 3:
        return AVMask.from_array((arr > threshold).astype(np.uint8))
    if arr.ndim != 4:
        raise ValueError(f"expected 2xHxW or Bx2xHxW samples, got shape {arr.shape}")
    return [AVMask.from_array((a > threshold).astype(np.uint8)) for a in arr]
