"""Noise schedules for the forward and reverse diffusion processes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DESK_NUM_STEPS = 100
FULL_NUM_STEPS = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep betas with their derived alphas and cumulative products.

    Timesteps are 0-indexed: ``alpha_bars[t]`` is the product of
    ``alphas[0..t]`` inclusive.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError(f"betas must be a non-empty 1-d sequence, got shape {betas.shape}")
        bad = np.flatnonzero((betas <= 0) | (betas >= 1))
        if bad.size:
            raise ValueError(f"beta[{bad[0]}] = {betas[bad[0]]!r} is outside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.empty_like(alphas)
        acc = 1.0
        for i, a in enumerate(alphas):
            acc = acc * a
            alpha_bars[i] = acc
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars)

    def to_dict(self) -> dict:
        return {"betas": [float(b) for b in self.betas]}


def linear_schedule(num_steps: int = DESK_NUM_STEPS, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not 0 < beta_start < 1:
        raise ValueError(f"beta_start = {beta_start!r} must lie in (0, 1)")
    if not 0 < beta_end < 1:
        raise ValueError(f"beta_end = {beta_end!r} must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError(f"beta_start = {beta_start!r} exceeds beta_end = {beta_end!r}")
    if num_steps == 1:
        return NoiseSchedule.from_betas([beta_start])
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(num_steps)))


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    """Variance of q(x_{t-1} | x_t, x_0); zero at the first step."""
    if not 0 <= t < s.num_steps:
        raise IndexError(f"timestep {t} out of range [0, {s.num_steps})")
    prev = s.alpha_bars[t - 1] if t > 0 else 1.0
    return float((1.0 - prev) / (1.0 - s.alpha_bars[t]) * s.betas[t])
