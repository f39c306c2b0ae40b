"""Procedural artery/vein masks used as stand-in training data.

Vessel trees grow from points on a small disc (the optic disc analogue) as
random walks that bifurcate stochastically and thin at every split. Strokes
are rasterized by stamping filled discs at every walk step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

FOREGROUND_BAND = (0.01, 0.20)
MAX_RESAMPLES = 10


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AVMask:
    """Two binary channels, artery first, vein second. Channels may overlap."""

    artery: np.ndarray
    vein: np.ndarray
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        a = np.asarray(self.artery, dtype=np.uint8)
        v = np.asarray(self.vein, dtype=np.uint8)
        if a.ndim != 2 or a.shape != v.shape:
            raise ValueError(f"artery {a.shape} and vein {v.shape} must be equal 2-d shapes")
        if a.max(initial=0) > 1 or v.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "artery", a)
        object.__setattr__(self, "vein", v)

    @classmethod
    def from_array(cls, arr, seed: int | None = None) -> "AVMask":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"expected a 2xHxW array, got {arr.shape}")
        return cls(arr[0], arr[1], seed)

    @classmethod
    def empty(cls, height: int, width: int) -> "AVMask":
        z = np.zeros((height, width), np.uint8)
        return cls(z, z.copy())

    @property
    def height(self) -> int:
        return self.artery.shape[0]

    @property
    def width(self) -> int:
        return self.artery.shape[1]

    def to_array(self) -> np.ndarray:
        return np.stack([self.artery, self.vein])

    @property
    def foreground_fraction(self) -> float:
        """Fraction of pixels covered by either channel."""
        return float(np.mean(self.artery | self.vein))

    def __eq__(self, other):
        if not isinstance(other, AVMask):
            return NotImplemented
        return np.array_equal(self.artery, other.artery) and np.array_equal(self.vein, other.vein)


@dataclass(frozen=True)
class VesselTreeConfig:
    height: int = 32
    width: int = 32
    trees_per_channel: int = 2
    disc_center: tuple[float, float] = (0.5, 0.5)  # (x, y), fraction of image size
    disc_radius: float = 0.1
    root_width: float = 2.0
    width_decay: float = 0.7
    bifurcation_prob: float = 0.12
    branch_angle_range: tuple[float, float] = (25.0, 55.0)  # degrees
    max_depth: int = 2
    step_length: float = 1.0
    curvature: float = 0.12  # radians, std of heading change per step
    min_segment_steps: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        if self.trees_per_channel < 0 or self.max_depth < 0:
            raise ValueError("trees_per_channel and max_depth must be >= 0")
        if not 0 < self.width_decay < 1:
            raise ValueError(f"width_decay must lie in (0, 1), got {self.width_decay}")
        if not 0 <= self.bifurcation_prob <= 1:
            raise ValueError(f"bifurcation_prob must lie in [0, 1], got {self.bifurcation_prob}")
        lo, hi = self.branch_angle_range
        if not 0 < lo <= hi < 90:
            raise ValueError(f"branch_angle_range must lie within (0, 90) degrees, got {self.branch_angle_range}")
        if not 0 < self.step_length <= 1:
            # longer steps would leave gaps between stamped discs
            raise ValueError(f"step_length must lie in (0, 1], got {self.step_length}")
        if self.root_width <= 0:
            raise ValueError(f"root_width must be positive, got {self.root_width}")

    @classmethod
    def full_scale(cls, **overrides) -> "VesselTreeConfig":
        base = dict(height=256, width=256, trees_per_channel=3, root_width=6.0, width_decay=0.75,
                    bifurcation_prob=0.04, max_depth=5, disc_radius=0.06, min_segment_steps=12)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VesselTreeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown vessel tree config fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _stamp(canvas: np.ndarray, x: float, y: float, w: float):
    h_img, w_img = canvas.shape
    r = w / 2.0
    cx, cy = int(round(x)), int(round(y))
    ri = int(math.ceil(r))
    for yy in range(cy - ri, cy + ri + 1):
        if not 0 <= yy < h_img:
            continue
        for xx in range(cx - ri, cx + ri + 1):
            if 0 <= xx < w_img and (xx - x) ** 2 + (yy - y) ** 2 <= r * r:
                canvas[yy, xx] = 1
    if 0 <= cy < h_img and 0 <= cx < w_img:
        canvas[cy, cx] = 1


def _grow_tree(canvas, cfg: VesselTreeConfig, rng: np.random.Generator, x, y, heading):
    h_img, w_img = canvas.shape
    max_steps = 2 * (h_img + w_img)
    lo, hi = (math.radians(a) for a in cfg.branch_angle_range)
    stack = [(x, y, heading, cfg.root_width, 0)]
    while stack:
        x, y, heading, w, depth = stack.pop()
        for step in range(max_steps):
            if not (-0.5 <= x < w_img - 0.5 and -0.5 <= y < h_img - 0.5):
                break
            _stamp(canvas, x, y, w)
            if (step >= cfg.min_segment_steps and depth < cfg.max_depth
                    and rng.random() < cfg.bifurcation_prob):
                child_w = w * cfg.width_decay
                if child_w >= 1.0:
                    left, right = rng.uniform(lo, hi, size=2)
                    stack.append((x, y, heading + left, child_w, depth + 1))
                    stack.append((x, y, heading - right, child_w, depth + 1))
                break
            heading += rng.normal(0.0, cfg.curvature)
            x += cfg.step_length * math.cos(heading)
            y += cfg.step_length * math.sin(heading)


def generate_mask(cfg: VesselTreeConfig) -> AVMask:
    """Grow ``trees_per_channel`` trees per channel from the disc boundary."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    cx, cy = cfg.disc_center[0] * (w - 1), cfg.disc_center[1] * (h - 1)
    radius = cfg.disc_radius * min(h, w)
    n = cfg.trees_per_channel
    channels = []
    phase = rng.uniform(0, 2 * math.pi)
    for ch in range(2):
        canvas = np.zeros((h, w), np.uint8)
        for k in range(n):
            # arteries and veins alternate around the disc so their trees cross
            theta = phase + 2 * math.pi * (k + 0.5 * ch) / n + rng.normal(0.0, 0.15 * math.pi / max(n, 1))
            x = cx + radius * math.cos(theta)
            y = cy + radius * math.sin(theta)
            _grow_tree(canvas, cfg, rng, x, y, theta)
        channels.append(canvas)
    return AVMask(channels[0], channels[1], seed=cfg.seed)


def generate_dataset(n: int, cfg: VesselTreeConfig, rng=None, band: tuple[float, float] = FOREGROUND_BAND) -> list[AVMask]:
    """Generate n masks with distinct derived seeds inside the sparsity band."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(rng if rng is not None else cfg.seed)
    masks: list[AVMask] = []
    used: set[int] = set()
    lo, hi = band
    for i in range(n):
        fractions = []
        for _ in range(MAX_RESAMPLES):
            seed = int(rng.integers(0, 2**62))
            if seed in used:
                continue
            used.add(seed)
            mask = generate_mask(replace(cfg, seed=seed))
            frac = mask.foreground_fraction
            if lo <= frac <= hi:
                masks.append(mask)
                break
            fractions.append(frac)
        else:
            raise SynthConfigError(
                f"mask {i}: foreground fraction stayed outside [{lo:.0%}, {hi:.0%}] after "
                f"{MAX_RESAMPLES} draws (got {', '.join(f'{f:.3f}' for f in fractions)}); "
                + ("raise root_width, trees_per_channel or bifurcation_prob"
                   if max(fractions, default=0) < lo else
                   "lower root_width, trees_per_channel or max_depth"))
    return masks
