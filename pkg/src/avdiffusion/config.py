"""Run configuration shared by all CLI commands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import DEFAULT_C, DEFAULT_THRESHOLD, LossConfig
from .formats import digest
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DESK_NUM_STEPS, linear_schedule
from .structmetrics import DEFAULT_EMPTY_THRESHOLD, DEFAULT_WINDOW_RADIUS
from .synthvessel import VesselTreeConfig

LOSS_FIELDS = ("loss", "c")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int
    resolution: int = 32
    num_steps: int = DESK_NUM_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    loss: str = "vessel"
    c: float = DEFAULT_C
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 1.0
    n_train: int = 500
    threshold: float = DEFAULT_THRESHOLD
    empty_threshold: float = DEFAULT_EMPTY_THRESHOLD
    window_radius: int = DEFAULT_WINDOW_RADIUS
    data_dir: str | None = None
    out_dir: str | None = None
    vessel_tree: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.resolution % 2**self.depth:
            raise ConfigError(f"resolution {self.resolution} not divisible by 2**depth = {2**self.depth}")
        for name in ("epochs", "n_train"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        try:
            self.loss_config()
            self.denoiser_config()
            self.tree_config()
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # derived configs

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(self.base_channels, self.depth, self.time_embed_dim)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.c)

    def schedule(self):
        return linear_schedule(self.num_steps, self.beta_start, self.beta_end)

    def tree_config(self, seed: int | None = None) -> VesselTreeConfig:
        base = {"height": self.resolution, "width": self.resolution, "seed": self.seed if seed is None else seed}
        if self.resolution >= 128:
            base = VesselTreeConfig.full_scale(**base).to_dict()
        base.update(self.vessel_tree)
        return VesselTreeConfig.from_dict(base)

    # serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, exclude: tuple[str, ...] = ()) -> str:
        d = self.to_dict()
        for k in exclude:
            d.pop(k, None)
        # paths do not change the computation
        d.pop("out_dir", None)
        return digest(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        if "seed" not in d or d["seed"] is None:
            raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        d: dict = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                d = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{p}: invalid JSON ({e})") from None
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)
