"""Noise-prediction U-Net, Adam optimizer and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .diffusion import LossConfig, diffusion_loss, make_batch
from .schedule import NoiseSchedule
from .synthvessel import AVMask

log = logging.getLogger(__name__)

IO_CHANNELS = 2
MAX_GROUPS = 8


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite. Carries the last parameters that were finite."""

    def __init__(self, msg, params, history, epoch):
        super().__init__(msg)
        self.params = params
        self.history = history
        self.epoch = epoch


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")

    def level_channels(self, i: int) -> int:
        return self.base_channels * 2**i

    @property
    def mid_channels(self) -> int:
        return self.level_channels(self.depth)

    def check_input(self, shape: Sequence[int]):
        if len(shape) != 4 or shape[1] != IO_CHANNELS:
            raise nx.ShapeError(f"denoiser input must be Bx{IO_CHANNELS}xHxW, got {tuple(shape)}")
        f = 2**self.depth
        if shape[2] % f or shape[3] % f:
            raise nx.ShapeError(f"spatial size {shape[2]}x{shape[3]} not divisible by 2**depth = {f}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray]

    def leaves(self) -> dict[str, nx.Tensor]:
        return nx.parameters(self.tensors.items())

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def __len__(self):
        return sum(v.size for v in self.tensors.values())


def _groups(ch: int) -> int:
    return max(g for g in range(1, MAX_GROUPS + 1) if ch % g == 0)


def _layout(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every parameter; kind is weight, bias, gain."""
    e = cfg.time_embed_dim
    layout: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, cin, cout, k):
        layout.append((f"{name}.w", (cout, cin, k, k), "weight"))
        layout.append((f"{name}.b", (cout,), "bias"))

    def lin(name, fin, fout):
        layout.append((f"{name}.w", (fout, fin), "weight"))
        layout.append((f"{name}.b", (fout,), "bias"))

    def norm(name, ch):
        layout.append((f"{name}.g", (ch,), "gain"))
        layout.append((f"{name}.b", (ch,), "bias"))

    def block(name, cin, cout):
        norm(f"{name}.norm1", cin)
        conv(f"{name}.conv1", cin, cout, 3)
        lin(f"{name}.temb", e, cout)
        norm(f"{name}.norm2", cout)
        conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1)

    lin("time.dense1", e, e)
    lin("time.dense2", e, e)
    conv("in", IO_CHANNELS, cfg.base_channels, 3)
    cin = cfg.base_channels
    for i in range(cfg.depth):
        ch = cfg.level_channels(i)
        block(f"down{i}", cin, ch)
        conv(f"down{i}.pool", ch, ch, 3)
        cin = ch
    block("mid", cin, cfg.mid_channels)
    cin = cfg.mid_channels
    for i in reversed(range(cfg.depth)):
        ch = cfg.level_channels(i)
        block(f"up{i}", cin + ch, ch)
        cin = ch
    norm("out.norm", cin)
    conv("out", cin, IO_CHANNELS, 3)
    return layout


def init_params(rng, cfg: DenoiserConfig) -> DenoiserParams:
    """He-normal weights, zero biases, unit normalization gains."""
    if not isinstance(cfg, DenoiserConfig):
        raise TypeError(f"expected DenoiserConfig, got {type(cfg).__name__}")
    rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape, kind in _layout(cfg):
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        elif kind == "gain":
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return DenoiserParams(cfg, tensors)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _forward(p: dict[str, nx.Tensor], cfg: DenoiserConfig, x: nx.Tensor, t) -> nx.Tensor:
    dt = x.data.dtype
    emb = nx.Tensor(timestep_embedding(t, cfg.time_embed_dim), dtype=dt)
    emb = nx.dense(emb, p["time.dense1.w"], p["time.dense1.b"])
    emb = nx.silu(nx.dense(nx.silu(emb), p["time.dense2.w"], p["time.dense2.b"]))

    def conv(name, h, stride=1):
        k = p[f"{name}.w"].shape[-1]
        return nx.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=k // 2)

    def norm(name, h):
        return nx.group_norm(h, p[f"{name}.g"], p[f"{name}.b"], _groups(h.shape[1]))

    def block(name, h):
        r = conv(f"{name}.conv1", nx.silu(norm(f"{name}.norm1", h)))
        r = nx.add_channel(r, nx.dense(emb, p[f"{name}.temb.w"], p[f"{name}.temb.b"]))
        r = conv(f"{name}.conv2", nx.silu(norm(f"{name}.norm2", r)))
        skip = conv(f"{name}.skip", h) if f"{name}.skip.w" in p else h
        return nx.add(r, skip)

    h = conv("in", x)
    skips = []
    for i in range(cfg.depth):
        h = block(f"down{i}", h)
        skips.append(h)
        h = conv(f"down{i}.pool", h, stride=2)
    h = block("mid", h)
    for i in reversed(range(cfg.depth)):
        h = nx.concat_channels(nx.upsample2x(h), skips[i])
        h = block(f"up{i}", h)
    return conv("out", nx.silu(norm("out.norm", h)))


def predict_noise(params, x_t, t) -> nx.Tensor:
    """Noise estimate for images x_t at integer timesteps t.

    ``params`` is a :class:`DenoiserParams` (evaluated as constants) or a
    ``(config, dict of Tensor)`` pair when gradients are needed.
    """
    if isinstance(params, DenoiserParams):
        cfg = params.config
        dt = x_t.data.dtype if isinstance(x_t, nx.Tensor) else np.asarray(x_t).dtype
        leaves = {k: nx.Tensor(v, dtype=dt) for k, v in params.tensors.items()}
    else:
        cfg, leaves = params
    x = x_t if isinstance(x_t, nx.Tensor) else nx.Tensor(x_t)
    cfg.check_input(x.shape)
    t = np.atleast_1d(np.asarray(t))
    if t.shape == (1,):
        t = np.repeat(t, x.shape[0])
    if t.shape != (x.shape[0],):
        raise nx.ShapeError(f"need {x.shape[0]} timesteps, got shape {t.shape}")
    return _forward(leaves, cfg, x, t)


def denoiser_fn(params: DenoiserParams) -> Callable:
    """Bind parameters into the (x_t, t) -> noise callable used by samplers."""
    return lambda x_t, t: predict_noise(params, x_t, t)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: DenoiserParams, **hyper) -> "OptimizerState":
        st = cls(**hyper)
        st.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        st.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return st

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: DenoiserParams, grads: dict[str, np.ndarray], st: OptimizerState):
    """One bias-corrected Adam update. Returns new (params, state)."""
    missing = set(params.tensors) ^ set(grads)
    if missing:
        raise KeyError(f"gradients not aligned with parameters: {sorted(missing)[:5]}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    step = st.step + 1
    b1, b2 = st.beta1, st.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_t, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k].astype(np.float64)
        m = b1 * st.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * st.v.get(k, 0.0) + (1 - b2) * g * g
        update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        new_t[k] = (p - update).astype(p.dtype)
        new_m[k] = np.asarray(m, dtype=p.dtype).reshape(p.shape)
        new_v[k] = np.asarray(v, dtype=p.dtype).reshape(p.shape)
    new_state = OptimizerState(st.lr, b1, b2, st.eps, step, new_m, new_v)
    return DenoiserParams(params.config, new_t), new_state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        grads = {k: (g * f).astype(g.dtype) for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------- training


def loss_and_grads(params: DenoiserParams, batch, s: NoiseSchedule, loss_cfg: LossConfig):
    leaves = params.leaves()
    with nx.ComputationRecord() as rec:
        loss = diffusion_loss(lambda x, t: predict_noise((params.config, leaves), x, t), batch, s, loss_cfg)
    raw = nx.backward(rec, loss)
    grads = {k: raw.get(v, np.zeros_like(v.data)) for k, v in leaves.items()}
    return float(loss.data), grads


@dataclass
class TrainResult:
    params: DenoiserParams
    history: list[float]
    opt_state: OptimizerState


def stack_masks(dataset: Sequence[AVMask]) -> np.ndarray:
    if not dataset:
        raise ValueError("training dataset is empty")
    shapes = {(m.height, m.width) for m in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all masks must share one resolution, found {sorted(shapes)}")
    return np.stack([m.to_array() for m in dataset]).astype(np.float32)


def train(dataset: Sequence[AVMask], cfg: DenoiserConfig, loss_cfg: LossConfig, s: NoiseSchedule,
          seed: int, epochs: int, batch_size: int = 16, lr: float = 1e-3, grad_clip: float = 1.0,
          params: DenoiserParams | None = None, opt_state: OptimizerState | None = None,
          start_epoch: int = 0, history: Sequence[float] = (),
          on_epoch_end: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Minibatch Adam on the configured diffusion loss.

    Every epoch draws its shuffling, timesteps and noise from a generator
    seeded by ``(seed, epoch)``, so resuming from a saved epoch reproduces an
    uninterrupted run exactly.
    """
    data = stack_masks(dataset)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if params is None:
        params = init_params(seed, cfg)
    elif params.config != cfg:
        raise ValueError("supplied parameters were built for a different DenoiserConfig")
    cfg.check_input(data.shape)
    if opt_state is None:
        opt_state = OptimizerState.for_params(params, lr=lr)
    history = list(history)
    n = len(data)
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            batch = make_batch(data[idx], s, rng)
            loss, grads = loss_and_grads(params, batch, s, loss_cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", params, history, epoch)
            grads, _ = clip_grad_norm(grads, grad_clip)
            params, opt_state = adam_step(params, grads, opt_state)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.5f", epoch, history[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, TrainResult(params, list(history), opt_state))
    return TrainResult(params, history, opt_state)
