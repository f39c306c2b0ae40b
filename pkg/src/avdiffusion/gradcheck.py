"""Finite-difference checks of every primitive and of the full denoiser loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .denoiser import DenoiserConfig, init_params, predict_noise
from .diffusion import LossConfig, diffusion_loss, make_batch
from .schedule import linear_schedule

PRIMITIVE_TOL = 1e-4
PRIMITIVE_H = 1e-3


@dataclass
class CheckResult:
    name: str
    n: int
    frac_below_1e3: float
    max_rel_err: float
    seconds: float

    def passed(self, max_tol: float = 1e-2, frac_needed: float = 0.95) -> bool:
        """At most ``max_tol`` everywhere and below 1e-3 on ``frac_needed`` of entries."""
        return self.max_rel_err < max_tol and self.frac_below_1e3 >= frac_needed


def _rel(a, b, scale):
    # elementwise error, floored at a small fraction of the tensor's gradient scale
    return nx.relative_error(a, b, floor=max(1e-6, 1e-3 * scale))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = rng.standard_normal
    return {
        "add": (lambda a, b: nx.add(a, b), [r((3, 4)), r((3, 4))]),
        "sub": (lambda a, b: nx.sub(a, b), [r((3, 4)), r((3, 4))]),
        "mul": (lambda a, b: nx.mul(a, b), [r((3, 4)), r((3, 4))]),
        "mul_scalar": (lambda a, s: nx.mul(a, s), [r((3, 4)), r(())]),
        "exp": (lambda a: nx.exp(a), [r((3, 4))]),
        "silu": (lambda a: nx.silu(a), [3 * r((3, 4))]),
        "sum": (lambda a: nx.tsum(a), [r((2, 3))]),
        "mean": (lambda a: nx.mean(a), [r((2, 3))]),
        "conv2d": (lambda x, k, b: nx.conv2d(x, k, b, stride=1, padding=1), [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r((4,))]),
        "conv2d_stride2": (lambda x, k, b: nx.conv2d(x, k, b, stride=2, padding=1), [r((2, 2, 6, 6)), r((3, 2, 3, 3)), r((3,))]),
        "conv2d_1x1": (lambda x, k: nx.conv2d(x, k), [r((1, 3, 4, 4)), r((2, 3, 1, 1))]),
        "dense": (lambda x, w, b: nx.dense(x, w, b), [r((3, 5)), r((4, 5)), r((4,))]),
        "group_norm": (lambda x, g, b: nx.group_norm(x, g, b, 2), [r((2, 4, 3, 3)), 1 + 0.2 * r((4,)), r((4,))]),
        "add_channel": (lambda x, v: nx.add_channel(x, v), [r((2, 3, 2, 2)), r((2, 3))]),
        "upsample2x": (lambda x: nx.upsample2x(x), [r((1, 2, 3, 3))]),
        "concat": (lambda a, b: nx.concat_channels(a, b), [r((1, 2, 3, 3)), r((1, 1, 3, 3))]),
    }


def check_primitive(name: str, fn: Callable, arrays: list[np.ndarray], rng: np.random.Generator,
                    h: float = PRIMITIVE_H) -> float:
    """Max relative error between backward() and central differences.

    The op output is contracted with a fixed random projection so the
    checked function is scalar.
    """
    with nx.precision(np.float64):
        leaves = [nx.Tensor(a, requires_grad=True) for a in arrays]
        with nx.ComputationRecord() as rec:
            out = fn(*leaves)
            proj = nx.Tensor(rng.standard_normal(out.shape))
            loss = nx.tsum(nx.mul(out, proj))
        grads = nx.backward(rec, loss)

        def f(arrs):
            return float(nx.tsum(nx.mul(fn(*[nx.Tensor(a) for a in arrs]), proj)).data)

        fd = nx.finite_diff_grad(f, arrays, h)
    worst = 0.0
    for leaf, g_fd in zip(leaves, fd):
        g = grads[leaf]
        scale = float(np.abs(g_fd).max(initial=0.0))
        worst = max(worst, float(_rel(g, g_fd, scale).max(initial=0.0)))
    return worst


def check_primitives(seeds=range(100), h: float = PRIMITIVE_H) -> dict[str, float]:
    """Worst relative error per primitive over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, arrays) in _primitive_cases(rng).items():
            err = check_primitive(name, fn, arrays, rng, h)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_denoiser_loss(loss_cfg: LossConfig, cfg: DenoiserConfig | None = None, size: int = 8,
                        batch: int = 2, seed: int = 0, h: float = 1e-5) -> CheckResult:
    """Compare the analytic loss gradient with central differences, per parameter."""
    cfg = cfg or DenoiserConfig(base_channels=8, depth=1, time_embed_dim=8)
    s = linear_schedule(100)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    with nx.precision(np.float64):
        params = init_params(seed, cfg).astype(np.float64)
        masks = (rng.random((batch, 2, size, size)) < 0.2).astype(np.float64)
        b = make_batch(masks, s, rng, dtype=np.float64)
        leaves = params.leaves()
        with nx.ComputationRecord() as rec:
            loss = diffusion_loss(lambda x, t: predict_noise((cfg, leaves), x, t), b, s, loss_cfg)
        analytic = nx.backward(rec, loss)
        names = list(leaves)
        fd = []
        for k in names:
            leaf = leaves[k]

            def f(arrs, leaf=leaf):
                # re-run only the part of the network downstream of this leaf
                return float(rec.replay({leaf: arrs[0]}, only_affected=True)[id(loss)])

            fd.append(nx.finite_diff_grad(f, [leaf.data], h)[0])
        grads = {k: analytic[leaves[k]] for k in names}
    errs = []
    for k, g_fd in zip(names, fd):
        scale = float(np.abs(g_fd).max(initial=0.0))
        errs.append(_rel(grads[k], g_fd, scale).ravel())
    e = np.concatenate(errs)
    return CheckResult(f"denoiser/{loss_cfg.variant}", int(e.size), float(np.mean(e < 1e-3)),
                       float(e.max()), time.perf_counter() - t0)


def run_suite(seeds=range(100), denoiser: bool = True, log=print) -> bool:
    ok = True
    for name, err in check_primitives(seeds).items():
        good = err < PRIMITIVE_TOL
        ok &= good
        log(f"{'PASS' if good else 'FAIL'} primitive {name:<15} max rel err {err:.2e}")
    if denoiser:
        for lc in (LossConfig("simple"), LossConfig("vessel", 2.0)):
            r = check_denoiser_loss(lc)
            good = r.passed()
            ok &= good
            log(f"{'PASS' if good else 'FAIL'} {r.name:<25} {r.n} params, {r.frac_below_1e3:.1%} < 1e-3, "
                f"max rel err {r.max_rel_err:.2e}, {r.seconds:.1f}s")
    return ok
