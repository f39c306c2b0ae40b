"""Small tensor library with tape-based reverse-mode differentiation.

Only the handful of operations the denoiser and the two training losses need
are provided. Arrays are NCHW, stored as float32 by default with float64
accumulation inside reductions. Gradient checks switch the storage type to
float64 through :func:`precision`.

Typical use::

    with ComputationRecord() as rec:
        loss = mean(mul(w, w))
    grads = backward(rec, loss)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "precision",
    "elementwise",
    "add",
    "sub",
    "mul",
    "exp",
    "silu",
    "scale",
    "conv2d",
    "dense",
    "group_norm",
    "add_channel",
    "upsample2x",
    "concat_channels",
    "tsum",
    "mean",
    "backward",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _active_record():
    return getattr(_state, "record", None)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage type used for new tensors."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Immutable n-dimensional array, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype(), copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class ComputationRecord:
    """Ordered log of the primitive operations executed inside its context.

    Nodes are appended in execution order, so the log is topologically sorted
    by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "ComputationRecord":
        self._prev = _active_record()
        _state.record = self
        return self

    def __exit__(self, *exc):
        _state.record = self._prev
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, substitutions: dict[Tensor, np.ndarray] | None = None,
               only_affected: bool = False) -> dict[int, np.ndarray]:
        """Re-execute the logged nodes, optionally with replaced leaf values.

        Returns a map from ``id(output tensor)`` to the recomputed array. With
        ``only_affected`` nodes that do not depend on a substituted leaf are
        skipped and keep their recorded outputs.
        """
        env: dict[int, np.ndarray] = {}
        for t, v in (substitutions or {}).items():
            env[id(t)] = np.asarray(v, dtype=t.data.dtype)
        for node in self.nodes:
            if only_affected and not any(id(x) in env for x in node.inputs):
                continue
            args = [env.get(id(x), x.data) for x in node.inputs]
            env[id(node.output)] = node.forward(*args)
        return env


def _record(op, inputs, out_arr, forward, vjp) -> Tensor:
    out = Tensor._wrap(out_arr)
    rec = _active_record()
    if rec is not None and any(x.requires_grad for x in inputs):
        rec.nodes.append(_Node(op, tuple(inputs), out, forward, vjp))
        out.requires_grad = True
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(x) -> bool:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.size == 1 and arr.ndim <= 1


def _sum_to_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum(dtype=np.float64), dtype=like.data.dtype).reshape(like.shape)


# ---------------------------------------------------------------- elementwise


def _binary(op: str, a, b, f, da, db) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    b_is_scalar = _is_scalar(b) and b.shape != a.shape
    if not b_is_scalar and a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    out = f(a.data, b.data.reshape(()) if b_is_scalar else b.data)

    def forward(x, y):
        return f(x, y.reshape(()) if b_is_scalar else y)

    def vjp(g):
        ga = da(g, a.data, b.data.reshape(()) if b_is_scalar else b.data)
        gb = db(g, a.data, b.data.reshape(()) if b_is_scalar else b.data)
        if b_is_scalar and gb is not None:
            gb = _sum_to_scalar(gb, b)
        return ga, gb

    return _record(op, (a, b), out.astype(a.data.dtype, copy=False), forward, vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, s: float) -> Tensor:
    """Multiply by a constant scalar."""
    return mul(a, float(s))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, np.exp, lambda g: (g * out,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def vjp(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _record("silu", (a,), out, lambda x: x * _sigmoid(x), vjp)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "exp": exp, "silu": silu}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of ``add, sub, mul, exp, silu`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("exp", "silu"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------- reductions


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    dt = a.data.dtype

    def forward(x):
        return np.asarray(x.sum(dtype=np.float64), dtype=dt)

    return _record("sum", (a,), forward(a.data), forward, lambda g: (np.broadcast_to(g, a.shape).astype(dt),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    dt = a.data.dtype
    n = a.data.size

    def forward(x):
        return np.asarray(x.sum(dtype=np.float64) / n, dtype=dt)

    def vjp(g):
        return (np.full(a.shape, g / n, dtype=dt),)

    return _record("mean", (a,), forward(a.data), forward, vjp)


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches of an NCHW array as rows ordered (kh, kw, C), shape (N, Ho, Wo, kh*kw*C).

    Work happens on a channel-last view; when x is already a channel-last
    buffer exposed as NCHW (as conv2d outputs are) no transpose copy occurs.
    """
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, _, _, c = xh.shape
    if kh == 1 and kw == 1 and stride == 1:
        return np.ascontiguousarray(xh)
    win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, kh * kw * c)


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    """Scatter-add (N, Ho, Wo, kh, kw, C) patch gradients back onto NCHW."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return out.transpose(0, 3, 1, 2)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    inputs: tuple[Tensor, ...] = (x, kernel) if bias is None else (x, kernel, _as_tensor(bias))
    if bias is not None and inputs[2].shape != (o,):
        raise ShapeError(f"conv2d: bias shape {inputs[2].shape} does not match {o} output channels")

    def kmat(kd):
        return kd.transpose(0, 2, 3, 1).reshape(o, -1)

    def apply(cols, kd, bd):
        out = cols.reshape(-1, cols.shape[-1]) @ kmat(kd).T
        if bd is not None:
            out += bd
        # channel-last buffer seen as NCHW
        return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def forward(xd, kd, bd=None):
        return apply(_im2col(xd, kh, kw, stride, padding), kd, bd)

    cols = _im2col(x.data, kh, kw, stride, padding)
    out = apply(cols, kernel.data, inputs[2].data if bias is not None else None)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (cols.reshape(-1, cols.shape[-1]).T @ g2).T.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat(kernel.data)).reshape(n, ho, wo, kh, kw, c)
            gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _record("conv2d", inputs, out, forward, vjp)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (N, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    inputs: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, _as_tensor(bias))

    def forward(xd, wd, bd=None):
        out = xd @ wd.T
        return out + bd if bd is not None else out

    def vjp(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _record("dense", inputs, forward(*(t.data for t in inputs)), forward, vjp)


# ---------------------------------------------------------------- normalization


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) with per-channel affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} do not match {c} channels")
    dt = x.data.dtype
    cpg = c // groups

    def grouped(arr):
        # channel-last grouping; free for buffers produced by conv2d
        return arr.transpose(0, 2, 3, 1).reshape(n, h * w, groups, cpg)

    def ungrouped(arr):
        return arr.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def gmean(arr):
        return arr.mean(axis=(1, 3), keepdims=True, dtype=np.float64).astype(dt)

    def stats(xd):
        xg = grouped(xd)
        d = xg - gmean(xg)
        var = (d * d).mean(axis=(1, 3), keepdims=True, dtype=np.float64)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        return d * inv, inv

    def affine(xhat, gd, bd):
        return ungrouped(xhat * gd.reshape(groups, cpg) + bd.reshape(groups, cpg))

    def forward(xd, gd, bd):
        return affine(stats(xd)[0], gd, bd)

    xhat, inv = stats(x.data)
    out = affine(xhat, gamma.data, beta.data)

    def vjp(g):
        gg = grouped(g)
        ggamma = (gg * xhat).sum(axis=(0, 1), dtype=np.float64).astype(dt).reshape(c)
        gbeta = gg.sum(axis=(0, 1), dtype=np.float64).astype(dt).reshape(c)
        gx = None
        if x.requires_grad:
            gxhat = gg * gamma.data.reshape(groups, cpg)
            gx = ungrouped(inv * (gxhat - gmean(gxhat) - xhat * gmean(gxhat * xhat)))
        return gx, ggamma, gbeta

    return _record("group_norm", (x, gamma, beta), out, forward, vjp)


# ---------------------------------------------------------------- layout helpers


def add_channel(x, v) -> Tensor:
    """Add a per-sample, per-channel vector v (N, C) to x (N, C, H, W)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.data.ndim != 4 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel: vector {v.shape} does not match feature map {x.shape}")

    def forward(xd, vd):
        return xd + vd[:, :, None, None]

    def vjp(g):
        return g, g.sum(axis=(2, 3), dtype=np.float64).astype(g.dtype)

    return _record("add_channel", (x, v), forward(x.data, v.data), forward, vjp)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two."""
    x = _as_tensor(x)
    n, c, h, w = x.shape

    def forward(xd):
        return xd.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2x", (x,), forward(x.data), forward, vjp)


def concat_channels(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def forward(ad, bd):
        return np.concatenate([ad, bd], axis=1)

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return _record("concat", (a, b), forward(a.data, b.data), forward, vjp)


# ---------------------------------------------------------------- gradients


def backward(record: ComputationRecord, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every trainable leaf.

    Leaves are tensors created with ``requires_grad=True``; intermediate
    results and constants get no entry.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in record.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced inside this record")
    leaves: dict[int, Tensor] = {}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) not in produced:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


def finite_diff_grad(f: Callable[[Sequence[np.ndarray]], float], params: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of several arrays."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    params = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def parameters(named: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    """Wrap arrays as trainable leaves keyed by name."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in named}
