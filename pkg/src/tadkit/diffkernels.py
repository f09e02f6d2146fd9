"""Small reverse-mode autodiff over numpy arrays.

Only the operators the detection networks need are provided. Arrays are laid
out batch first, ``(B, C, T)`` or ``(B, C, T, H, W)``; time is always axis 2.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ConfigError

_TRACE: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the discrete branch decisions (ReLU masks, pooling argmaxes, ...)
    taken during forward passes run inside the block."""
    global _TRACE
    prev = _TRACE
    _TRACE = []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def note_branch(arr) -> None:
    if _TRACE is not None:
        _TRACE.append(np.asarray(arr).copy())


class Tensor:
    """Array value plus the closure that maps its gradient to its parents' gradients."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.data)
        backward([self], [grad])


class Param(Tensor):
    """Trainable leaf tensor. ``grad`` has the value's shape once anything has
    been accumulated; ``None`` stands for an all-zero gradient."""

    __slots__ = ()

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, copy=True), name=name)
        self.requires_grad = True

    @property
    def value(self):
        return self.data

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def zero_grad(self):
        self.grad = None


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(roots: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """Accumulate gradients of ``sum_i <roots[i], grads[i]>`` into every reachable Param."""
    pending: dict[int, np.ndarray] = {}
    for r, g in zip(roots, grads):
        g = np.asarray(g, dtype=r.data.dtype)
        if g.shape != r.data.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {r.data.shape}")
        pending[id(r)] = pending[id(r)] + g if id(r) in pending else g
    for node in reversed(_toposort(roots)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# elementwise ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return Tensor(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ConfigError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return Tensor(x.data + y.data, (x, y), lambda g: (g, g), "add")


def scale(x: Tensor, factor: float) -> Tensor:
    return Tensor(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def mean_of(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    if not xs:
        raise ValueError("mean_of needs at least one tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ConfigError(f"mean_of: shape mismatch {x.shape} vs {shape}")
    if len(xs) == 1:
        return xs[0]
    n = len(xs)
    out = sum(x.data for x in xs[1:]) + xs[0].data
    return Tensor(out / n, tuple(xs), lambda g: tuple(g / n for _ in range(n)), "mean")


def scalar_from(inputs: Sequence[Tensor], value: float, grads: Sequence[np.ndarray]) -> Tensor:
    """Wrap an externally computed scalar and its input gradients as a graph node."""
    grads = tuple(np.asarray(gi, dtype=x.data.dtype) for gi, x in zip(grads, inputs))
    return Tensor(np.asarray(value, dtype=np.float64), tuple(inputs),
                  lambda g: tuple(gi * g for gi in grads), "scalar")


# temporal operators -----------------------------------------------------------

def conv_out_len(t: int, k: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - k) // stride + 1


def conv_temporal(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                  padding: int = 0) -> Tensor:
    """Cross-correlation along time, and along space when ``x`` carries H, W axes.

    ``w`` is ``(C_out, C_in, k)`` or ``(C_out, C_in, k, kh, kw)``. A 1D kernel on
    a spatial input acts as a spatial 1x1 kernel. Spatial axes use stride 1 and
    'same' padding.
    """
    xd, wd = x.data, w.data
    if xd.ndim not in (3, 5):
        raise ConfigError(f"conv_temporal: expected (B,C,T[,H,W]) input, got {xd.shape}")
    if wd.ndim == 3 and xd.ndim == 5:
        wd = wd[:, :, :, None, None]
    if wd.ndim != xd.ndim:
        raise ConfigError(f"conv_temporal: kernel {w.shape} incompatible with input {xd.shape}")
    c_out, c_in, k = wd.shape[:3]
    if xd.shape[1] != c_in:
        raise ConfigError(f"conv_temporal: input has {xd.shape[1]} channels, kernel expects {c_in}")
    if k % 2 != 1 or any(s % 2 != 1 for s in wd.shape[3:]):
        raise ConfigError("conv_temporal: kernel sizes must be odd")
    t_in = xd.shape[2]
    t_out = conv_out_len(t_in, k, stride, padding)
    if t_out < 1:
        raise ConfigError(f"conv_temporal: input length {t_in} too short for kernel {k}")
    sp_k = wd.shape[3:]
    sp_pad = [s // 2 for s in sp_k]
    pad = [(0, 0), (0, 0), (padding, padding)] + [(p, p) for p in sp_pad]
    # channel-major padded copy so every tap is a single tensordot over axis 0
    xp = np.moveaxis(np.pad(xd, pad), 1, 0)
    spatial = xd.shape[3:]
    offsets = list(itertools.product(range(k), *[range(s) for s in sp_k]))

    def tap(i, sp):
        sl = (slice(None), slice(None), slice(i, i + stride * (t_out - 1) + 1, stride))
        sl += tuple(slice(o, o + n) for o, n in zip(sp, spatial))
        return sl

    out = None
    for off in offsets:
        i, sp = off[0], off[1:]
        contrib = np.tensordot(wd[(slice(None), slice(None)) + off], xp[tap(i, sp)], axes=([1], [0]))
        out = contrib if out is None else out + contrib
    if b is not None:
        out = out + b.data.reshape((-1,) + (1,) * (out.ndim - 1))
    out = np.ascontiguousarray(np.moveaxis(out, 0, 1))
    w_was_3d = w.data.ndim == 3 and xd.ndim == 5

    def backward_fn(g):
        gt = np.moveaxis(g, 1, 0)  # (O, B, T', ...)
        red = tuple(range(1, gt.ndim))
        gw = np.zeros_like(wd)
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        for off in offsets:
            i, sp = off[0], off[1:]
            sl = tap(i, sp)
            gw[(slice(None), slice(None)) + off] = np.tensordot(gt, xp[sl], axes=(red, red))
            if need_x:
                gxp[sl] += np.tensordot(wd[(slice(None), slice(None)) + off].T, gt, axes=([1], [0]))
        gx = None
        if need_x:
            crop = (slice(None), slice(None), slice(padding, padding + t_in))
            crop += tuple(slice(p, p + n) for p, n in zip(sp_pad, spatial))
            gx = np.ascontiguousarray(np.moveaxis(gxp, 0, 1)[crop])
        if w_was_3d:
            gw = gw[:, :, :, 0, 0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gt.sum(axis=red))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward_fn, "conv")


def maxpool_temporal(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Max over temporal windows; padded positions hold -inf. Ties route the
    gradient to the lowest index in the window."""
    xd = x.data
    if k < 1 or stride < 1 or padding < 0 or padding >= k:
        raise ConfigError(f"maxpool_temporal: invalid k={k}, stride={stride}, padding={padding}")
    t_in = xd.shape[2]
    t_out = conv_out_len(t_in, k, stride, padding)
    if t_out < 1:
        raise ConfigError(f"maxpool_temporal: input length {t_in} too short for window {k}")
    pad = [(0, 0)] * xd.ndim
    pad[2] = (padding, padding)
    xp = np.pad(xd, pad, constant_values=-np.inf)
    taps = [xp[:, :, i:i + stride * (t_out - 1) + 1:stride] for i in range(k)]
    stacked = np.stack(taps)
    arg = np.argmax(stacked, axis=0)
    note_branch(arg)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            gxp[:, :, i:i + stride * (t_out - 1) + 1:stride] += np.where(arg == i, g, 0)
        return (gxp[:, :, padding:padding + t_in],)

    return Tensor(out, (x,), backward_fn, "maxpool")


def spatial_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 5:
        raise ConfigError(f"spatial_avg_pool: expected (B,C,T,H,W), got {xd.shape}")
    h, w = xd.shape[3:]
    out = xd.mean(axis=(3, 4))

    def backward_fn(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), xd.shape).copy(),)

    return Tensor(out, (x,), backward_fn, "spatial_avg_pool")


def upsample_matrix(t: int, dtype=np.float64) -> np.ndarray:
    """``(t, 2t)`` linear interpolation matrix: output i samples input
    coordinate ``(i + 0.5) / 2 - 0.5`` clamped to ``[0, t - 1]``."""
    src = np.clip((np.arange(2 * t) + 0.5) / 2.0 - 0.5, 0.0, t - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = src - lo
    m = np.zeros((t, 2 * t), dtype=dtype)
    cols = np.arange(2 * t)
    np.add.at(m, (lo, cols), 1.0 - frac)
    np.add.at(m, (hi, cols), frac)
    return m


def upsample_temporal_x2(x: Tensor) -> Tensor:
    xd = x.data
    m = upsample_matrix(xd.shape[2], xd.dtype)
    xt = np.moveaxis(xd, 2, -1)
    out = np.ascontiguousarray(np.moveaxis(xt @ m, -1, 2))

    def backward_fn(g):
        return (np.ascontiguousarray(np.moveaxis(np.moveaxis(g, 2, -1) @ m.T, -1, 2)),)

    return Tensor(out, (x,), backward_fn, "upsample_x2")


# verification ------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Param], n_coords: int = 200,
               eps: float = 1e-3, rng=None, corrupt: float = 0.0,
               max_resample: int = 20) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over sampled coordinates.

    Central differences with step ``eps``. A coordinate whose perturbation flips
    any recorded branch decision (ReLU mask, pooling argmax, loss case split) is
    replaced by a freshly sampled one. ``corrupt`` is added to every entry of the
    analytic gradient and exists only as a negative control.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    with record_branches() as base_trace:
        loss = f()
    loss.backward()
    analytic = [p.grad_or_zeros() + corrupt for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def locate(flat):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        return pi, int(flat - offsets[pi])

    if total <= n_coords:
        queue = list(range(total))
    else:
        queue = list(rng.choice(total, size=n_coords, replace=False))
    spare = iter(rng.permutation(total))
    used = set(queue)

    def same_branches(trace):
        return len(trace) == len(base_trace) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(trace, base_trace))

    worst = 0.0
    checked = 0
    resamples = 0
    while queue:
        flat = queue.pop()
        pi, idx = locate(flat)
        p = params[pi]
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        with record_branches() as tr_plus:
            f_plus = float(f().data)
        view[idx] = orig - eps
        with record_branches() as tr_minus:
            f_minus = float(f().data)
        view[idx] = orig
        if not (same_branches(tr_plus) and same_branches(tr_minus)):
            if resamples < max_resample * n_coords:
                resamples += 1
                for cand in spare:
                    if cand not in used:
                        used.add(cand)
                        queue.append(int(cand))
                        break
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = analytic[pi].reshape(-1)[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
        checked += 1
    grad_check.last_checked = checked
    return worst


grad_check.last_checked = 0
