"""Minimal reverse-mode automatic differentiation on numpy arrays.

Arrays are laid out as ``(batch, channels, *spatial)`` with two or three
spatial dims. Every op appends a node to the active :class:`Tape`; calling
:meth:`Tape.backward` walks the tape in reverse creation order, which is a
valid reverse topological order because a node's inputs always exist before
the node itself.
"""
from __future__ import annotations

import contextvars
import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dinseg_active_tape", default=None
)


class Tensor:
    """A float64 array that may take part in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"


class Parameter(Tensor):
    """Trainable leaf with its Adam moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Tape:
    """Append-only record of (output, inputs, backward closure)."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    inp.grad += g


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# convolution


def _spatial_axes(ndim: int) -> tuple[int, ...]:
    return tuple(range(2, ndim))


def _im2col(xp: np.ndarray, ks: Sequence[int], out_sp: Sequence[int]) -> np.ndarray:
    """Columns (Ci * prod(k), N * prod(out_sp)) of a padded (N, Ci, *S) array."""
    n, ci = xp.shape[:2]
    offsets = list(itertools.product(*[range(k) for k in ks]))
    cols = np.empty((ci, len(offsets), n) + tuple(out_sp))
    for o, off in enumerate(offsets):
        window = (slice(None), slice(None)) + tuple(slice(a, a + s) for a, s in zip(off, out_sp))
        cols[:, o] = xp[window].swapaxes(0, 1)
    return cols.reshape(ci * len(offsets), -1)


def _col2im(cols: np.ndarray, shape: Sequence[int], ks: Sequence[int], out_sp: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into (N, Ci, *S)."""
    n, ci = shape[:2]
    offsets = list(itertools.product(*[range(k) for k in ks]))
    cols = cols.reshape((ci, len(offsets), n) + tuple(out_sp))
    out = np.zeros(shape)
    for o, off in enumerate(offsets):
        window = (slice(None), slice(None)) + tuple(slice(a, a + s) for a, s in zip(off, out_sp))
        out[window] += cols[:, o].swapaxes(0, 1)
    return out


def conv(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """N-d stride-1 convolution (cross-correlation) with per-channel bias.

    ``x`` is (N, Ci, *S), ``kernel`` is (Co, Ci, *k) with odd k, ``bias`` is (Co,).
    """
    xd, wd = x.data, kernel.data
    nd = xd.ndim - 2
    if nd not in (2, 3):
        raise ShapeError(f"conv: expected 2 or 3 spatial dims, input has shape {xd.shape}")
    if wd.ndim != nd + 2:
        raise ShapeError(f"conv: kernel shape {wd.shape} does not match input shape {xd.shape}")
    if wd.shape[1] != xd.shape[1]:
        raise ShapeError(
            f"conv: input has {xd.shape[1]} channels but kernel expects {wd.shape[1]}"
        )
    ks = wd.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"conv: kernel spatial dims must be odd, got {ks}")
    if bias.shape != (wd.shape[0],):
        raise ShapeError(f"conv: bias shape {bias.shape} != ({wd.shape[0]},)")
    if padding == "same":
        pad = [k // 2 for k in ks]
    elif padding == "valid":
        pad = [0] * nd
        if any(s < k for s, k in zip(xd.shape[2:], ks)):
            raise ShapeError(f"conv: input spatial {xd.shape[2:]} smaller than kernel {ks}")
    else:
        raise ValueError(f"conv: unknown padding {padding!r}")

    n, co = xd.shape[0], wd.shape[0]
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in pad]) if any(pad) else xd
    out_sp = tuple(s + 2 * p - k + 1 for s, p, k in zip(xd.shape[2:], pad, ks))
    cols = _im2col(xp, ks, out_sp)
    wm = wd.reshape(co, -1)
    out = (wm @ cols).reshape((co, n) + out_sp).swapaxes(0, 1)
    out = out + bias.data.reshape((1, -1) + (1,) * nd)

    def backward(g):
        gm = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(co, -1)
        gb = gm.sum(axis=1)
        gw = (gm @ cols.T).reshape(wd.shape)
        gxp = _col2im(wm.T @ gm, xp.shape, ks, out_sp)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pad, xd.shape[2:]))
        return gxp[crop], gw, gb

    return _result(out, (x, kernel, bias), backward)


# --------------------------------------------------------------------------
# resampling


def downsample2(x: Tensor) -> Tensor:
    """2x max-pool along every spatial dim; ties go to the first element."""
    xd = x.data
    n, c, *sp = xd.shape
    if any(s % 2 for s in sp):
        raise ShapeError(f"downsample2: spatial dims must be even, got {tuple(sp)}")
    nd = len(sp)
    split = [n, c]
    for s in sp:
        split += [s // 2, 2]
    blocks = xd.reshape(split)
    order = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
    blocks = blocks.transpose(order).reshape([n, c] + [s // 2 for s in sp] + [2**nd])
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]
    inv = np.argsort(order)

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape([n, c] + [s // 2 for s in sp] + [2] * nd)
        return (gb.transpose(inv).reshape(xd.shape),)

    return _result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling along every spatial dim."""
    xd = x.data
    out = xd
    for ax in _spatial_axes(xd.ndim):
        out = np.repeat(out, 2, axis=ax)
    n, c, *sp = xd.shape

    def backward(g):
        split = [n, c]
        for s in sp:
            split += [s, 2]
        return (g.reshape(split).sum(axis=tuple(3 + 2 * i for i in range(len(sp)))),)

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------
# channel plumbing


def channel_concat(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("channel_concat: empty input list")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"channel_concat: shape {t.shape} incompatible with {ref}")
    if len(inputs) == 1:
        return _result(inputs[0].data.copy(), tuple(inputs), lambda g: (g,))
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _result(out, tuple(inputs), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


# --------------------------------------------------------------------------
# softmax and loss


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis."""
    p = np.exp(_log_softmax(x.data))

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), backward)


def spatial_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over all pixels (and batch) of -log softmax(logits)[target]."""
    z = logits.data
    target = np.asarray(target)
    if target.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(
            f"spatial_cross_entropy: target shape {target.shape} does not match "
            f"logits {z.shape} (expected {(z.shape[0],) + z.shape[2:]})"
        )
    n_cls = z.shape[1]
    if target.size and (target.min() < 0 or target.max() >= n_cls):
        raise ValueError(
            f"spatial_cross_entropy: target values must lie in 0..{n_cls - 1}, "
            f"got range [{target.min()}, {target.max()}]"
        )
    logp = _log_softmax(z)
    tidx = np.expand_dims(target.astype(np.intp), 1)
    picked = np.take_along_axis(logp, tidx, axis=1)
    count = target.size
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, tidx, np.take_along_axis(grad, tidx, axis=1) - 1.0, axis=1)
        return (grad * (float(g) / count),)

    return _result(np.array(loss), (logits,), backward)


# --------------------------------------------------------------------------
# optimisation


BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(params: Sequence[Parameter], lr: float) -> None:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    if not lr >= 0.0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p in params:
        p.step += 1
        p.m *= BETA1
        p.m += (1.0 - BETA1) * p.grad
        p.v *= BETA2
        p.v += (1.0 - BETA2) * (p.grad * p.grad)
        if lr == 0.0:
            continue
        m_hat = p.m / (1.0 - BETA1**p.step)
        v_hat = p.v / (1.0 - BETA2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + EPS)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    n_samples: int = 64,
    seed: int = 0,
    grad_fn: Callable[[], None] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must build a fresh forward pass from the current parameter
    values and return a scalar tensor. At least ``n_samples`` parameter
    entries (or all, if fewer exist) are probed. ``grad_fn`` overrides how
    analytic gradients are produced (used to test the checker itself).
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"h must lie in (0, 1e-3], got {h}")
    for p in params:
        p.zero_grad()
    if grad_fn is None:
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
    else:
        grad_fn()
    analytic = [p.grad.copy() for p in params]

    index = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(index) > n_samples:
        pick = rng.choice(len(index), size=n_samples, replace=False)
        index = [index[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in index:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = float(loss_fn().data)
        flat[j] = orig - h
        down = float(loss_fn().data)
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[i].reshape(-1)[j])
        # relative to the numeric estimate, absolute where it is ~0
        denom = abs(numeric)
        err = abs(a - numeric) / denom if denom > 1e-7 else abs(a - numeric)
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
