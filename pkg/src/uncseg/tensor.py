"""Dense tensor kernels with a minimal reverse-mode tape.

Tensors are plain numpy arrays in NCHW layout (spatial ops also accept
NHWC via ``channels_last``, which is what the model uses internally since
the patch gather is cheaper that way).  Any argument wrapped in a
:class:`Var` is tracked: the op records a backward closure on the variable's
:class:`Tape`, and :meth:`Tape.backward` replays those closures in exact
reverse order.  Only the handful of primitives needed by the segmentation
network are provided.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


class EvaluationError(RuntimeError):
    """Raised when a function under test produces a non-finite value."""


class Var:
    """A tensor value tracked on a tape."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: Tape):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of executed primitives for a single reverse sweep."""

    def __init__(self):
        self._ops: list[tuple[Var, tuple, Callable]] = []

    def __len__(self):
        return len(self._ops)

    def var(self, value) -> Var:
        return Var(np.asarray(value), self)

    def record(self, output: Var, inputs: Sequence, backward: Callable) -> None:
        self._ops.append((output, tuple(inputs), backward))

    def backward(self, output: Var, grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(var) into ``.grad`` of every tracked input.

        The sweep consumes the tape: records are dropped so the Var <-> Tape
        reference cycle does not keep every activation alive until the next
        garbage collection.
        """
        if grad is None:
            grad = np.ones_like(output.value)
        output.grad = grad
        ops, self._ops = self._ops, []
        for out, inputs, fn in reversed(ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if not isinstance(inp, Var) or g is None:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(value: np.ndarray, inputs: Sequence, backward: Callable):
    """Wrap ``value`` in a Var and record it when any input is tracked."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    out = Var(value, tape)
    tape.record(out, inputs, backward)
    return out


def record(value: np.ndarray, inputs: Sequence, backward: Callable):
    """Public hook for one-off differentiable ops (used by tests and oracles).

    ``backward(gout)`` must return one gradient (or None) per input.
    """
    return _emit(np.asarray(value), inputs, backward)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _patches(xp: np.ndarray, stride: int):
    """Gather 3x3 patches of a padded NHWC array into rows ordered (i, j, c)."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * c), ho, wo


def _conv_nhwc(xv, kv, bv, stride, input_grad=True):
    n, h, w, c = xv.shape
    f = kv.shape[0]
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols, ho, wo = _patches(xp, stride)
    wmat = kv.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = cols @ wmat.T
    if bv is not None:
        out += bv
    out = out.reshape(n, ho, wo, f)

    def backward(gout):
        g2 = gout.reshape(n * ho * wo, f)
        gk = (g2.T @ cols).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0)
        if not input_grad:
            return None, np.ascontiguousarray(gk), gb
        # input gradient = correlation of the (zero-dilated) output gradient
        # with the spatially flipped, channel-swapped kernel
        if stride == 1:
            gd = gout
        else:
            gd = np.zeros((n, h, w, f), dtype=gout.dtype)
            gd[:, ::stride, ::stride] = gout
        flipped = np.ascontiguousarray(kv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_nhwc(gd, flipped, None, 1, input_grad=False)
        return gx, np.ascontiguousarray(gk), gb

    return out, backward


def conv2d(x, kernel, bias, stride: int = 1, channels_last: bool = False):
    """3x3 cross-correlation with zero padding 1.

    x: [N, C, H, W] (or [N, H, W, C] with ``channels_last``), kernel:
    [F, C, 3, 3], bias: [F].  Output spatial extent is ceil(H / stride).
    """
    xv, kv, bv = _value(x), _value(kernel), _value(bias)
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if xv.ndim != 4 or kv.ndim != 4 or bv.ndim != 1:
        raise ShapeError(f"conv2d expects 4-D input/kernel and 1-D bias, got "
                         f"{xv.shape}, {kv.shape}, {bv.shape}")
    c = xv.shape[3] if channels_last else xv.shape[1]
    f = kv.shape[0]
    if kv.shape[1:] != (c, 3, 3) or bv.shape != (f,):
        raise ShapeError(f"kernel {kv.shape} / bias {bv.shape} incompatible "
                         f"with input {xv.shape}")

    need_gx = isinstance(x, Var)
    if channels_last:
        out, back = _conv_nhwc(xv, kv, bv, stride, need_gx)
        return _emit(out, (x, kernel, bias), back)

    out, back = _conv_nhwc(xv.transpose(0, 2, 3, 1), kv, bv, stride, need_gx)

    def backward(gout):
        gx, gk, gb = back(gout.transpose(0, 2, 3, 1))
        return (None if gx is None else gx.transpose(0, 3, 1, 2)), gk, gb

    return _emit(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, kernel, bias), backward)


def transpose(x, axes):
    """Differentiable axis permutation (used for NCHW <-> NHWC)."""
    xv = _value(x)
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(xv.transpose(axes))

    def backward(gout):
        return (gout.transpose(inverse),)

    return _emit(out, (x,), backward)


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    xv = _value(x)
    pos = xv > 0
    out = np.where(pos, xv, 0).astype(xv.dtype, copy=False)

    def backward(gout):
        return (gout * pos,)

    return _emit(out, (x,), backward)


def upsample2x(x, channels_last: bool = False):
    """Nearest-neighbour 2x upsampling of the spatial axes."""
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"upsample2x expects a 4-D tensor, got {xv.shape}")
    ax = 1 if channels_last else 2
    out = xv.repeat(2, axis=ax).repeat(2, axis=ax + 1)

    def backward(gout):
        s = gout.shape
        if channels_last:
            return (gout.reshape(s[0], s[1] // 2, 2, s[2] // 2, 2, s[3]).sum(axis=(2, 4)),)
        return (gout.reshape(s[0], s[1], s[2] // 2, 2, s[3] // 2, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), backward)


def softmax_channels(logits):
    """Per-pixel softmax over the 2-channel axis (background=0, foreground=1)."""
    zv = _value(logits)
    if zv.ndim != 4 or zv.shape[1] != 2:
        raise ShapeError(f"softmax_channels expects [N,2,H,W], got {zv.shape}")
    shifted = zv - zv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(gout):
        return (p * (gout - (gout * p).sum(axis=1, keepdims=True)),)

    return _emit(p, (logits,), backward)


def weighted_sum(x, weights):
    """Scalar sum(x * weights) with ``weights`` held constant."""
    xv, wv = _value(x), np.asarray(weights)
    out = np.asarray((xv * wv).sum(), dtype=xv.dtype)

    def backward(gout):
        return (gout * wv, None)

    return _emit(out, (x, weights), backward)


def nll_mean(probs, labels, weights=None, clamp: float = 1e-7):
    """Pixel-weighted negative log-likelihood, averaged per image then per batch.

    probs: [N, 2, H, W], labels: [N, H, W] in {0, 1}, weights: [N, H, W]
    constants (no gradient).  Probabilities are clamped to [clamp, 1] before
    the log; clamped pixels pass no gradient.
    """
    pv = _value(probs)
    lab = np.asarray(labels)
    n, _, h, w = pv.shape
    idx = lab.astype(np.intp)[:, None]
    p_label = np.take_along_axis(pv, idx, axis=1)[:, 0]
    clipped = np.clip(p_label, clamp, 1.0)
    ce = -np.log(clipped)
    wv = np.ones_like(ce) if weights is None else np.asarray(weights, dtype=pv.dtype)
    out = np.asarray((ce * wv).mean(axis=(1, 2)).mean(), dtype=pv.dtype)

    def backward(gout):
        inside = p_label >= clamp
        g_label = np.where(inside, -wv / clipped, 0.0) * (gout / (n * h * w))
        g = np.zeros_like(pv)
        np.put_along_axis(g, idx, g_label[:, None].astype(pv.dtype), axis=1)
        return (g, None, None)

    return _emit(out, (probs, labels, weights), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def value_and_grad(f: Callable, params: dict[str, np.ndarray]):
    """Evaluate scalar ``f(vars)`` on a fresh tape; return (value, grads)."""
    tape = Tape()
    vs = {k: tape.var(v) for k, v in params.items()}
    out = f(vs)
    tape.backward(out)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for k, v in vs.items()}
    return float(_value(out)), grads


def grad_check(f: Callable, params: dict[str, np.ndarray], eps: float = 1e-5,
               n_coords: int = 100, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of Vars to a scalar Var.  Params are promoted to float64.
    Up to ``n_coords`` coordinates are sampled uniformly over all parameters
    (every coordinate when there are fewer).  Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    val, grads = value_and_grad(f, params)
    if not np.isfinite(val):
        raise EvaluationError(f"f evaluated to {val}")

    index = [(k, i) for k, v in params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(index) > n_coords:
        picks = rng.choice(len(index), size=n_coords, replace=False)
        index = [index[i] for i in sorted(picks)]

    def scalar(p):
        v = float(_value(f(p)))
        if not np.isfinite(v):
            raise EvaluationError(f"f evaluated to {v}")
        return v

    worst = 0.0
    for k, i in index:
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = scalar(params)
        flat[i] = orig - eps
        fm = scalar(params)
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        analytic = float(grads[k].reshape(-1)[i])
        if analytic == numeric:
            continue
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
