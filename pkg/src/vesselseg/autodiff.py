"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray together with an optional gradient buffer and a
closure that knows how to push an upstream gradient into its parents. Calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order. Gradients accumulate across uses (and across calls) until
the caller resets ``.grad`` to ``None``.

Everything a segmentation network needs is provided as a fused primitive:
``conv2d`` and ``transposed_conv2d`` (im2col via stride tricks, BLAS
contractions), ``batch_norm``, ``softmax`` with temperature, ``dropout``,
``relu``, pointwise math, and reductions. ``adam_step`` and ``grad_check``
live here too because they only touch tensors.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (values only, no parents)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Dense float64 array with an optional recorded gradient function."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- backward pass -----------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar."""
        if self.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if self.grad is None \
            else self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, np.negative(_as_array(other)))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad


# -- pointwise and reduction primitives -------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        out = _make(a.data + b.data, (a, b))

        def _bw():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    else:
        bval = _as_array(b)
        out = _make(a.data + bval, (a,))

        def _bw():
            _accumulate(a, _unbroadcast(out.grad, a.shape))

    if out.requires_grad:
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        out = _make(a.data * b.data, (a, b))

        def _bw():
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    else:
        bval = _as_array(b)
        out = _make(a.data * bval, (a,))

        def _bw():
            _accumulate(a, _unbroadcast(out.grad * bval, a.shape))

    if out.requires_grad:
        out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Raise to a fixed scalar exponent."""
    p = float(exponent)
    out = _make(a.data ** p, (a,))

    def _bw():
        _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    if out.requires_grad:
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,))

    def _bw():
        _accumulate(a, out.grad * out.data)

    if out.requires_grad:
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,))

    def _bw():
        _accumulate(a, out.grad / a.data)

    if out.requires_grad:
        out._backward = _bw
    return out


def sqrt(a: Tensor) -> Tensor:
    out = _make(np.sqrt(a.data), (a,))

    def _bw():
        _accumulate(a, out.grad * 0.5 / out.data)

    if out.requires_grad:
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    out = _make(np.maximum(a.data, 0.0), (a,))

    def _bw():
        _accumulate(a, out.grad * (a.data > 0.0))

    if out.requires_grad:
        out._backward = _bw
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); gradient passes only where x > lo."""
    lo = float(lo)
    out = _make(np.maximum(a.data, lo), (a,))

    def _bw():
        _accumulate(a, out.grad * (a.data > lo))

    if out.requires_grad:
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    ax = axis

    def _bw():
        g = out.grad
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    if out.requires_grad:
        out._backward = _bw
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))

    def _bw():
        _accumulate(a, out.grad.reshape(a.shape))

    if out.requires_grad:
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; the gradient splits back at the seams."""
    parts = list(tensors)
    out = _make(np.concatenate([t.data for t in parts], axis=axis), parts)
    sizes = [t.shape[axis] for t in parts]

    def _bw():
        offset = 0
        for t, n in zip(parts, sizes):
            index = [slice(None)] * out.ndim
            index[axis] = slice(offset, offset + n)
            _accumulate(t, out.grad[tuple(index)])
            offset += n

    if out.requires_grad:
        out._backward = _bw
    return out


# -- fused network primitives ------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an FCHW kernel.

    Output size per spatial dim is (H + 2*padding - kh)//stride + 1. The
    forward pass extracts sliding windows without copying and contracts them
    against the kernel in one BLAS call.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2], xd.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    # windows: (N, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    raw = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    raw = np.ascontiguousarray(raw.transpose(0, 3, 1, 2))
    if bias is not None:
        raw += bias.data.reshape(1, f, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(raw, parents)
    ho, wo = raw.shape[2], raw.shape[3]

    def _bw():
        g = out.grad
        if kernel.requires_grad:
            dk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(kernel, dk)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros((n, c, hp, wp))
            # scatter one kernel tap at a time; strided slices never overlap
            for i in range(kh):
                for j in range(kw):
                    piece = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        piece.transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            _accumulate(x, dxp)

    if out.requires_grad:
        out._backward = _bw
    return out


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                      stride: int = 2) -> Tensor:
    """Stride-s upsampling convolution with an s x s kernel (CFHW layout).

    The kernel spatial size must equal the stride, so every output pixel is
    written by exactly one input pixel and the op reduces to a reshape plus
    one contraction. With a shared kernel buffer this is the exact adjoint of
    ``conv2d(stride=s, padding=0)``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"transposed_conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    ck, f, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c}")
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kh != stride:
        raise ShapeError(
            f"kernel size {kh} must equal stride {stride} (non-overlapping tiles)"
        )
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")

    # (N,C,H,W) x (C,F,s,s) -> (N,H,W,F,s,s) -> (N,F,H,s,W,s) -> (N,F,H*s,W*s)
    t = np.tensordot(x.data, kernel.data, axes=([1], [0]))
    raw = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(
        n, f, h * stride, w * stride)
    if bias is not None:
        raw = raw + bias.data.reshape(1, f, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(raw, parents)

    def _bw():
        g = out.grad.reshape(n, f, h, stride, w, stride)
        if x.requires_grad:
            dx = np.tensordot(g, kernel.data, axes=([1, 3, 5], [1, 2, 3]))
            _accumulate(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
        if kernel.requires_grad:
            dk = np.tensordot(x.data, g, axes=([0, 2, 3], [0, 2, 4]))
            _accumulate(kernel, dk)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))

    if out.requires_grad:
        out._backward = _bw
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict,
               mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    ``state`` holds the running "mean" and "var" arrays; in train mode they
    are updated in place with an exponential moving average (population
    variance) and the batch statistics normalize the output. In eval mode the
    running statistics are used and ``state`` is left untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")

    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if mode == "train":
        mu = tensor_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = add(x, mul(mu, -1.0))
        var = tensor_mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        inv = power(add(var, eps), -0.5)
        state["mean"] = (1.0 - momentum) * state["mean"] + momentum * mu.data.reshape(c)
        state["var"] = (1.0 - momentum) * state["var"] + momentum * var.data.reshape(c)
        return add(mul(mul(centered, inv), g4), b4)
    rm = state["mean"].reshape(1, c, 1, 1)
    rv = state["var"].reshape(1, c, 1, 1)
    scale = 1.0 / np.sqrt(rv + eps)
    return add(mul(add(x, -rm), mul(g4, scale)), b4)


def softmax(logits: Tensor, axis: int = 1, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax along one axis (shift-stabilized).

    temperature must be positive; 1.0 divides by nothing at all so that the
    plain softmax path is bit-identical to the untempered formula.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = logits.data if temperature == 1.0 else logits.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (logits,))

    def _bw():
        dot = (out.grad * y).sum(axis=axis, keepdims=True)
        g = y * (out.grad - dot)
        if temperature != 1.0:
            g = g / temperature
        _accumulate(logits, g)

    if out.requires_grad:
        out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, seed, mode: str) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale kept by 1/(1-rate).

    ``seed`` may be an int or a sequence of ints; the mask is drawn from a
    dedicated ``default_rng(seed)`` so the layer never disturbs other random
    streams. Eval mode and rate 0 return the input tensor unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * mask, (x,))

    def _bw():
        _accumulate(x, out.grad * mask)

    if out.requires_grad:
        out._backward = _bw
    return out


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments keyed by parameter name, plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Parameters without a gradient entry (or with None) are left untouched.
    Non-finite gradients raise NumericalError naming the offending parameter.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


# -- finite-difference checking ----------------------------------------------


def grad_check(fn: Callable[[list[Tensor]], Tensor], inputs: Iterable[Tensor],
               probe_eps: float = 1e-5) -> float:
    """Compare analytic gradients of fn(inputs) against central differences.

    Returns the worst relative error max(|a - n|) / max(|a|, |n|, 1e-8) over
    every element of every input that requires a gradient. ``fn`` must be a
    pure function of the input tensors (seed any randomness inside it).
    """
    tensors = list(inputs)
    for t in tensors:
        t.grad = None
    loss = fn(tensors)
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar-valued fn")
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        if not t.requires_grad:
            continue
        if ana is None:
            ana = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            with no_grad():
                flat[i] = keep + probe_eps
                f_plus = float(fn(tensors).data)
                flat[i] = keep - probe_eps
                f_minus = float(fn(tensors).data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * probe_eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
