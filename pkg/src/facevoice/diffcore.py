"""Reverse-mode automatic differentiation on dense float64 arrays.

Every trainable part of this package runs on the primitives here: a thin
array wrapper (DiffArray), a per-forward-pass GradientTape, differentiable
ops with hand-written backward rules, a bias-corrected Adam optimizer, and
a central finite-difference gradient checker that doubles as the test
suite's oracle.

Conventions:
  * float64 everywhere, so gradient checks are decisive
  * forward results are deterministic for identical inputs
  * a tape is confined to the thread that opened it; tape-free forward
    evaluation is safe to run concurrently
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_GUARD = 1e-12
_MAX_ADAM_STEP = 2**53


class DiffArray:
    """Dense float64 array that can participate in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    """One recorded op: inputs, the produced output, and its backward rule.

    The backward rule maps the output gradient to a tuple of gradients
    aligned with `inputs` (None for inputs that need no gradient).
    """

    inputs: tuple
    output: DiffArray
    backward: Callable[[np.ndarray], tuple]


class GradientTape:
    """Ordered record of the differentiable ops of one forward pass.

    Ops are appended in execution order, which is a topological order by
    construction; a single backward sweep visits each entry exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, output: DiffArray, inputs: Sequence[DiffArray], backward) -> None:
        self.entries.append(TapeEntry(tuple(inputs), output, backward))

    def __enter__(self) -> "GradientTape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[GradientTape] = []


_STATE = _TapeState()


def active_tape() -> GradientTape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _coerce(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(out_data, inputs: tuple, backward) -> DiffArray:
    out = DiffArray(out_data)
    if any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ValueError(f"div shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def neg(x) -> DiffArray:
    x = _coerce(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def matmul(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> DiffArray:
    x = _coerce(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), backward)


def reshape(x, shape) -> DiffArray:
    x = _coerce(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> DiffArray:
    parts = [_coerce(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(extents)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(parts), backward)


def slice_axis(x, axis: int, start: int, stop: int) -> DiffArray:
    x = _coerce(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, (x,), backward)


def sum(x, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    x = _coerce(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    x = _coerce(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.data.shape).copy(),)

    return _make(out, (x,), backward)


def exp(x) -> DiffArray:
    x = _coerce(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> DiffArray:
    x = _coerce(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> DiffArray:
    x = _coerce(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> DiffArray:
    x = _coerce(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> DiffArray:
    x = _coerce(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0.0),))


def sigmoid(x) -> DiffArray:
    x = _coerce(x)
    # Evaluate the saturating side through exp of a negative argument so
    # large |x| never overflows.
    d = x.data
    out = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def tanh(x) -> DiffArray:
    x = _coerce(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def clip_max(x, cap: float) -> DiffArray:
    """Elementwise min(x, cap); the clamped region gets zero gradient."""
    x = _coerce(x)
    out = np.minimum(x.data, cap)
    return _make(out, (x,), lambda g: (g * (x.data < cap),))


def stop_gradient(x) -> DiffArray:
    x = _coerce(x)
    return DiffArray(x.data.copy(), requires_grad=False)


def l2_normalize(x) -> DiffArray:
    """Divide each row by max(L2 norm, NORM_GUARD).

    Rows with norm below the guard pass through scaled by 1/NORM_GUARD
    instead of raising, since degenerate rows can appear mid-training.
    """
    x = _coerce(x)
    if x.ndim not in (1, 2):
        raise ValueError(f"l2_normalize needs a vector or a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, NORM_GUARD)
    out = x.data / denom

    def backward(g):
        dot = (out * g).sum(axis=-1, keepdims=True)
        main = (g - out * dot) / denom
        guarded = g / NORM_GUARD
        return (np.where(norms > NORM_GUARD, main, guarded),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and batch normalization
# ---------------------------------------------------------------------------


def conv1d(x, kernels, bias, stride: int = 1, padding: int = 0) -> DiffArray:
    """1-D cross-correlation (no kernel flip) with zero padding.

    x: [channels_in, length] or [batch, channels_in, length]
    kernels: [channels_out, channels_in, k]
    bias: [channels_out]
    """
    x, kernels, bias = _coerce(x), _coerce(kernels), _coerce(bias)
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ValueError(f"padding must be a nonnegative int, got {padding!r}")
    if kernels.ndim != 3:
        raise ValueError(f"kernels must be [out, in, k], got shape {kernels.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"input must be [channels, length] or [batch, channels, length], got shape {x.shape}")
    batch, c_in, length = xd.shape
    c_out, k_in, k = kernels.shape
    if k_in != c_in:
        raise ValueError(f"channel mismatch: input has {c_in} channels, kernels expect {k_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if length + 2 * padding < k:
        raise ValueError(
            f"kernel of width {k} is longer than the padded input "
            f"(length {length} + 2*{padding})"
        )
    l_out = (length + 2 * padding - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (l_out - 1) + 1
    cols = np.stack([xp[:, :, t : t + span : stride] for t in range(k)], axis=-1)
    out = np.einsum("bilt,oit->bol", cols, kernels.data) + bias.data[None, :, None]

    def backward(g):
        if squeeze:
            g = g[None]
        gk = np.einsum("bol,bilt->oit", g, cols)
        gb = g.sum(axis=(0, 2))
        dcols = np.einsum("bol,oit->bilt", g, kernels.data)
        gxp = np.zeros_like(xp)
        for t in range(k):
            gxp[:, :, t : t + span : stride] += dcols[:, :, :, t]
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        if squeeze:
            gx = gx[0]
        return gx, gk, gb

    return _make(out[0] if squeeze else out, (x, kernels, bias), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(num_features), np.ones(num_features), momentum, eps)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batchnorm1d(x, gamma, beta, state: BatchNormState, training: bool, update_running: bool = True) -> DiffArray:
    """Batch normalization over the leading axis of a [batch, features] array.

    Train mode normalizes by batch statistics (biased variance) and, when
    `update_running` is set, folds the unbiased batch variance into the
    running statistics with the state's momentum. Eval mode normalizes by
    the running statistics.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 2:
        raise ValueError(f"batchnorm1d needs a [batch, features] input, got shape {x.shape}")
    n, f = x.shape
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ValueError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {f} features")
    if training:
        if n < 2:
            raise ValueError("batchnorm1d train mode needs a batch of at least 2 (variance undefined)")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            m = state.momentum
            state.mean = (1.0 - m) * state.mean + m * mu
            state.var = (1.0 - m) * state.var + m * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + state.eps)
        xh = (x.data - mu) * inv
        out = gamma.data * xh + beta.data

        def backward(g):
            ggamma = (g * xh).sum(axis=0)
            gbeta = g.sum(axis=0)
            gx = (gamma.data * inv / n) * (n * g - gbeta - xh * ggamma)
            return gx, ggamma, gbeta

        return _make(out, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(state.var + state.eps)
    xh = (x.data - state.mean) * inv
    out = gamma.data * xh + beta.data

    def backward(g):
        return g * gamma.data * inv, (g * xh).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: DiffArray, tape: GradientTape) -> dict[DiffArray, np.ndarray]:
    """Walk `tape` once in reverse and accumulate total derivatives.

    Returns a map from each requires_grad leaf to its gradient; the same
    gradient is also added into the leaf's .grad buffer. Gradients fan in
    additively when an array feeds several ops.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(entry.output) for entry in tape.entries}
    leaves: dict[int, DiffArray] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, ig in zip(entry.inputs, entry.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = inp
    result: dict[DiffArray, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key])
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[DiffArray], lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: Sequence[DiffArray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must have matching lengths")
    if state.step >= _MAX_ADAM_STEP:
        raise OverflowError("Adam step counter exhausted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Optimizer wrapper that reads gradients off the parameters."""

    def __init__(self, params: Sequence[DiffArray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, inputs: Sequence[DiffArray], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must map the given DiffArrays to a scalar DiffArray and be pure
    (repeated evaluation on the same data returns the same value). Only
    inputs with requires_grad are perturbed. The relative error denominator
    is max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps!r}")
    tape = GradientTape()
    with tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued fn, got output shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: fn returned a non-finite value")
    grad_map = backward(out, tape)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = grad_map.get(x)
        if analytic is None:
            analytic = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*inputs).data.reshape(()))
            flat[i] = orig - eps
            f_minus = float(fn(*inputs).data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("grad_check: fn returned a non-finite value under perturbation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
