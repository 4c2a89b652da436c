"""Reverse-mode differentiable numeric core.

Dense layers, elementwise activations, the three losses used by the training
objectives, an Adam optimizer, and a central finite-difference gradient
checker. A "matrix" throughout the package is a 2-D C-order float64 ndarray
with one sample per row; everything runs in double precision.

Backward passes are hand-derived. `grad_check` is the independent oracle the
test suite uses to certify them.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "NumericError",
    "as_matrix",
    "require_finite",
    "ParamBlock",
    "AdamState",
    "Adam",
    "adam_step",
    "glorot_uniform",
    "affine",
    "affine_backward",
    "activation",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "softmax_xent",
    "l1_mean",
    "l2_recon_mean",
    "AffineLayer",
    "ActivationLayer",
    "Stack",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return `x` as a 2-D float64 array; 1-D input becomes a single row."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {np.shape(x)}")
    return m


def require_finite(x: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite entries")
    return x


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamBlock:
    """A trainable matrix paired with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value) -> None:
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"parameter must be 2-D, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class AdamState:
    """Adam moment buffers for one parameter, plus the update constants."""

    def __init__(
        self,
        param: ParamBlock,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> None:
        self.first_moment = np.zeros_like(param.value)
        self.second_moment = np.zeros_like(param.value)
        self.step_count = 0
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)


def adam_step(param: ParamBlock, state: AdamState) -> None:
    """One bias-corrected Adam update; the gradient is consumed and zeroed."""
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.zero_grad()


class Adam:
    """Adam over a list of parameters, one moment state per block."""

    def __init__(self, params: Sequence[ParamBlock], lr: float = 1e-3, **kwargs) -> None:
        self.pairs = [(p, AdamState(p, lr=lr, **kwargs)) for p in params]

    def zero_grad(self) -> None:
        for p, _ in self.pairs:
            p.zero_grad()

    def step(self) -> None:
        for p, s in self.pairs:
            adam_step(p, s)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# forward ops and their gradients


def affine(w, b, x) -> np.ndarray:
    """Batched affine map y = x @ w + b, bias broadcast across rows."""
    w = as_matrix(w, "w")
    b = as_matrix(b, "b")
    x = as_matrix(x, "x")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"affine: x has shape {x.shape} but w has shape {w.shape} "
            f"(inner dimensions {x.shape[1]} vs {w.shape[0]})"
        )
    if b.shape != (1, w.shape[1]):
        raise ShapeError(
            f"affine: bias shape {b.shape} does not match output width {w.shape[1]}"
        )
    return x @ w + b


def affine_backward(d_out: np.ndarray, w: np.ndarray, x: np.ndarray):
    """Gradients of `affine` given upstream d_out: returns (d_w, d_b, d_x)."""
    d_w = x.T @ d_out
    d_b = d_out.sum(axis=0, keepdims=True)
    d_x = d_out @ w.T
    return d_w, d_b, d_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither tail overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _relu_grad(x: np.ndarray, _y: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


def _sigmoid_grad(_x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _softplus_grad(x: np.ndarray, _y: np.ndarray) -> np.ndarray:
    return sigmoid(x)


_ACTIVATIONS = {
    "relu": (relu, _relu_grad),
    "sigmoid": (sigmoid, _sigmoid_grad),
    "softplus": (softplus, _softplus_grad),
}


def activation(kind: str, x) -> np.ndarray:
    """Elementwise activation; kind is one of relu, sigmoid, softplus."""
    if kind not in _ACTIVATIONS:
        raise DomainError(f"unknown activation kind {kind!r}")
    x = require_finite(as_matrix(x, "x"), "x")
    return _ACTIVATIONS[kind][0](x)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization."""
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_onehot(y: np.ndarray) -> None:
    if not np.isin(y, (0.0, 1.0)).all() or not (y.sum(axis=1) == 1.0).all():
        raise DomainError("onehot rows must contain a single 1 and zeros elsewhere")


def softmax_xent(logits, onehot):
    """Mean softmax cross-entropy over the batch.

    Returns (loss, d_logits) with d_logits = (softmax(logits) - onehot) / N.
    Stabilized via max subtraction so huge logits neither overflow nor push
    the log through zero.
    """
    z = as_matrix(logits, "logits")
    y = as_matrix(onehot, "onehot")
    if z.shape != y.shape:
        raise ShapeError(f"softmax_xent: logits {z.shape} vs onehot {y.shape}")
    _check_onehot(y)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sums = e.sum(axis=1)
    loss = float(np.mean(np.log(sums) - (shifted * y).sum(axis=1)))
    p = e / sums[:, None]
    return loss, (p - y) / n


def l1_mean(x):
    """Mean per-row L1 norm; the subgradient at exact zeros is zero.

    Returns (value, d_x) with d_x = sign(x) / N.
    """
    x = as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ShapeError("l1_mean: empty batch")
    n = x.shape[0]
    return float(np.abs(x).sum() / n), np.sign(x) / n


def l2_recon_mean(z, zhat):
    """Mean per-row Euclidean distance (not squared) between z and zhat.

    Returns (value, d_z, d_zhat); a row at zero distance gets zero gradient.
    """
    z = as_matrix(z, "z")
    zh = as_matrix(zhat, "zhat")
    if z.shape != zh.shape:
        raise ShapeError(f"l2_recon_mean: z {z.shape} vs zhat {zh.shape}")
    if z.shape[0] == 0:
        raise ShapeError("l2_recon_mean: empty batch")
    n = z.shape[0]
    diff = z - zh
    norms = np.sqrt((diff * diff).sum(axis=1))
    value = float(norms.mean())
    # diff is exactly zero wherever the norm is, so 0/1 keeps those rows at 0
    safe = np.where(norms > 0.0, norms, 1.0)
    d_z = diff / (n * safe[:, None])
    return value, d_z, -d_z


# ---------------------------------------------------------------------------
# layers


class AffineLayer:
    """Dense layer y = x @ w + b; backward accumulates into the param grads."""

    def __init__(self, w: ParamBlock, b: ParamBlock) -> None:
        self.w = w
        self.b = b
        self._x: np.ndarray | None = None

    @classmethod
    def create(
        cls, fan_in: int, fan_out: int, rng: np.random.Generator, bias: float = 0.0
    ) -> "AffineLayer":
        w = ParamBlock(glorot_uniform(fan_in, fan_out, rng))
        b = ParamBlock(np.full((1, fan_out), float(bias)))
        return cls(w, b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = affine(self.w.value, self.b.value, x)
        self._x = as_matrix(x, "x")
        return y

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_w, d_b, d_x = affine_backward(d_out, self.w.value, self._x)
        self.w.grad += d_w
        self.b.grad += d_b
        return d_x

    def params(self) -> list[ParamBlock]:
        return [self.w, self.b]


class ActivationLayer:
    def __init__(self, kind: str) -> None:
        if kind not in _ACTIVATIONS:
            raise DomainError(f"unknown activation kind {kind!r}")
        self.kind = kind
        self._x: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._y = _ACTIVATIONS[self.kind][0](x)
        return self._y

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        return d_out * _ACTIVATIONS[self.kind][1](self._x, self._y)

    def params(self) -> list[ParamBlock]:
        return []


class Stack:
    """A plain sequence of layers run front-to-back / back-to-front."""

    def __init__(self, layers: Sequence) -> None:
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            d_out = layer.backward(d_out)
        return d_out

    def params(self) -> list[ParamBlock]:
        out: list[ParamBlock] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


# ---------------------------------------------------------------------------
# gradient oracle


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a flat float64 vector to (loss, grad). Each coordinate is probed
    with a central difference at `step`; the per-coordinate relative error is
    |analytic - fd| / max(1, |analytic|) and the maximum is returned.
    """
    if not (1e-7 <= step <= 1e-3):
        raise DomainError(f"grad_check step {step} outside [1e-7, 1e-3]")
    x = np.asarray(point, dtype=np.float64).ravel().copy()
    loss0, grad = f(x.copy())
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != x.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match point {x.shape}")
    if not np.isfinite(loss0):
        raise NumericError("loss is non-finite at the expansion point")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        lp, _ = f(xp)
        lm, _ = f(xm)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError(f"loss is non-finite at probe for coordinate {i}")
        fd = (lp - lm) / (2.0 * step)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        if err > worst:
            worst = err
    return worst
