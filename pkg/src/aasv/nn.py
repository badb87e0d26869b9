"""Minimal dense layers with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects (float32 for storage).  Every
layer owns the caches its backward pass needs, so a ``forward(..., train=True)``
must precede each ``backward``.  Inference (``train=False``) never touches the
caches and is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import _kernels

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return x


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    """Base class: subclasses fill ``self.params`` and ``self.buffers``."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for k, b in self.buffers.items():
            self.buffers[k] = b.astype(dtype)


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.params["w"] = Parameter(_fan_in_uniform(rng, (n_in, n_out), n_in))
        self.params["b"] = Parameter(np.zeros(n_out, dtype=DTYPE))
        self._x = None

    def forward(self, x, train=False):
        w = self.params["w"].value
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"dense expects (batch, {w.shape[0]}), got {x.shape}")
        if train:
            self._x = x
        return x @ w + self.params["b"].value

    def backward(self, dy):
        x = self._x
        self.params["w"].grad += x.T @ dy
        self.params["b"].grad += dy.sum(axis=0)
        return dy @ self.params["w"].value.T


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stateless ``x @ w + b`` with shape validation."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


class Conv1d(Layer):
    """Dilated temporal convolution with 'same' padding over (batch, channels, frames)."""

    def __init__(self, n_in: int, n_out: int, width: int, dilation: int, rng: np.random.Generator):
        super().__init__()
        if width % 2 != 1:
            raise ValueError("kernel width must be odd")
        self.n_in, self.n_out, self.width, self.dilation = n_in, n_out, width, dilation
        self.params["w"] = Parameter(_fan_in_uniform(rng, (n_in * width, n_out), n_in * width))
        self.params["b"] = Parameter(np.zeros(n_out, dtype=DTYPE))
        self._cols = None

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.n_in:
            raise ValueError(f"conv expects {self.n_in} input channels, got shape {x.shape}")
        cols = _kernels.unfold1d(x, self.width, self.dilation)
        if train:
            self._cols = cols
        y = cols @ self.params["w"].value + self.params["b"].value
        return y.transpose(0, 2, 1)

    def backward(self, dy):
        b, o, t = dy.shape
        dyt = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(b * t, o)
        cols = self._cols.reshape(b * t, -1)
        self.params["w"].grad += cols.T @ dyt
        self.params["b"].grad += dyt.sum(axis=0)
        dcols = (dyt @ self.params["w"].value.T).reshape(b, t, -1)
        return _kernels.fold1d(dcols, self.n_in, self.width, self.dilation)


def conv1d_forward(x: np.ndarray, kernels: np.ndarray, dilation: int = 1,
                   bias: np.ndarray | None = None) -> np.ndarray:
    """Stateless conv. ``kernels`` has shape (out, in, width)."""
    x = np.asarray(x)
    kernels = np.asarray(kernels, dtype=x.dtype)
    n_out, n_in, width = kernels.shape
    if width % 2 != 1:
        raise ValueError("kernel width must be odd")
    if x.ndim != 3 or x.shape[1] != n_in:
        raise ValueError(f"channel mismatch: input {x.shape}, kernels {kernels.shape}")
    cols = _kernels.unfold1d(x, width, dilation)
    w = kernels.transpose(1, 2, 0).reshape(n_in * width, n_out)
    y = cols @ w
    if bias is not None:
        y = y + bias
    return y.transpose(0, 2, 1)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train=False):
        mask = x > 0
        if train:
            self._mask = mask
        return x * mask

    def backward(self, dy):
        return dy * self._mask


class BatchNorm1d(Layer):
    """Per-channel batch norm over (batch, frames) for 3-D input, or batch for 2-D."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = Parameter(np.ones(channels, dtype=DTYPE))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=DTYPE))
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)
        self._cache = None

    @staticmethod
    def _axes(x):
        return (0, 2) if x.ndim == 3 else (0,)

    @staticmethod
    def _shape(v, x):
        return v[None, :, None] if x.ndim == 3 else v[None, :]

    def forward(self, x, train=False):
        axes = self._axes(x)
        gamma = self._shape(self.params["gamma"].value, x)
        beta = self._shape(self.params["beta"].value, x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(
                self.buffers["running_mean"].dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(
                self.buffers["running_var"].dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._shape(mean, x)) * self._shape(inv_std, x)
        if train:
            self._cache = (xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std = self._cache
        axes = self._axes(dy)
        n = dy.size // dy.shape[1]
        self.params["gamma"].grad += (dy * xhat).sum(axis=axes)
        self.params["beta"].grad += dy.sum(axis=axes)
        dxhat = dy * self._shape(self.params["gamma"].value, dy)
        s1 = self._shape(dxhat.sum(axis=axes), dy)
        s2 = self._shape((dxhat * xhat).sum(axis=axes), dy)
        return self._shape(inv_std, dy) / n * (n * dxhat - s1 - xhat * s2)


class StatsPool(Layer):
    """(B, C, T) -> (B, 2C): per-channel mean then standard deviation over frames."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self._cache = None

    def forward(self, x, train=False):
        mean = x.mean(axis=2)
        centered = x - mean[:, :, None]
        std = np.sqrt((centered**2).mean(axis=2) + self.eps)
        if train:
            self._cache = (centered, std)
        return np.concatenate([mean, std], axis=1)

    def backward(self, dy):
        centered, std = self._cache
        c = centered.shape[1]
        t = centered.shape[2]
        dmean, dstd = dy[:, :c], dy[:, c:]
        return dmean[:, :, None] / t + (dstd / std)[:, :, None] * centered / t


class Sequential(Layer):
    def __init__(self, layers: Mapping[str, Layer]):
        super().__init__()
        self.layers = dict(layers)

    def named_parameters(self) -> dict[str, Parameter]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers.items() for pn, p in layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": b for ln, layer in self.layers.items() for bn, b in layer.buffers.items()}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        ln, bn = name.split(".", 1)
        self.layers[ln].buffers[bn] = value

    def forward(self, x, train=False):
        for layer in self.layers.values():
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.layers.values())):
            dy = layer.backward(dy)
        return dy

    def astype(self, dtype):
        for layer in self.layers.values():
            layer.astype(dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AamConfig:
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("AAM scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("AAM margin must lie in [0, pi/2)")


def _l2_normalize(x: np.ndarray, axis: int = -1, what: str = "vector") -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError(f"zero-norm {what}")
    return x / norm, norm


def _aam_target(cos_t: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """cos(theta + m) with theta + m clamped to pi, and its derivative w.r.t. cos(theta)."""
    c = np.clip(cos_t, -1.0, 1.0)
    theta = np.arccos(c)
    phi = np.minimum(theta + margin, math.pi)
    target = np.cos(phi)
    sin_theta = np.maximum(np.sin(theta), 1e-12)
    deriv = np.where(theta + margin < math.pi, np.sin(phi) / sin_theta, 0.0)
    return target, deriv


def aam_logits(embedding: np.ndarray, head: np.ndarray, label: int, cfg: AamConfig) -> np.ndarray:
    """Scaled cosine logits with an additive angular margin on the true class."""
    e, _ = _l2_normalize(np.asarray(embedding, dtype=np.float64), what="embedding")
    w, _ = _l2_normalize(np.asarray(head, dtype=np.float64), axis=1, what="head row")
    if not 0 <= label < w.shape[0]:
        raise ValueError(f"label {label} out of range for {w.shape[0]} classes")
    cos = np.clip(w @ e, -1.0, 1.0)
    logits = cfg.scale * cos
    target, _ = _aam_target(cos[label], cfg.margin)
    logits[label] = cfg.scale * target
    return logits


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    logits = check_finite(np.asarray(logits, dtype=np.float64), "logits")
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; returns (loss, dlogits)."""
    check_finite(logits, "logits")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class AamHead(Layer):
    """Classification head producing AAM logits for a batch of embeddings."""

    def __init__(self, n_classes: int, dim: int, cfg: AamConfig, rng: np.random.Generator):
        super().__init__()
        w = rng.standard_normal((n_classes, dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.params["w"] = Parameter(w.astype(DTYPE))
        self.cfg = cfg
        self._cache = None

    def forward_labels(self, e: np.ndarray, labels: np.ndarray, train: bool = False) -> np.ndarray:
        w = self.params["w"].value
        eh, en = _l2_normalize(e, axis=1, what="embedding")
        wh, wn = _l2_normalize(w, axis=1, what="head row")
        cos = eh @ wh.T
        rows = np.arange(e.shape[0])
        target, deriv = _aam_target(cos[rows, labels], self.cfg.margin)
        logits = cos.copy()
        logits[rows, labels] = target
        if train:
            self._cache = (eh, en, wh, wn, labels, deriv)
        return (self.cfg.scale * logits).astype(e.dtype)

    def forward(self, x, train=False):
        # plain scaled cosine (no margin) for inference-time classification
        eh, _ = _l2_normalize(x, axis=1, what="embedding")
        wh, _ = _l2_normalize(self.params["w"].value, axis=1, what="head row")
        return self.cfg.scale * (eh @ wh.T)

    def backward(self, dlogits):
        eh, en, wh, wn, labels, deriv = self._cache
        rows = np.arange(eh.shape[0])
        dcos = self.cfg.scale * dlogits
        dcos[rows, labels] *= deriv
        deh = dcos @ wh
        dwh = dcos.T @ eh
        de = (deh - eh * (deh * eh).sum(axis=1, keepdims=True)) / en
        dw = (dwh - wh * (dwh * wh).sum(axis=1, keepdims=True)) / wn
        self.params["w"].grad += dw.astype(self.params["w"].grad.dtype)
        return de


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    weight_decay: float = 2e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, **kw) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **kw)


def adam_step(param: Parameter, state: AdamState, lr: float) -> None:
    """One in-place Adam update with decoupled weight decay."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**t)
    v_hat = state.v / (1 - state.beta2**t)
    value = param.value
    if state.weight_decay:
        value = value - lr * state.weight_decay * value
    value = value - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.value = value.astype(param.value.dtype)


class Adam:
    def __init__(self, params: Mapping[str, Parameter], weight_decay: float = 2e-6,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.states = {
            k: AdamState.for_param(p, weight_decay=weight_decay, beta1=beta1, beta2=beta2, epsilon=epsilon)
            for k, p in self.params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        for k, p in self.params.items():
            adam_step(p, self.states[k], lr)


@dataclass(frozen=True)
class CyclicLrSchedule:
    base_lr: float = 1e-8
    max_lr: float = 1e-3
    cycle_steps: int = 1000

    def __post_init__(self):
        if self.cycle_steps < 1:
            raise ValueError("cycle_steps must be positive")
        if not 0 <= self.base_lr <= self.max_lr:
            raise ValueError("need 0 <= base_lr <= max_lr")


def lr_at(schedule: CyclicLrSchedule, step: int) -> float:
    """Triangular cyclic learning rate."""
    if step < 0:
        raise ValueError("step must be non-negative")
    pos = (step % schedule.cycle_steps) / schedule.cycle_steps
    frac = 2 * pos if pos < 0.5 else 2 * (1 - pos)
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * frac


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, Parameter] | Iterable[Parameter],
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must recompute the loss from the current parameter values and
    fill each ``Parameter.grad`` (after zeroing).  Parameters should be
    float64 for a meaningful check.  ``max_coords`` limits the number of
    coordinates probed per parameter (sampled with ``rng``).
    """
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    loss_fn()
    analytic = [p.grad.astype(np.float64).copy() for p in plist]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(plist, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn())
            flat[i] = orig - epsilon
            f_minus = float(loss_fn())
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * epsilon)
            ana = a.reshape(-1)[i]
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    loss_fn()
    return worst
