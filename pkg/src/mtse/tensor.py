"""Deterministic float64 tensor kernels with explicit gradient rules.

Tensors are plain ``numpy.ndarray`` objects in channels-last layout. Spatial
operations accept either a single tile ``[h, w, c]`` or a batch ``[B, h, w, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_ALPHA = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NumericalError(FloatingPointError):
    """Raised when a value leaves the finite range."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [h,w,c] or [B,h,w,c], got shape {x.shape}")


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be [k,k,c_in,c_out], got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"input depth {x.shape[-1]} != kernel depth {kernel.shape[2]}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[3]},)")
    return k


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold same-padded ``k x k`` windows of ``x[B,h,w,c]`` into ``[B*h*w, k*k*c]``.

    Column order is (dy, dx, channel), matching a kernel laid out as
    ``[k, k, c_in, c_out]``.
    """
    B, H, W, C = x.shape
    if k == 1:
        return x.reshape(B * H * W, C)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    s = xp.strides
    view = as_strided(xp, (B, H, W, k, k, C), (s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return view.reshape(B * H * W, k * k * C)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add windows back onto ``shape``."""
    B, H, W, C = shape
    if k == 1:
        return cols.reshape(B, H, W, C)
    p = k // 2
    cols = cols.reshape(B, H, W, k, k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C), DTYPE)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + H, dx:dx + W, :] += cols[:, :, :, dy, dx, :]
    return out[:, p:p + H, p:p + W, :]


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded, zero-filled, stride-1 2-D convolution (cross-correlation).

    ``out[y, x, o] = bias[o] + sum_{dy,dx,i} in[y+dy-k//2, x+dx-k//2, i] * kernel[dy, dx, i, o]``
    """
    k = _check_conv(x, kernel, bias)
    xb, squeeze = _batched(x)
    B, H, W, _ = xb.shape
    out = im2col(xb, k) @ kernel.reshape(-1, kernel.shape[3])
    if bias is not None:
        out += bias
    out = out.reshape(B, H, W, kernel.shape[3])
    return out[0] if squeeze else out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d`."""
    k = _check_conv(x, kernel, None)
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    c_out = kernel.shape[3]
    if gb.shape != xb.shape[:3] + (c_out,):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} and kernel {kernel.shape}")
    g2 = gb.reshape(-1, c_out)
    cols = im2col(xb, k)
    grad_kernel = (cols.T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    grad_input = col2im(g2 @ kernel.reshape(-1, c_out).T, xb.shape, k)
    return (grad_input[0] if squeeze else grad_input), grad_kernel, grad_bias


# -- element-wise non-linearities ------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of sigmoid given its output ``y``."""
    return grad * y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (1.0 - y * y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, grad, 0.0)


def leaky_relu(x: np.ndarray, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(x: np.ndarray, grad: np.ndarray, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    return np.where(x >= 0, grad, alpha * grad)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"cannot concatenate {xs[0].shape} and {x.shape} along channels")
    return np.concatenate(xs, axis=-1)


def split_channels(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`; also its gradient rule."""
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not add up to {x.shape[-1]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=-1)


_POINTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "add": add,
    "mul": mul,
    "concat_channels": concat_channels,
}


def pointwise(op: str, *args, **kwargs) -> np.ndarray:
    """Dispatch an element-wise op by name (``leaky_relu`` takes ``alpha=``)."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- softmax / batch norm ---------------------------------------------------------

def softmax_channels(logits: np.ndarray) -> np.ndarray:
    if logits.shape[-1] < 2:
        raise ShapeError("softmax needs at least two channels")
    check_finite(logits, "logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: RunningStats,
               mode: str = "train", eps: float = BN_EPS):
    """Per-channel batch normalization over all leading axes.

    Returns ``(out, cache)``. In ``train`` mode the running statistics are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ShapeError(f"batch norm channel mismatch: input has {c} channels")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        centered = x - mean
        var = (centered * centered).mean(axis=axes)
        m = state.momentum
        state.mean = m * state.mean + (1.0 - m) * mean
        state.var = m * state.var + (1.0 - m) * var
    elif mode == "infer":
        mean, var = state.mean, state.var
        centered = x - mean
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return gamma * xhat + beta, BatchNormCache(xhat, inv_std, gamma, mode)


def batch_norm_backward(cache: BatchNormCache, grad: np.ndarray):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    axes = tuple(range(grad.ndim - 1))
    grad_gamma = (grad * cache.xhat).sum(axis=axes)
    grad_beta = grad.sum(axis=axes)
    gx = grad * cache.gamma
    if cache.mode == "infer":
        return gx * cache.inv_std, grad_gamma, grad_beta
    n = np.prod([grad.shape[a] for a in axes])
    gx = (gx - gx.sum(axis=axes) / n - cache.xhat * (gx * cache.xhat).sum(axis=axes) / n) * cache.inv_std
    return gx, grad_gamma, grad_beta


# -- gradient checking ------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    per_param: dict[str, float] = field(default_factory=dict)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(model_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], probe_count: int = 16, eps: float = 1e-5,
               seed: int = 0, detail: bool = False):
    """Compare analytic gradients against central differences.

    ``model_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps the
    same names as ``params``. Parameter arrays are perturbed in place and
    restored. Up to ``probe_count`` coordinates per parameter are probed,
    chosen by a seeded generator.

    Returns the maximum relative error, or a :class:`GradCheckResult` when
    ``detail`` is set.
    """
    rng = np.random.default_rng(seed)
    loss, grads = model_fn(params)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss in gradient check")
    analytic = {name: np.array(g, dtype=DTYPE, copy=True) for name, g in grads.items()}
    result = GradCheckResult(0.0)
    for name in sorted(params):
        value = params[name]
        if not value.flags.c_contiguous:
            raise ValueError(f"parameter {name} must be C-contiguous")
        flat = value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= probe_count else rng.choice(n, size=probe_count, replace=False)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            plus, _ = model_fn(params)
            flat[idx] = orig - eps
            minus, _ = model_fn(params)
            flat[idx] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericalError(f"non-finite loss while probing {name}")
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric))
        result.per_param[name] = worst
        result.max_relative_error = max(result.max_relative_error, worst)
    return result if detail else result.max_relative_error
