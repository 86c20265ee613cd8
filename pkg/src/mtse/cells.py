"""One-step RNN, LSTM and GRU transitions in dense and convolutional form.

A dense cell is treated as a convolutional cell with ``k = 1`` on a ``1 x 1``
tile, so both arrangements share one code path. Per-gate parameters are kept
as separate named arrays (``W_i``, ``b_i``, ...); the step kernels fuse them
into one convolution per gate group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import (
    DTYPE,
    ShapeError,
    conv2d,
    conv2d_backward,
    im2col,
    sigmoid,
    tanh,
)

GATES = {
    "rnn": ("",),
    "lstm": ("i", "j", "f", "o"),
    "gru": ("z", "s", "h"),
}
GATE_MULTIPLICITY = {"rnn": 1, "gru": 3, "lstm": 4}


@dataclass(frozen=True)
class CellConfig:
    kind: str = "lstm"
    arrangement: str = "conv"
    r: int = 32
    d: int = 15
    k_rnn: int = 3
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.kind not in GATES:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.arrangement not in ("dense", "conv"):
            raise ValueError(f"unknown arrangement {self.arrangement!r}")
        if self.r < 1 or self.d < 1:
            raise ValueError("r and d must be positive")
        if self.k_rnn < 1 or self.k_rnn % 2 == 0:
            raise ValueError(f"k_rnn must be odd, got {self.k_rnn}")

    @property
    def k(self) -> int:
        return 1 if self.arrangement == "dense" else self.k_rnn

    @property
    def has_cell_state(self) -> bool:
        return self.kind == "lstm"

    def weight_shape(self) -> tuple[int, ...]:
        if self.arrangement == "dense":
            return (self.d + self.r, self.r)
        return (self.k_rnn, self.k_rnn, self.d + self.r, self.r)

    def param_names(self) -> list[str]:
        names = []
        for g in GATES[self.kind]:
            suffix = f"_{g}" if g else ""
            names += [f"W{suffix}", f"b{suffix}"]
        return names


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None

    @classmethod
    def zeros(cls, config: CellConfig, spatial: tuple[int, ...] = ()) -> "CellState":
        shape = tuple(spatial) + (config.r,)
        h = np.zeros(shape, DTYPE)
        return cls(h, np.zeros(shape, DTYPE) if config.has_cell_state else None)


def param_count(config: CellConfig) -> int:
    """Trainable parameters: ``G * (k^2 (r + d) r + r)``."""
    k = config.k
    return GATE_MULTIPLICITY[config.kind] * (k * k * (config.r + config.d) * config.r + config.r)


def init_params(config: CellConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights per gate, zero biases."""
    rng = np.random.default_rng(seed)
    k = config.k
    fan_in = k * k * (config.r + config.d)
    fan_out = config.r
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    params = {}
    for g in GATES[config.kind]:
        suffix = f"_{g}" if g else ""
        params[f"W{suffix}"] = rng.uniform(-bound, bound, size=config.weight_shape())
        params[f"b{suffix}"] = np.zeros(config.r, DTYPE)
    return params


# -- fused kernels ----------------------------------------------------------------

def _kernel(w: np.ndarray, config: CellConfig) -> np.ndarray:
    if config.arrangement == "dense":
        return w.reshape(1, 1, *w.shape)
    return w


def _fused_gates(kind: str) -> tuple[str, ...]:
    return ("",) if kind == "rnn" else GATES[kind]


@dataclass
class FusedWeights:
    """Per-gate kernels regrouped for fast stepping, built once per sequence.

    Every gate weight acts on ``[x, h]``; it is split into an input part
    ``kx`` (all gates stacked, applied once per observation) and a recurrent
    part ``kh`` applied at every step. For GRU the candidate's recurrent part
    ``kh_cand`` acts on ``s * h`` instead of ``h``.
    """

    kind: str
    r: int
    d: int
    kx: np.ndarray              # [k,k,d,G*r]
    bias: np.ndarray            # [G*r]
    kh: np.ndarray              # [k,k,r,G'*r]
    kh_cand: np.ndarray | None = None

    @classmethod
    def build(cls, params: Mapping[str, np.ndarray], config: CellConfig) -> "FusedWeights":
        _check_params(params, config)
        d = config.d
        gates = _fused_gates(config.kind)
        names = [f"W_{g}" if g else "W" for g in gates]
        kernels = [_kernel(params[n], config) for n in names]
        kx = np.concatenate([k[:, :, :d] for k in kernels], axis=-1)
        bias = np.concatenate([params[f"b_{g}" if g else "b"] for g in gates])
        if config.kind == "lstm":
            # constant shift of the forget pre-activation, not a trainable value
            f = gates.index("f")
            bias[f * config.r:(f + 1) * config.r] += config.forget_bias
        if config.kind == "gru":
            kh = np.concatenate([k[:, :, d:] for k in kernels[:2]], axis=-1)
            return cls(config.kind, config.r, d, kx, bias, kh, np.ascontiguousarray(kernels[2][:, :, d:]))
        kh = np.concatenate([k[:, :, d:] for k in kernels], axis=-1)
        return cls(config.kind, config.r, d, kx, bias, kh)

    def input_part(self, x: np.ndarray) -> np.ndarray:
        """Pre-activations contributed by an observation ``x[B,h,w,d]`` (bias included)."""
        return conv2d(x, self.kx, self.bias)

    def unfuse(self, grad_kx: np.ndarray, grad_bias: np.ndarray, grad_kh: np.ndarray,
               grad_kh_cand: np.ndarray | None = None, config: CellConfig | None = None) -> dict[str, np.ndarray]:
        """Split fused gradients back into per-gate named gradients."""
        r = self.r
        dense = config is not None and config.arrangement == "dense"
        gates = _fused_gates(self.kind)
        out = {}
        for n, g in enumerate(gates):
            sl = slice(n * r, (n + 1) * r)
            if self.kind == "gru" and g == "h":
                gh = grad_kh_cand
            else:
                gh = grad_kh[..., sl]
            w = np.concatenate([grad_kx[..., sl], gh], axis=2)
            out[f"W_{g}" if g else "W"] = w.reshape(w.shape[2], w.shape[3]) if dense else w
            out[f"b_{g}" if g else "b"] = grad_bias[sl]
        return out


def _check_params(params: Mapping[str, np.ndarray], config: CellConfig):
    for name in config.param_names():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r} for {config.kind} cell")
        want = config.weight_shape() if name.startswith("W") else (config.r,)
        if params[name].shape != want:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {want}")


@dataclass
class StepCache:
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    gates: dict[str, np.ndarray]
    sh: np.ndarray | None = None
    tanh_c: np.ndarray | None = None


def step_forward(ax: np.ndarray, h: np.ndarray, c: np.ndarray | None, fw: FusedWeights):
    """Advance batched spatial state ``h[B,h,w,r]`` by one step.

    ``ax`` is :meth:`FusedWeights.input_part` of the current observation.
    Returns ``(h_new, c_new, cache)``; ``cache.gates`` holds the gate tensors.
    """
    r = fw.r
    if fw.kind == "rnn":
        h_new = tanh(ax + conv2d(h, fw.kh))
        return h_new, None, StepCache(h, None, {"h": h_new})
    if fw.kind == "lstm":
        if c is None:
            raise ShapeError("LSTM step requires a cell state")
        a = ax + conv2d(h, fw.kh)
        i = sigmoid(a[..., :r])
        j = tanh(a[..., r:2 * r])
        f = sigmoid(a[..., 2 * r:3 * r])
        o = sigmoid(a[..., 3 * r:])
        c_new = f * c + i * j
        tc = tanh(c_new)
        h_new = o * tc
        gates = {"i": i, "j": j, "f": f, "o": o, "c": c_new}
        return h_new, c_new, StepCache(h, c, gates, tanh_c=tc)
    if c is not None:
        raise ShapeError("GRU state carries no cell state")
    a = ax[..., :2 * r] + conv2d(h, fw.kh)
    z = sigmoid(a[..., :r])
    s = sigmoid(a[..., r:])
    sh = s * h
    cand = tanh(ax[..., 2 * r:] + conv2d(sh, fw.kh_cand))
    h_new = (1.0 - z) * h + z * cand
    return h_new, None, StepCache(h, None, {"z": z, "s": s, "cand": cand}, sh=sh)


def step_backward(cache: StepCache, dh: np.ndarray, dc: np.ndarray | None, fw: FusedWeights):
    """Backpropagate one step.

    Returns ``(dax, dh_prev, dc_prev, grads)`` where ``dax`` is the gradient
    with respect to the step's input pre-activations and ``grads`` holds the
    recurrent kernel gradients ``kh`` (and ``kh_cand`` for GRU).
    """
    g = cache.gates
    grads = {}
    if fw.kind == "rnn":
        da = dh * (1.0 - g["h"] ** 2)
        dh_prev, grads["kh"], _ = conv2d_backward(cache.h_prev, fw.kh, da)
        return da, dh_prev, None, grads
    if fw.kind == "lstm":
        i, j, f, o = g["i"], g["j"], g["f"], g["o"]
        tc = cache.tanh_c
        dct = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dct = dct + dc
        da = np.concatenate([
            dct * j * i * (1.0 - i),
            dct * i * (1.0 - j * j),
            dct * cache.c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
        ], axis=-1)
        dh_prev, grads["kh"], _ = conv2d_backward(cache.h_prev, fw.kh, da)
        return da, dh_prev, dct * f, grads
    z, s, cand = g["z"], g["s"], g["cand"]
    h = cache.h_prev
    da_cand = dh * z * (1.0 - cand * cand)
    dsh, grads["kh_cand"], _ = conv2d_backward(cache.sh, fw.kh_cand, da_cand)
    da_zs = np.concatenate([
        dh * (cand - h) * z * (1.0 - z),
        dsh * h * s * (1.0 - s),
    ], axis=-1)
    dh_rec, grads["kh"], _ = conv2d_backward(h, fw.kh, da_zs)
    dh_prev = dh * (1.0 - z) + dsh * s + dh_rec
    return np.concatenate([da_zs, da_cand], axis=-1), dh_prev, None, grads


def input_backward(x: np.ndarray, dax: np.ndarray, fw: FusedWeights, need_dx: bool = False):
    """Gradients of the input part: ``(dx or None, grad_kx, grad_bias)``."""
    dx, gkx, gb = conv2d_backward(x, fw.kx, dax) if need_dx else (None, *_kernel_grads(x, fw.kx, dax))
    return dx, gkx, gb


def _kernel_grads(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    k = kernel.shape[0]
    c_out = kernel.shape[3]
    g2 = grad_out.reshape(-1, c_out)
    gk = (im2col(x, k).T @ g2).reshape(kernel.shape)
    return gk, g2.sum(axis=0)


# -- public single-step API ---------------------------------------------------------

def _to_spatial(x: np.ndarray, config: CellConfig, depth: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Lift a dense ``[..., depth]`` or conv ``[..., h, w, depth]`` tensor to ``[B,h,w,depth]``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1:] != (depth,):
        raise ShapeError(f"expected trailing depth {depth}, got shape {x.shape}")
    if config.arrangement == "dense":
        if x.ndim not in (1, 2):
            raise ShapeError(f"dense cell expects [d] or [B,d], got {x.shape}")
        return x.reshape(-1, 1, 1, depth), x.shape
    if x.ndim == 3:
        return x[None], x.shape
    if x.ndim == 4:
        return x, x.shape
    raise ShapeError(f"conv cell expects [h,w,d] or [B,h,w,d], got {x.shape}")


def _run_step(x_t, state: CellState, params, config: CellConfig):
    x, _ = _to_spatial(x_t, config, config.d)
    h, out_shape = _to_spatial(state.h, config, config.r)
    if x.shape[:3] != h.shape[:3]:
        raise ShapeError(f"input {np.shape(x_t)} and state {state.h.shape} disagree spatially")
    c = None
    if config.has_cell_state:
        if state.c is None:
            raise ShapeError("LSTM step requires a cell state")
        c, _ = _to_spatial(state.c, config, config.r)
    elif state.c is not None:
        raise ShapeError(f"{config.kind} state carries no cell state")
    fw = FusedWeights.build(params, config)
    h_new, c_new, cache = step_forward(fw.input_part(x), h, c, fw)
    new_state = CellState(h_new.reshape(out_shape), None if c_new is None else c_new.reshape(out_shape))
    trace = {k: v.reshape(out_shape) for k, v in cache.gates.items()}
    return new_state, trace


def rnn_step(x_t, state: CellState, params, config: CellConfig) -> CellState:
    """``h_t = tanh(W * [x_t, h_{t-1}] + b)``."""
    if config.kind != "rnn":
        raise ValueError("rnn_step needs an rnn config")
    return _run_step(x_t, state, params, config)[0]


def lstm_step(x_t, state: CellState, params, config: CellConfig) -> tuple[CellState, dict[str, np.ndarray]]:
    """One LSTM transition; the trace dict holds gates ``i, j, f, o`` and ``c``."""
    if config.kind != "lstm":
        raise ValueError("lstm_step needs an lstm config")
    return _run_step(x_t, state, params, config)


def gru_step(x_t, state: CellState, params, config: CellConfig) -> tuple[CellState, dict[str, np.ndarray]]:
    """One GRU transition; the trace dict holds update ``z``, reset ``s`` and candidate ``cand``."""
    if config.kind != "gru":
        raise ValueError("gru_step needs a gru config")
    return _run_step(x_t, state, params, config)


def cell_step(x_t, state: CellState, params, config: CellConfig):
    """Kind-agnostic step returning ``(state, trace)``."""
    return _run_step(x_t, state, params, config)
