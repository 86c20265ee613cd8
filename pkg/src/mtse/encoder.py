"""Bidirectional convolutional recurrent sequence encoder with a per-pixel classifier.

The observation sequence is encoded twice with shared cell weights, once in
acquisition order and once reversed. The two final states are concatenated
channel-wise (``[h, w, 2r]``) and projected to per-pixel class probabilities
by ``conv(k_class) -> batch norm -> (leaky) ReLU -> 1x1 conv -> softmax``.

Masked (padded) frames are skipped: the state is carried through unchanged, so
padding never alters any output bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import CellConfig, FusedWeights, init_params, input_backward, step_backward, step_forward
from .tensor import DTYPE, Parameter, RunningStats, ShapeError

PAD_VALUE = 0.0
IGNORE = -1
LOG_CLAMP = 1e-12


@dataclass
class SequenceSample:
    """One tile: observations ``x[T,h,w,d]``, validity ``mask[T]``, labels ``y[h,w]``."""

    x: np.ndarray
    mask: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4:
            raise ShapeError(f"x must be [T,h,w,d], got {self.x.shape}")
        if self.mask.shape != (self.x.shape[0],):
            raise ShapeError(f"mask shape {self.mask.shape} does not match T={self.x.shape[0]}")
        if self.y.shape != self.x.shape[1:3]:
            raise ShapeError(f"label map {self.y.shape} does not match tile {self.x.shape[1:3]}")

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def reversed(self) -> "SequenceSample":
        return SequenceSample(self.x[::-1].copy(), self.mask[::-1].copy(), self.y.copy())

    def with_padding(self, positions) -> "SequenceSample":
        """Insert one padded frame before each index in ``positions`` (indices into the original)."""
        frames, mask = [], []
        pad = np.full(self.x.shape[1:], PAD_VALUE, self.x.dtype)
        positions = sorted(positions)
        p = 0
        for t in range(self.x.shape[0] + 1):
            while p < len(positions) and positions[p] == t:
                frames.append(pad)
                mask.append(False)
                p += 1
            if t < self.x.shape[0]:
                frames.append(self.x[t])
                mask.append(bool(self.mask[t]))
        return SequenceSample(np.stack(frames), np.array(mask), self.y.copy())


def stack_samples(samples: list[SequenceSample], dtype=DTYPE):
    """Stack samples into ``X[B,T,h,w,d]``, ``M[B,T]``, ``Y[B,h,w]``, padding short sequences."""
    if not samples:
        raise ValueError("no samples to stack")
    t_max = max(s.x.shape[0] for s in samples)
    shape = samples[0].x.shape[1:]
    X = np.full((len(samples), t_max) + shape, PAD_VALUE, dtype)
    M = np.zeros((len(samples), t_max), bool)
    Y = np.empty((len(samples),) + shape[:2], np.int64)
    for b, s in enumerate(samples):
        if s.x.shape[1:] != shape:
            raise ShapeError(f"sample {b} has frame shape {s.x.shape[1:]}, expected {shape}")
        n = s.x.shape[0]
        X[b, :n] = s.x
        M[b, :n] = s.mask
        Y[b] = s.y
    return X, M, Y


@dataclass(frozen=True)
class EncoderConfig:
    cell: CellConfig
    n_classes: int
    k_class: int = 3
    activation: str = "leaky_relu"
    head_width: int | None = None

    def __post_init__(self):
        if self.cell.arrangement != "conv":
            raise ValueError("the encoder needs a convolutional cell")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.k_class < 1 or self.k_class % 2 == 0:
            raise ValueError(f"k_class must be odd, got {self.k_class}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def rep_depth(self) -> int:
        return 2 * self.cell.r

    @property
    def hidden(self) -> int:
        return self.head_width or self.rep_depth

    def to_dict(self) -> dict:
        return {
            "cell": {
                "kind": self.cell.kind, "arrangement": self.cell.arrangement, "r": self.cell.r,
                "d": self.cell.d, "k_rnn": self.cell.k_rnn, "forget_bias": self.cell.forget_bias,
            },
            "n_classes": self.n_classes, "k_class": self.k_class,
            "activation": self.activation, "head_width": self.head_width,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        return cls(cell=CellConfig(**data.pop("cell")), **data)


@dataclass
class SequenceRepresentation:
    """Concatenated final states; ``forward``/``reverse`` are the two halves."""

    c_T: np.ndarray
    forward: np.ndarray
    reverse: np.ndarray


def init_head(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    k, c_in, hid, n = config.k_class, config.rep_depth, config.hidden, config.n_classes
    b1 = np.sqrt(6.0 / (k * k * c_in + hid))
    b2 = np.sqrt(6.0 / (hid + n))
    return {
        "head.conv.W": rng.uniform(-b1, b1, size=(k, k, c_in, hid)),
        "head.bn.gamma": np.ones(hid, DTYPE),
        "head.bn.beta": np.zeros(hid, DTYPE),
        "head.proj.W": rng.uniform(-b2, b2, size=(1, 1, hid, n)),
        "head.proj.b": np.zeros(n, DTYPE),
    }


def init_encoder_params(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    params = {f"cell.{k}": v for k, v in init_params(config.cell, seed).items()}
    params.update(init_head(config, seed))
    return params


def cell_params(params) -> dict[str, np.ndarray]:
    return {k[5:]: v for k, v in params.items() if k.startswith("cell.")}


# -- sequence encoding --------------------------------------------------------------

def _input_parts(X, M, fw: FusedWeights) -> np.ndarray:
    """Input-side pre-activations for every frame that is unmasked somewhere in the batch."""
    B, n, H, W, _ = X.shape
    AX = np.zeros((B, n, H, W, fw.kx.shape[-1]), DTYPE)
    for t in range(n):
        if M[:, t].any():
            AX[:, t] = fw.input_part(X[:, t])
    return AX


def _run_direction(AX, M, fw: FusedWeights, lstm: bool, order, keep_cache: bool):
    B, _, H, W, _ = AX.shape
    h = np.zeros((B, H, W, fw.r), DTYPE)
    c = np.zeros_like(h) if lstm else None
    caches = []
    for t in order:
        active = M[:, t]
        if not active.any():
            continue
        if active.all():
            h, c, cache = step_forward(AX[:, t], h, c, fw)
            idx = None
        else:
            idx = np.flatnonzero(active)
            hs, cs, cache = step_forward(AX[idx, t], h[idx], None if c is None else c[idx], fw)
            h = h.copy()
            h[idx] = hs
            if c is not None:
                c = c.copy()
                c[idx] = cs
        if keep_cache:
            caches.append((t, idx, cache))
    return (c if lstm else h), caches


def _as_batch(x, mask):
    x = np.asarray(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim == 4:
        return x[None], mask[None], True
    return x, mask, False


def _check_inputs(X, M, config: EncoderConfig):
    if X.ndim != 5:
        raise ShapeError(f"expected x of shape [B,T,h,w,d], got {X.shape}")
    if X.shape[-1] != config.cell.d:
        raise ShapeError(f"input depth {X.shape[-1]} != configured d={config.cell.d}")
    if M.shape != X.shape[:2]:
        raise ShapeError(f"mask shape {M.shape} does not match {X.shape[:2]}")
    if not M.any(axis=1).all():
        raise ValueError("every sequence needs at least one unmasked observation")


def encode_batch(X, M, params, config: EncoderConfig, keep_cache: bool = False):
    """Encode ``X[B,T,h,w,d]`` under ``M[B,T]``; returns ``(rep, caches)``."""
    _check_inputs(X, M, config)
    X = np.asarray(X, dtype=DTYPE)
    fw = FusedWeights.build(cell_params(params), config.cell)
    lstm = config.cell.has_cell_state
    n = X.shape[1]
    AX = _input_parts(X, M, fw)
    fwd, cf = _run_direction(AX, M, fw, lstm, range(n), keep_cache)
    rev, cr = _run_direction(AX, M, fw, lstm, range(n - 1, -1, -1), keep_cache)
    rep = SequenceRepresentation(np.concatenate([fwd, rev], axis=-1), fwd, rev)
    return rep, (fw, cf, cr)


def encode(sample: SequenceSample, params, config: EncoderConfig) -> SequenceRepresentation:
    X, M, squeeze = _as_batch(sample.x, sample.mask)
    rep, _ = encode_batch(X, M, params, config)
    if squeeze:
        rep = SequenceRepresentation(rep.c_T[0], rep.forward[0], rep.reverse[0])
    return rep


# -- classification head --------------------------------------------------------------

@dataclass
class HeadCache:
    rep: np.ndarray
    z1: np.ndarray
    bn: T.BatchNormCache
    a: np.ndarray
    act: np.ndarray
    y_hat: np.ndarray


def _activate(x, config: EncoderConfig):
    return T.relu(x) if config.activation == "relu" else T.leaky_relu(x)


def _activate_backward(x, g, config: EncoderConfig):
    return T.relu_backward(x, g) if config.activation == "relu" else T.leaky_relu_backward(x, g)


def head_forward(rep: np.ndarray, params, bn: RunningStats, config: EncoderConfig, mode: str = "infer"):
    if rep.shape[-1] != config.rep_depth:
        raise ShapeError(f"representation depth {rep.shape[-1]} != 2r = {config.rep_depth}")
    z1 = T.conv2d(rep, params["head.conv.W"])
    a, bn_cache = T.batch_norm(z1, params["head.bn.gamma"], params["head.bn.beta"], bn, mode)
    act = _activate(a, config)
    logits = T.conv2d(act, params["head.proj.W"], params["head.proj.b"])
    y_hat = T.softmax_channels(logits)
    return y_hat, HeadCache(rep, z1, bn_cache, a, act, y_hat)


def head_backward(cache: HeadCache, d_logits: np.ndarray, params, config: EncoderConfig):
    grads = {}
    d_act, grads["head.proj.W"], grads["head.proj.b"] = T.conv2d_backward(cache.act, params["head.proj.W"], d_logits)
    d_a = _activate_backward(cache.a, d_act, config)
    d_z1, grads["head.bn.gamma"], grads["head.bn.beta"] = T.batch_norm_backward(cache.bn, d_a)
    d_rep, grads["head.conv.W"], _ = T.conv2d_backward(cache.rep, params["head.conv.W"], d_z1)
    return d_rep, grads


def classify(rep, params, config: EncoderConfig, bn: RunningStats | None = None, mode: str = "infer") -> np.ndarray:
    """Per-pixel class distribution ``[h, w, n]`` for a representation ``[h, w, 2r]``."""
    c_T = rep.c_T if isinstance(rep, SequenceRepresentation) else rep
    if bn is None:
        bn = RunningStats.zeros(config.hidden)
    return head_forward(c_T, params, bn, config, mode)[0]


def predict_map(y_hat: np.ndarray) -> np.ndarray:
    return np.argmax(y_hat, axis=-1)


# -- loss ----------------------------------------------------------------------------

def pixel_losses(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel cross-entropy; IGNORE pixels get 0."""
    y = np.asarray(y)
    n = y_hat.shape[-1]
    valid = y != IGNORE
    if np.any((y < IGNORE) | (y >= n)):
        raise ValueError("label out of range")
    p = np.take_along_axis(y_hat, np.where(valid, y, 0)[..., None], axis=-1)[..., 0]
    return np.where(valid, -np.log(np.maximum(p, LOG_CLAMP)), 0.0)


def cross_entropy(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean of ``-log y_hat[true class]`` over labeled pixels."""
    y = np.asarray(y)
    count = int(np.count_nonzero(y != IGNORE))
    if count == 0:
        raise ValueError("all pixels are IGNORE")
    return float(pixel_losses(y_hat, y).sum() / count)


def cross_entropy_logit_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to the pre-softmax logits."""
    valid = y != IGNORE
    count = int(np.count_nonzero(valid))
    onehot = np.zeros_like(y_hat)
    np.put_along_axis(onehot, np.where(valid, y, 0)[..., None], 1.0, axis=-1)
    return np.where(valid[..., None], y_hat - onehot, 0.0) / count


# -- model ----------------------------------------------------------------------------

@dataclass
class _ForwardState:
    X: np.ndarray
    M: np.ndarray
    Y: np.ndarray
    fw: FusedWeights
    caches_fwd: list
    caches_rev: list
    head: HeadCache
    squeeze: bool


@dataclass
class Encoder:
    """Parameters, batch-norm statistics, and the forward/backward passes."""

    config: EncoderConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    bn: RunningStats | None = None

    def __post_init__(self):
        if self.bn is None:
            self.bn = RunningStats.zeros(self.config.hidden)
        self._last: _ForwardState | None = None

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        params = {k: Parameter(k, v) for k, v in init_encoder_params(config, seed).items()}
        return cls(config, params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def encode(self, sample: SequenceSample) -> SequenceRepresentation:
        return encode(sample, self.values(), self.config)

    def predict(self, X, M, mode: str = "infer") -> np.ndarray:
        """Class probabilities for a batch (or single sample) without caching."""
        Xb, Mb, squeeze = _as_batch(X, M)
        rep, _ = encode_batch(Xb, Mb, self.values(), self.config)
        y_hat, _ = head_forward(rep.c_T, self.values(), self.bn, self.config, mode)
        return y_hat[0] if squeeze else y_hat

    def forward(self, X, M, Y, mode: str = "train"):
        """Return ``(y_hat, loss)`` and keep activations for :meth:`backward`.

        ``X`` may be a single sequence ``[T,h,w,d]`` or a batch ``[B,T,h,w,d]``;
        the loss is the mean over all labeled pixels of the batch.
        """
        Xb, Mb, squeeze = _as_batch(X, M)
        Xb = np.asarray(Xb, DTYPE)
        Yb = np.asarray(Y)[None] if squeeze else np.asarray(Y)
        values = self.values()
        rep, (fw, cf, cr) = encode_batch(Xb, Mb, values, self.config, keep_cache=True)
        y_hat, hc = head_forward(rep.c_T, values, self.bn, self.config, mode)
        loss = cross_entropy(y_hat, Yb)
        T.check_finite(np.asarray(loss), "loss")
        self._last = _ForwardState(Xb, Mb, Yb, fw, cf, cr, hc, squeeze)
        return (y_hat[0] if squeeze else y_hat), loss

    def forward_sample(self, sample: SequenceSample, mode: str = "train"):
        return self.forward(sample.x, sample.mask, sample.y, mode)

    def backward(self, return_input_grad: bool = False):
        """Accumulate gradients of the last forward's loss into ``Parameter.grad``.

        Returns the gradient dict (and the input gradient ``dX`` if requested).
        """
        st = self._last
        if st is None:
            raise RuntimeError("backward called before forward")
        values = self.values()
        d_logits = cross_entropy_logit_grad(st.head.y_hat, st.Y)
        d_rep, grads = head_backward(st.head, d_logits, values, self.config)
        r = self.config.cell.r
        lstm = self.config.cell.has_cell_state
        fw = st.fw
        dAX = np.zeros(st.X.shape[:2] + st.X.shape[2:4] + (fw.kx.shape[-1],), DTYPE)
        acc = {"kh": 0.0, "kh_cand": None}
        for half, caches in ((d_rep[..., :r], st.caches_fwd), (d_rep[..., r:], st.caches_rev)):
            if lstm:
                dh, dc = np.zeros_like(half), half.copy()
            else:
                dh, dc = half.copy(), None
            for t, idx, cache in reversed(caches):
                if idx is None:
                    dax, dh, dc, g = step_backward(cache, dh, dc, fw)
                    dAX[:, t] += dax
                else:
                    dax, dhs, dcs, g = step_backward(cache, dh[idx], None if dc is None else dc[idx], fw)
                    dh[idx] = dhs
                    if dc is not None:
                        dc[idx] = dcs
                    dAX[idx, t] += dax
                acc["kh"] = acc["kh"] + g["kh"]
                if "kh_cand" in g:
                    acc["kh_cand"] = g["kh_cand"] if acc["kh_cand"] is None else acc["kh_cand"] + g["kh_cand"]
        dX = np.zeros(st.X.shape, DTYPE) if return_input_grad else None
        gkx = np.zeros_like(fw.kx)
        gb = np.zeros_like(fw.bias)
        for t in range(st.X.shape[1]):
            if not st.M[:, t].any():
                continue
            dx, k_, b_ = input_backward(st.X[:, t], dAX[:, t], fw, need_dx=return_input_grad)
            gkx += k_
            gb += b_
            if dx is not None:
                dX[:, t] = dx
        kh = acc["kh"] if not np.isscalar(acc["kh"]) else np.zeros_like(fw.kh)
        cell_grads = fw.unfuse(gkx, gb, kh, acc["kh_cand"], self.config.cell)
        grads.update({f"cell.{k}": v for k, v in cell_grads.items()})
        for name, g in grads.items():
            self.params[name].grad += g
        if return_input_grad:
            return grads, (dX[0] if st.squeeze else dX)
        return grads

    def activations_trace(self, sample: SequenceSample, cell_indices) -> list[dict]:
        """Forward-direction gate maps for selected cells at every unmasked step.

        Each entry is ``{"t": frame_index, gate: array[len(cells), h, w], ...}``;
        LSTM gates are ``i, j, f, o, c``, GRU gates ``z, s, cand, h``, RNN ``h``.
        """
        cells = list(cell_indices)
        r = self.config.cell.r
        for c in cells:
            if not 0 <= c < r:
                raise IndexError(f"cell index {c} out of range for r={r}")
        if not sample.mask.any():
            raise ValueError("sequence has no unmasked observation to trace")
        fw = FusedWeights.build(cell_params(self.values()), self.config.cell)
        x = np.asarray(sample.x, DTYPE)
        h = np.zeros((1,) + x.shape[1:3] + (r,), DTYPE)
        c = np.zeros_like(h) if self.config.cell.has_cell_state else None
        out = []
        for t in range(x.shape[0]):
            if not sample.mask[t]:
                continue
            h, c, cache = step_forward(fw.input_part(x[None, t]), h, c, fw)
            entry = {"t": t}
            for name, g in cache.gates.items():
                entry[name] = np.moveaxis(g[0][..., cells], -1, 0)
            if "h" not in entry:
                entry["h"] = np.moveaxis(h[0][..., cells], -1, 0)
            out.append(entry)
        return out


def forward(sample: SequenceSample, params, config: EncoderConfig, bn: RunningStats | None = None,
            mode: str = "train"):
    """Functional ``encode -> classify -> cross_entropy``; returns ``(y_hat, loss)``."""
    rep = encode(sample, params, config)
    if bn is None:
        bn = RunningStats.zeros(config.hidden)
    y_hat, _ = head_forward(rep.c_T, params, bn, config, mode)
    return y_hat, cross_entropy(y_hat, sample.y)
