"""Mini-batch training, evaluation and checkpointing.

Randomness is derived, never shared: the epoch order comes from
``derive_seed(seed, epoch)`` and each sample's temporal subsample from
``derive_seed(seed, epoch, sample_index)``, so a run is a pure function of the
dataset and the seeds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig, SequenceSample, predict_map, stack_samples
from .metrics import ConfusionMatrix, MetricsReport
from .synthdata import Dataset, derive_seed
from .tensor import DTYPE, NumericalError, Parameter, RunningStats

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or truncated checkpoint."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint configuration does not match what the caller expects."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    n_keep: int = 30
    seed: int = 0
    checkpoint_interval: int = 0
    clip: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.n_keep < 1 or self.epochs < 0:
            raise ValueError("batch_size and n_keep must be >= 1, epochs >= 0")


def subsample_sequence(available: int, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Order-preserving random subset of ``min(n_keep, available)`` indices out of ``range(available)``."""
    if available < 1:
        raise ValueError("no observations available")
    if n_keep >= available:
        return np.arange(available)
    return np.sort(rng.choice(available, size=n_keep, replace=False))


# -- optimizers ----------------------------------------------------------------------

def clip_gradients(grads: dict[str, np.ndarray], threshold: float | None) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``threshold``; return the norm."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if threshold is not None and norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
                   config: TrainConfig) -> OptimizerState:
    """Update ``params`` in place (SGD or bias-corrected Adam)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    clip_gradients(grads, config.clip)
    state.t += 1
    if config.optimizer == "sgd":
        for name, g in grads.items():
            params[name] -= config.lr * g
        return state
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


# -- training loop -------------------------------------------------------------------

@dataclass
class HistoryRow:
    step: int
    epoch: int
    loss: float
    wall_seconds: float


@dataclass
class FitResult:
    encoder: Encoder
    state: OptimizerState
    history: list[HistoryRow]
    report: MetricsReport | None = None


def _training_batch(samples: list[SequenceSample], indices, n_keep: int, seed: int, epoch: int):
    picked = []
    for i in indices:
        s = samples[i]
        valid = np.flatnonzero(s.mask)
        rng = np.random.default_rng(derive_seed(seed, epoch, int(i)))
        keep = valid[subsample_sequence(len(valid), n_keep, rng)]
        picked.append(SequenceSample(s.x[keep], np.ones(len(keep), bool), s.y))
    return stack_samples(picked)


def fit(dataset: Dataset | list[SequenceSample], enc_config: EncoderConfig, config: TrainConfig,
        encoder: Encoder | None = None, out_dir=None, evaluate_on: str | None = "val",
        progress=None) -> FitResult:
    """Train on the ``train`` split (or on a plain list of samples).

    ``progress(row)`` is called after every optimizer step. Checkpoints are
    written to ``out_dir`` every ``checkpoint_interval`` steps when both are set.
    """
    if isinstance(dataset, Dataset):
        train = dataset.split("train")
        if dataset.n_classes != enc_config.n_classes:
            raise ConfigMismatchError(
                f"dataset has {dataset.n_classes} classes, encoder expects {enc_config.n_classes}")
    else:
        train = list(dataset)
    if not train:
        raise ValueError("training split is empty")
    if train[0].x.shape[-1] != enc_config.cell.d:
        raise ConfigMismatchError(f"dataset depth {train[0].x.shape[-1]} != encoder d={enc_config.cell.d}")
    if encoder is None:
        encoder = Encoder.create(enc_config, seed=config.seed)
    state = OptimizerState()
    history: list[HistoryRow] = []
    values = encoder.values()
    start = time.perf_counter()
    step = 0
    done = False
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(config.seed, epoch)).permutation(len(train))
        for b in range(0, len(order), config.batch_size):
            X, M, Y = _training_batch(train, order[b:b + config.batch_size], config.n_keep, config.seed, epoch)
            encoder.zero_grad()
            _, loss = encoder.forward(X, M, Y, mode="train")
            grads = encoder.backward()
            optimizer_step(values, grads, state, config)
            step += 1
            row = HistoryRow(step, epoch, float(loss), time.perf_counter() - start)
            history.append(row)
            if progress is not None:
                progress(row)
            if out_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                save_checkpoint(Path(out_dir) / f"checkpoint_{step:06d}.mtck", encoder, state)
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
    report = None
    if evaluate_on and isinstance(dataset, Dataset) and dataset.split(evaluate_on):
        report = evaluate(encoder, dataset.split(evaluate_on))
    return FitResult(encoder, state, history, report)


def predict_batches(encoder: Encoder, samples: list[SequenceSample], batch_size: int = 8):
    """Yield ``(sample, y_hat)`` pairs in inference mode over full sequences."""
    for b in range(0, len(samples), batch_size):
        chunk = samples[b:b + batch_size]
        X, M, _ = stack_samples(chunk)
        y_hat = encoder.predict(X, M, mode="infer")
        yield from zip(chunk, y_hat)


def confusion(encoder: Encoder, samples: list[SequenceSample], batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(encoder.config.n_classes)
    for s, y_hat in predict_batches(encoder, samples, batch_size):
        cm.update(predict_map(y_hat), s.y)
    return cm


def evaluate(model, samples: list[SequenceSample], batch_size: int = 8, class_names=None) -> MetricsReport:
    """Inference-mode metrics over ``samples`` (an :class:`Encoder` or a loaded :class:`Checkpoint`)."""
    encoder = model.encoder if isinstance(model, Checkpoint) else model
    if not samples:
        raise ValueError("nothing to evaluate")
    labels = max(int(s.y.max()) for s in samples)
    if labels >= encoder.config.n_classes:
        raise ConfigMismatchError(f"label {labels} exceeds the model's {encoder.config.n_classes} classes")
    return MetricsReport.from_confusion(confusion(encoder, samples, batch_size), class_names)


# -- history CSV ---------------------------------------------------------------------

def history_csv(history: list[HistoryRow]) -> str:
    """``step,epoch,loss`` with full-precision losses (reproducible bytes)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss"])
    for r in history:
        w.writerow([r.step, r.epoch, repr(r.loss)])
    return buf.getvalue()


def timing_csv(history: list[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "wall_seconds"])
    for r in history:
        w.writerow([r.step, f"{r.wall_seconds:.3f}"])
    return buf.getvalue()


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    encoder: Encoder
    state: OptimizerState
    step: int
    metrics: dict
    extra: dict


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.asarray(arr)
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, encoder: Encoder, state: OptimizerState | None = None, metrics: dict | None = None,
                    extra: dict | None = None):
    """Write the ``MTCK`` checkpoint: JSON config block then named float32 tensors."""
    state = state or OptimizerState()
    tensors = [(f"param/{k}", p.value) for k, p in sorted(encoder.params.items())]
    tensors += [("bn/mean", encoder.bn.mean), ("bn/var", encoder.bn.var)]
    tensors += [(f"adam.m/{k}", v) for k, v in sorted(state.m.items())]
    tensors += [(f"adam.v/{k}", v) for k, v in sorted(state.v.items())]
    header = {
        "format": "MTCK", "version": CKPT_VERSION,
        "encoder": encoder.config.to_dict(),
        "step": state.t, "n_tensors": len(tensors),
        "bn_momentum": encoder.bn.momentum,
        "metrics": metrics or {}, "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
    for name, arr in tensors:
        out.write(_tensor_record(name, arr))
    Path(path).write_bytes(out.getvalue())


def _take(raw: bytes, off: int, n: int) -> int:
    if off + n > len(raw):
        raise CheckpointError("truncated checkpoint")
    return off + n


def load_checkpoint(path, expect: EncoderConfig | None = None, n_classes: int | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect``/``n_classes`` make a mismatch a :class:`ConfigMismatchError`."""
    raw = Path(path).read_bytes()
    off = _take(raw, 0, 12)
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    version, jlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = off
    off = _take(raw, off, jlen)
    try:
        header = json.loads(raw[start:off].decode("utf-8"))
        config = EncoderConfig.from_dict(header["encoder"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if expect is not None and config != expect:
        raise ConfigMismatchError(f"checkpoint config {config} != expected {expect}")
    if n_classes is not None and config.n_classes != n_classes:
        raise ConfigMismatchError(f"checkpoint has {config.n_classes} classes, expected {n_classes}")
    tensors = {}
    for _ in range(header["n_tensors"]):
        s = off
        off = _take(raw, off, 2)
        (nlen,) = struct.unpack_from("<H", raw, s)
        s = off
        off = _take(raw, off, nlen + 1)
        name = raw[s:s + nlen].decode("utf-8")
        rank = raw[s + nlen]
        s = off
        off = _take(raw, off, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", raw, s)
        count = int(np.prod(shape)) if rank else 1
        s = off
        off = _take(raw, off, 4 * count)
        tensors[name] = np.frombuffer(raw, "<f4", count, s).reshape(shape).astype(DTYPE)
    if off != len(raw):
        raise CheckpointError("trailing bytes after last tensor")

    encoder = Encoder(config)
    expected = Encoder.create(config).params
    for name, p in expected.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        if tensors[key].shape != p.value.shape:
            raise ConfigMismatchError(f"{key} has shape {tensors[key].shape}, expected {p.value.shape}")
        encoder.params[name] = Parameter(name, tensors[key])
    encoder.bn = RunningStats(tensors["bn/mean"], tensors["bn/var"], header.get("bn_momentum", 0.9))
    state = OptimizerState(t=header["step"])
    for key, arr in tensors.items():
        if key.startswith("adam.m/"):
            state.m[key[7:]] = arr
        elif key.startswith("adam.v/"):
            state.v[key[7:]] = arr
    return Checkpoint(encoder, state, header["step"], header.get("metrics", {}), header.get("extra", {}))


def round_to_storage(encoder: Encoder):
    """Round parameters and batch-norm statistics to float32 in place (what a checkpoint keeps)."""
    for p in encoder.params.values():
        p.value[...] = p.value.astype(np.float32)
    encoder.bn.mean = encoder.bn.mean.astype(np.float32).astype(DTYPE)
    encoder.bn.var = encoder.bn.var.astype(np.float32).astype(DTYPE)


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
