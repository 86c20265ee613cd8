"""Command-line interface: ``mtse {generate,train,eval,infer,activations,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Any flag may also come from ``--config file.json``; explicit flags win.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import pnm
from .cells import CellConfig, param_count
from .encoder import (
    IGNORE,
    Encoder,
    EncoderConfig,
    SequenceSample,
    pixel_losses,
    predict_map,
)
from .gradcheck import OPS, THRESHOLD, TOY, run_gradcheck
from .metrics import ConfusionMatrix, MetricsReport
from .synthdata import (
    SPLITS,
    CloudEvent,
    DatasetFormatError,
    SceneSpec,
    apply_clouds,
    generate_dataset,
    read_dataset,
    spec_metadata,
    write_dataset,
)
from .tensor import NumericalError
from .training import (
    CheckpointError,
    ConfigMismatchError,
    TrainConfig,
    fit,
    history_csv,
    load_checkpoint,
    predict_batches,
    save_checkpoint,
    timing_csv,
)

log = logging.getLogger("mtse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- shared plumbing ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def output_lock(directory: Path, name: str = ".mtse.lock"):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / name
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output {directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(path: Path, command: str, args: argparse.Namespace, inputs, outputs, started: float,
                   **extra):
    """One manifest per run; the only file carrying timestamps."""
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": resolved,
        "config_file": getattr(args, "config", None),
        "seeds": {k: v for k, v in resolved.items() if "seed" in k},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p.name if p.parent == path.parent else p): sha256_file(p) for p in outputs},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_seconds": round(time.time() - started, 3),
    }
    manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _limit_threads():
    n = os.environ.get("MTSE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _load_data(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None


def _load_ckpt(path, n_classes=None):
    try:
        return load_checkpoint(path, n_classes=n_classes)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None


def _sample(dataset, index: int) -> SequenceSample:
    if not 0 <= index < len(dataset.samples):
        raise DataError(f"sample index {index} out of range 0..{len(dataset.samples) - 1}")
    return dataset.samples[index]


def _perfect(sample: SequenceSample, n_classes: int) -> np.ndarray:
    """Debug predictor: one-hot probabilities from the labels (IGNORE pixels get class 0)."""
    y_hat = np.zeros(sample.y.shape + (n_classes,))
    np.put_along_axis(y_hat, np.where(sample.y == IGNORE, 0, sample.y)[..., None], 1.0, axis=-1)
    return y_hat


# -- commands --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.time()
    out = Path(args.out)
    try:
        ratio = tuple(int(v) for v in args.ratio.split(":"))
        if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) == 0:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--ratio must look like 4:1:1, got {args.ratio!r}") from None
    try:
        spec = SceneSpec(tile=args.tile, n_bands=args.bands, n_classes=args.classes, T=args.T,
                         seasons=args.seasons, cloud_prob=args.cloud_prob, noise_sigma=args.noise_sigma,
                         seed=args.seed, min_field=args.min_field, profile_seed=args.profile_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.samples < 1:
        raise ConfigError("--samples must be positive")
    out.parent.mkdir(parents=True, exist_ok=True)
    with output_lock(out.parent, f".{out.name}.lock"):
        samples, splits = generate_dataset(spec, args.samples, ratio)
        write_dataset(samples, out, splits, n_classes=spec.n_classes,
                      metadata=spec_metadata(spec, ratio=list(ratio), n_samples=args.samples))
        counts = {name: int((splits == i).sum()) for i, name in enumerate(SPLITS)}
        write_manifest(out.with_name(out.name + ".manifest.json"), "generate", args, [], [out], started,
                       splits=counts, spec=asdict(spec))
    print(f"wrote {args.samples} samples to {out} (splits {counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    out = Path(args.out)
    data = _load_data(args.data)
    T, h, w, d = data.dims
    try:
        cell = CellConfig(kind=args.cell, arrangement="conv", r=args.r, d=d, k_rnn=args.k_rnn,
                          forget_bias=args.forget_bias)
        enc_cfg = EncoderConfig(cell, data.n_classes, args.k_class, args.activation)
        tc = TrainConfig(optimizer=args.optimizer, lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                         n_keep=args.n_keep, seed=args.seed, checkpoint_interval=args.checkpoint_interval,
                         clip=args.clip, max_steps=args.max_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def progress(row):
        if row.step % max(1, args.log_every) == 0:
            log.info("step %d epoch %d loss %.5f", row.step, row.epoch, row.loss)

    with output_lock(out):
        res = fit(data, enc_cfg, tc, out_dir=out, progress=progress)
        metrics = res.report.to_dict() if res.report else {}
        ckpt = out / "checkpoint.mtck"
        save_checkpoint(ckpt, res.encoder, res.state, metrics=metrics,
                        extra={"train": asdict(tc), "data_dims": [T, h, w, d]})
        (out / "history.csv").write_text(history_csv(res.history))
        (out / "timing.csv").write_text(timing_csv(res.history))
        counts = {
            "cell": param_count(cell),
            "cell_gru": param_count(replace(cell, kind="gru")),
            "cell_lstm": param_count(replace(cell, kind="lstm")),
            "total": res.encoder.n_params(),
        }
        outputs = sorted(p for p in out.glob("*") if p.suffix in (".mtck", ".csv"))
        write_manifest(out / "manifest.json", "train", args, [Path(args.data)], outputs, started,
                       param_counts=counts, steps=len(res.history),
                       final_loss=res.history[-1].loss if res.history else None, validation=metrics)
    if res.report:
        print(f"validation OA {res.report.overall_accuracy:.4f} kappa {res.report.kappa:.4f}")
    print(f"trained {len(res.history)} steps; checkpoint {ckpt}")
    return EXIT_OK


def _confusion_image(report: MetricsReport, cell: int) -> np.ndarray:
    return pnm.upscale(pnm.quantize(report.normalized), cell)


def cmd_eval(args) -> int:
    started = time.time()
    out = Path(args.out)
    data = _load_data(args.data)
    ckpt = _load_ckpt(args.checkpoint, n_classes=data.n_classes)
    samples = data.split(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    n = ckpt.encoder.config.n_classes
    cm = ConfusionMatrix(n)
    if args.debug_perfect:
        for s in samples:
            cm.update(predict_map(_perfect(s, n)), s.y)
    else:
        for s, y_hat in predict_batches(ckpt.encoder, samples, args.batch):
            cm.update(predict_map(y_hat), s.y)
    report = MetricsReport.from_confusion(cm)
    with output_lock(out):
        (out / "metrics.csv").write_text(report.table_csv())
        (out / "confusion.csv").write_text(report.confusion_csv())
        pnm.write_ppm(out / "confusion.ppm", np.repeat(_confusion_image(report, args.cell_px)[..., None], 3, axis=2),
                      comments=["rows=reference columns=prediction, row-normalized recall",
                                f"cell_px={args.cell_px} quantized floor(256*u)"])
        outputs = [out / "metrics.csv", out / "confusion.csv", out / "confusion.ppm"]
        write_manifest(out / "manifest.json", "eval", args, [Path(args.data), Path(args.checkpoint)], outputs,
                       started, metrics=report.to_dict(), colormap="grayscale linear")
    print(f"{args.split}: OA {report.overall_accuracy:.4f} kappa {report.kappa:.4f} over {cm.total} pixels")
    return EXIT_OK


def cmd_infer(args) -> int:
    started = time.time()
    out = Path(args.out)
    data = _load_data(args.data)
    ckpt = _load_ckpt(args.checkpoint, n_classes=data.n_classes)
    sample = _sample(data, args.sample)
    n = ckpt.encoder.config.n_classes
    if args.debug_perfect:
        y_hat = _perfect(sample, n)
    else:
        y_hat = ckpt.encoder.predict(sample.x, sample.mask, mode="infer")
    pred = predict_map(y_hat)
    losses = pixel_losses(y_hat, sample.y)
    loss_max = 2 * float(np.log(n))
    with output_lock(out):
        outputs = []

        def emit(name, writer, img, comments):
            writer(out / name, img, comments)
            outputs.append(out / name)

        emit("prediction.ppm", pnm.write_ppm, pnm.label_image(pred), ["predicted class, fixed palette"])
        emit("labels.ppm", pnm.write_ppm, pnm.label_image(sample.y), ["reference labels, black=IGNORE"])
        for c in range(n):
            emit(f"activation_class_{c:02d}.pgm", pnm.write_pgm, pnm.quantize(y_hat[..., c]),
                 [f"softmax activation class {c}, range [0,1]"])
        emit("loss.pgm", pnm.write_pgm, pnm.quantize(losses, 0.0, loss_max),
             [f"per-pixel cross-entropy, range [0,{loss_max:.6f}] clipped"])
        valid = np.flatnonzero(sample.mask)
        frame = int(valid[len(valid) // 2])
        emit("rgb.ppm", pnm.write_ppm, pnm.normalized_rgb(sample.x[frame][..., list(pnm_rgb(sample))]),
             [f"frame {frame}, bands B4/B3/B2, mean+-2sd stretch"])
        write_manifest(out / "manifest.json", "infer", args, [Path(args.data), Path(args.checkpoint)], outputs,
                       started, sample=args.sample, mean_loss=float(losses[sample.y != IGNORE].mean())
                       if np.any(sample.y != IGNORE) else None, colormap="grayscale linear")
    print(f"wrote {len(outputs)} images to {out}")
    return EXIT_OK


def pnm_rgb(sample: SequenceSample):
    from .synthdata import RGB_BANDS

    d = sample.x.shape[-1] - 2
    return RGB_BANDS if d > max(RGB_BANDS) else (0, 0, 0)


SIGMOID_GATES = {"i", "f", "o", "z", "s"}


def _parse_cells(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--cells must be comma-separated integers, got {text!r}") from None


def cloud_sensitivity(trace: list[dict], gate: str, step_pos: int, cells: list[int]) -> dict:
    """Per cell: |mean gate activation at the cloudy step - median over the other steps|."""
    means = np.array([[e[gate][k].mean() for k in range(len(cells))] for e in trace])
    others = np.delete(means, step_pos, axis=0)
    diff = np.abs(means[step_pos] - np.median(others, axis=0)) if len(others) else np.zeros(len(cells))
    return {
        "gate": gate,
        "per_cell": {str(c): float(v) for c, v in zip(cells, diff)},
        "max": float(diff.max()),
        "identifiable": bool(diff.max() > 0.1),
    }


def cmd_activations(args) -> int:
    started = time.time()
    out = Path(args.out)
    data = _load_data(args.data)
    ckpt = _load_ckpt(args.checkpoint, n_classes=data.n_classes)
    enc = ckpt.encoder
    sample = _sample(data, args.sample)
    cells = _parse_cells(args.cells)
    r = enc.config.cell.r
    bad = [c for c in cells if not 0 <= c < r]
    if bad:
        raise ConfigError(f"cell indices {bad} out of range for r={r}")
    x = np.array(sample.x, dtype=np.float64)
    cloud_frame = None
    if args.inject_cloud is not None:
        valid = np.flatnonzero(sample.mask)
        if not 0 <= args.inject_cloud < len(valid):
            raise ConfigError(f"--inject-cloud step must be in 0..{len(valid) - 1}")
        cloud_frame = int(valid[args.inject_cloud])
        nb = x.shape[-1] - 2
        size = x.shape[1]
        rng = np.random.default_rng([args.seed, cloud_frame])
        x[cloud_frame, ..., :nb], _ = apply_clouds(x[cloud_frame, ..., :nb], [CloudEvent(0, size, 0, size)], rng)
    sample = SequenceSample(x, sample.mask, sample.y)
    trace = enc.activations_trace(sample, cells)
    gates = [g for g in ("i", "j", "f", "c", "z", "s", "cand", "h") if g in trace[0]]
    if enc.config.cell.kind == "lstm":
        gates = ["i", "j", "f", "c"]

    def q(gate, arr):
        return pnm.quantize(arr) if gate in SIGMOID_GATES else pnm.quantize(arr, -1.0, 1.0)

    with output_lock(out):
        outputs = []
        h, w = sample.y.shape
        rows = len(cells) * len(gates) + 1
        grid = np.full((rows * (h + 1) - 1, len(trace) * (w + 1) - 1), 255, np.uint8)
        lines = ["step,frame,cell,gate,mean"]
        for s, e in enumerate(trace):
            rgb = pnm.normalized_rgb(sample.x[e["t"]][..., list(pnm_rgb(sample))])
            pnm.write_ppm(out / f"rgb_s{s:03d}.ppm", rgb, [f"frame {e['t']}, mean+-2sd stretch"])
            outputs.append(out / f"rgb_s{s:03d}.ppm")
            grid[0:h, s * (w + 1):s * (w + 1) + w] = rgb.mean(axis=2).astype(np.uint8)
            for ci, c in enumerate(cells):
                for gi, g in enumerate(gates):
                    img = q(g, e[g][ci])
                    name = f"cell{c:03d}_{g}_s{s:03d}.pgm"
                    rng_txt = "[0,1]" if g in SIGMOID_GATES else "[-1,1] clipped"
                    pnm.write_pgm(out / name, img, [f"gate {g} cell {c} step {s} frame {e['t']} range {rng_txt}"])
                    outputs.append(out / name)
                    row = 1 + ci * len(gates) + gi
                    grid[row * (h + 1):row * (h + 1) + h, s * (w + 1):s * (w + 1) + w] = img
                    lines.append(f"{s},{e['t']},{c},{g},{float(e[g][ci].mean())!r}")
        pnm.write_pgm(out / "grid.pgm", grid,
                      [f"rows: rgb, then cells {cells} x gates {gates}; columns: steps"])
        (out / "activations.csv").write_text("\n".join(lines) + "\n")
        outputs += [out / "grid.pgm", out / "activations.csv"]
        extra = {"steps": len(trace), "gates": gates, "cells": cells}
        if cloud_frame is not None:
            gate = "i" if "i" in trace[0] else ("z" if "z" in trace[0] else "h")
            extra["cloud_sensitivity"] = cloud_sensitivity(trace, gate, args.inject_cloud, cells)
            extra["cloud_sensitivity"]["frame"] = cloud_frame
        write_manifest(out / "manifest.json", "activations", args, [Path(args.data), Path(args.checkpoint)],
                       outputs, started, colormap="grayscale linear", **extra)
    msg = f"traced {len(trace)} steps for cells {cells}"
    if cloud_frame is not None:
        cs = extra["cloud_sensitivity"]
        msg += f"; cloud sensitivity max {cs['max']:.3f} (identifiable={cs['identifiable']})"
    print(msg)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    toy = {k: v for k, v in (args.toy or {}).items() if k in TOY}
    entries = run_gradcheck(seed=args.seed, toy=toy, probes=args.probes, inject_fault=args.inject_fault)
    width = max(len(e.op) for e in entries)
    for e in entries:
        print(f"{e.op:<{width}}  max_rel_err={e.error:.3e}  {'PASS' if e.passed else 'FAIL'}")
    failed = [e.op for e in entries if not e.passed]
    if failed:
        print(f"FAILED (threshold {THRESHOLD:g}): {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(entries)} checks below {THRESHOLD:g}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file supplying any flag")
        sp.set_defaults(func=func)
        return sp

    g = command("generate", cmd_generate, "generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=60)
    g.add_argument("--tile", type=int, default=24)
    g.add_argument("--bands", type=int, default=13)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--T", type=int, default=30)
    g.add_argument("--seasons", type=int, default=1)
    g.add_argument("--cloud-prob", type=float, default=0.2)
    g.add_argument("--noise-sigma", type=float, default=0.02)
    g.add_argument("--min-field", type=int, default=4)
    g.add_argument("--profile-seed", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratio", default="4:1:1")

    t = command("train", cmd_train, "train an encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--cell", choices=("rnn", "lstm", "gru"), default="gru")
    t.add_argument("--r", type=int, default=32)
    t.add_argument("--k-rnn", type=int, default=3)
    t.add_argument("--k-class", type=int, default=3)
    t.add_argument("--activation", choices=("relu", "leaky_relu"), default="leaky_relu")
    t.add_argument("--forget-bias", type=float, default=1.0)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--n-keep", type=int, default=30)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--clip", type=float, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)

    e = command("eval", cmd_eval, "evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--batch", type=int, default=8)
    e.add_argument("--cell-px", type=int, default=8)
    e.add_argument("--debug-perfect", action="store_true", help="use the labels as predictions")

    i = command("infer", cmd_infer, "write prediction, activation and loss maps for one sample")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sample", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--debug-perfect", action="store_true", help="use the labels as predictions")

    a = command("activations", cmd_activations, "export per-step gate maps for selected cells")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--cells", default="0,1,2")
    a.add_argument("--inject-cloud", type=int, default=None, metavar="STEP",
                   help="replace the STEP-th unmasked observation by a whole-frame cloud")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    c = command("gradcheck", cmd_gradcheck, "finite-difference check of all gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--probes", type=int, default=12)
    c.add_argument("--inject-fault", choices=OPS, default=None, help="corrupt one op's gradient (negative control)")
    c.set_defaults(toy=None)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = subparsers[command]
    known_dests = {a.dest for a in sub._actions}
    toy = {k: v for k, v in cfg.items() if k in TOY and k not in known_dests}
    unknown = set(cfg) - known_dests - set(toy)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    # flags supplied by the file are no longer required on the command line
    for action in sub._actions:
        if action.dest in cfg:
            action.required = False
    sub.set_defaults(**{k: v for k, v in cfg.items() if k in known_dests})
    if toy:
        sub.set_defaults(toy=toy)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
