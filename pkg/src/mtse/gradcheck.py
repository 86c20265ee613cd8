"""Finite-difference verification of every parameterized operation and the full encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import CellConfig, FusedWeights, init_params, input_backward, step_backward, step_forward
from .encoder import (
    Encoder,
    EncoderConfig,
    cross_entropy,
    cross_entropy_logit_grad,
    head_backward,
    head_forward,
    init_head,
)

THRESHOLD = 1e-4

TOY = {"h": 8, "w": 8, "T": 4, "d": 3, "r": 4, "n_classes": 2, "k_rnn": 3, "k_class": 3}


@dataclass
class CheckEntry:
    op: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < THRESHOLD


def _faulty(grads: dict, fault: bool) -> dict:
    if not fault:
        return grads
    return {k: v * 1.1 + 1e-3 for k, v in grads.items()}


def _check_conv(rng, fault, probes, seed):
    R = rng.normal(size=(5, 5, 3))
    params = {"input": rng.normal(size=(5, 5, 2)), "kernel": rng.normal(size=(3, 3, 2, 3)),
              "bias": rng.normal(size=3)}

    def fn(p):
        out = T.conv2d(p["input"], p["kernel"], p["bias"])
        gi, gk, gb = T.conv2d_backward(p["input"], p["kernel"], R)
        return float((out * R).sum()), _faulty({"input": gi, "kernel": gk, "bias": gb}, fault)

    return T.grad_check(fn, params, probes, seed=seed)


def _check_bn(rng, fault, probes, seed):
    R = rng.normal(size=(2, 4, 4, 3))
    params = {"x": rng.normal(size=(2, 4, 4, 3)), "gamma": rng.normal(size=3), "beta": rng.normal(size=3)}

    def fn(p):
        out, cache = T.batch_norm(p["x"], p["gamma"], p["beta"], T.RunningStats.zeros(3), "train")
        gx, gg, gb = T.batch_norm_backward(cache, R)
        return float((out * R).sum()), _faulty({"x": gx, "gamma": gg, "beta": gb}, fault)

    return T.grad_check(fn, params, probes, seed=seed)


def _check_softmax_ce(rng, fault, probes, seed):
    y = rng.integers(0, 4, size=(4, 4))
    y[0, 0] = -1
    params = {"logits": rng.normal(size=(4, 4, 4))}

    def fn(p):
        y_hat = T.softmax_channels(p["logits"])
        return cross_entropy(y_hat, y), _faulty({"logits": cross_entropy_logit_grad(y_hat, y)}, fault)

    return T.grad_check(fn, params, probes, seed=seed)


def _check_step(kind, rng, fault, probes, seed, toy):
    cfg = CellConfig(kind=kind, r=toy["r"], d=toy["d"], k_rnn=toy["k_rnn"])
    shape = (1, toy["h"], toy["w"])
    params = {k: v + 0.0 for k, v in init_params(cfg, seed).items()}
    params["x"] = rng.normal(size=shape + (cfg.d,))
    params["h"] = rng.normal(size=shape + (cfg.r,)) * 0.5
    if kind == "lstm":
        params["c"] = rng.normal(size=shape + (cfg.r,)) * 0.5
    Rh = rng.normal(size=shape + (cfg.r,))
    Rc = rng.normal(size=shape + (cfg.r,))

    def fn(p):
        fw = FusedWeights.build(p, cfg)
        h, c, cache = step_forward(fw.input_part(p["x"]), p["h"], p.get("c"), fw)
        loss = float((h * Rh).sum() + (0.0 if c is None else (c * Rc).sum()))
        dax, dh, dc, g = step_backward(cache, Rh, Rc if c is not None else None, fw)
        dx, gkx, gb = input_backward(p["x"], dax, fw, need_dx=True)
        grads = fw.unfuse(gkx, gb, g["kh"], g.get("kh_cand"), cfg)
        grads["x"], grads["h"] = dx, dh
        if c is not None:
            grads["c"] = dc
        return loss, _faulty(grads, fault)

    return T.grad_check(fn, params, probes, seed=seed)


def _check_head(rng, fault, probes, seed, toy):
    cfg = EncoderConfig(CellConfig(kind="gru", r=toy["r"], d=toy["d"]), toy["n_classes"], toy["k_class"])
    params = init_head(cfg, seed)
    params["rep"] = rng.normal(size=(2, toy["h"], toy["w"], cfg.rep_depth))
    y = rng.integers(0, cfg.n_classes, size=(2, toy["h"], toy["w"]))

    def fn(p):
        y_hat, cache = head_forward(p["rep"], p, T.RunningStats.zeros(cfg.hidden), cfg, "train")
        d_rep, grads = head_backward(cache, cross_entropy_logit_grad(y_hat, y), p, cfg)
        grads["rep"] = d_rep
        return cross_entropy(y_hat, y), _faulty(grads, fault)

    return T.grad_check(fn, params, probes, seed=seed)


def _check_encoder(kind, rng, fault, probes, seed, toy):
    cfg = EncoderConfig(CellConfig(kind=kind, r=toy["r"], d=toy["d"], k_rnn=toy["k_rnn"]),
                        toy["n_classes"], toy["k_class"])
    enc = Encoder.create(cfg, seed=seed)
    B = 2
    X = rng.normal(size=(B, toy["T"], toy["h"], toy["w"], toy["d"]))
    M = np.ones((B, toy["T"]), bool)
    M[1, toy["T"] // 2] = False
    Y = rng.integers(0, cfg.n_classes, size=(B, toy["h"], toy["w"]))

    def fn(p):
        enc.zero_grad()
        enc.bn = T.RunningStats.zeros(cfg.hidden)
        _, loss = enc.forward(X, M, Y, mode="train")
        return loss, _faulty(enc.backward(), fault)

    return T.grad_check(fn, enc.values(), probes, seed=seed)


OPS = ("conv2d", "batch_norm", "softmax_cross_entropy", "rnn_step", "gru_step", "lstm_step",
       "classification_head", "encoder_gru", "encoder_lstm")


def run_gradcheck(seed: int = 0, toy: dict | None = None, probes: int = 12, inject_fault: str | None = None,
                  ops=OPS) -> list[CheckEntry]:
    """Run every check once, in a fixed order; ``inject_fault`` corrupts one op's analytic gradient."""
    toy = {**TOY, **(toy or {})}
    if inject_fault is not None and inject_fault not in OPS:
        raise ValueError(f"unknown op {inject_fault!r}; choose from {', '.join(OPS)}")
    runners = {
        "conv2d": lambda rng, f: _check_conv(rng, f, probes, seed),
        "batch_norm": lambda rng, f: _check_bn(rng, f, probes, seed),
        "softmax_cross_entropy": lambda rng, f: _check_softmax_ce(rng, f, probes, seed),
        "rnn_step": lambda rng, f: _check_step("rnn", rng, f, probes, seed, toy),
        "gru_step": lambda rng, f: _check_step("gru", rng, f, probes, seed, toy),
        "lstm_step": lambda rng, f: _check_step("lstm", rng, f, probes, seed, toy),
        "classification_head": lambda rng, f: _check_head(rng, f, probes, seed, toy),
        "encoder_gru": lambda rng, f: _check_encoder("gru", rng, f, probes, seed, toy),
        "encoder_lstm": lambda rng, f: _check_encoder("lstm", rng, f, probes, seed, toy),
    }
    out = []
    for n, op in enumerate(ops):
        rng = np.random.default_rng([seed, n])
        out.append(CheckEntry(op, float(runners[op](rng, op == inject_fault))))
    return out
