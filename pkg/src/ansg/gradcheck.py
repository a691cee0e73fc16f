"""Finite-difference suite over every differentiable building block, in float64."""
from __future__ import annotations

import time

import numpy as np

from . import autograd as ag
from . import fcn as F
from . import recurrent as R
from . import training as TR


def _projection(rng, shape):
    return rng.normal(size=shape)


def _scalar(out, proj):
    return ag.sum(ag.mul(out, proj))


def case_conv2d(rng, padding="valid"):
    x = rng.normal(size=(3, 7, 6))
    params = {"w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4), "x": x}
    proj = _projection(rng, (4, 7, 6) if padding == "same" else (4, 5, 4))
    return lambda p: _scalar(ag.conv2d(p["x"], p["w"], p["b"], padding), proj), params


def case_max_pool2(rng):
    # well-separated values keep the argmax fixed under the probe step
    x = rng.permutation(6 * 8 * 8).reshape(6, 8, 8) * 1e-2
    proj = _projection(rng, (6, 4, 4))
    return lambda p: _scalar(ag.max_pool2(p["x"]), proj), {"x": x.astype(np.float64)}


def case_deconv2(rng):
    params = {"x": rng.normal(size=(3, 4, 5)), "w": rng.normal(size=(2, 3, 2, 2)), "b": rng.normal(size=2)}
    proj = _projection(rng, (2, 8, 10))
    return lambda p: _scalar(ag.deconv2(p["x"], p["w"], p["b"]), proj), params


def case_softmax_wce(rng):
    logits = rng.normal(size=(2, 6, 5))
    label = rng.integers(0, 2, size=(6, 5))
    weights = rng.uniform(0.5, 3.0, size=(6, 5))
    f = lambda p: TR.weighted_cross_entropy(ag.softmax_channels(p["logits"]), label, weights)
    return f, {"logits": logits}


def _cell_params(shapes, rng, scale=0.5, prefix=None):
    pre = f"{prefix}." if prefix else ""
    return {pre + k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()}


def case_lstm_step(rng, n_in=3, hidden=4):
    params = _cell_params(R.param_shapes_lstm(n_in, hidden), rng, prefix="cell")
    params["x"] = rng.normal(size=n_in)
    params["h0"] = rng.normal(size=hidden)
    params["c0"] = rng.normal(size=hidden)
    pc, ph = _projection(rng, hidden), _projection(rng, hidden)

    def f(p):
        cell = R.params_from_flat(R.LSTMParams, p, "cell")
        st = R.lstm_step(p["x"], R.CellState(p["c0"], p["h0"]), cell)
        return ag.add(_scalar(st.c, pc), _scalar(st.h, ph))

    return f, params


def case_clstm_step(rng, n_in=2, hidden=3, kernel=3, padding="same"):
    params = _cell_params(R.param_shapes_clstm(n_in, hidden, kernel), rng, prefix="cell")
    h = w = 6
    params["x"] = rng.normal(size=(n_in, h, w))
    ho, wo = R.clstm_out_extent(h, w, kernel, padding)
    params["h0"] = rng.normal(size=(hidden, ho, wo))
    params["c0"] = rng.normal(size=(hidden, ho, wo))
    pc, ph = _projection(rng, (hidden, ho, wo)), _projection(rng, (hidden, ho, wo))

    def f(p):
        cell = R.params_from_flat(R.ConvLSTMParams, p, "cell")
        st = R.clstm_step(p["x"], R.CellState(p["c0"], p["h0"]), cell, padding)
        return ag.add(_scalar(st.c, pc), _scalar(st.h, ph))

    return f, params


def case_bdclstm(rng, n_in=2, hidden=3, kernel=3, n=3):
    params = {}
    params.update(_cell_params(R.param_shapes_clstm(n_in, hidden, kernel), rng, prefix="fwd"))
    params.update(_cell_params(R.param_shapes_clstm(n_in, hidden, kernel), rng, prefix="bwd"))
    seq = [rng.normal(size=(n_in, 5, 5)) for _ in range(n)]
    for z, s in enumerate(seq):
        params[f"x{z}"] = s
    projs = [_projection(rng, (2 * hidden, 5, 5)) for _ in range(n)]

    def f(p):
        fwd = R.params_from_flat(R.ConvLSTMParams, p, "fwd")
        bwd = R.params_from_flat(R.ConvLSTMParams, p, "bwd")
        out = R.bdclstm_forward([p[f"x{z}"] for z in range(n)], fwd, bwd)
        total = _scalar(out[0], projs[0])
        for o, pr in zip(out[1:], projs[1:]):
            total = ag.add(total, _scalar(o, pr))
        return total

    return f, params


def case_deep_stack(rng, hidden=8, extent=20, n=3):
    cfg = R.reduced_stack(in_channels=4, hidden=hidden, nominal_input=extent)
    params = _cell_params(R.stack_param_shapes(cfg), rng, scale=0.3)
    seq = [rng.normal(size=(4, extent, extent)) for _ in range(n)]
    out_e = R.output_extent(cfg, extent)
    label = rng.integers(0, 2, size=(out_e, out_e))
    weights = rng.uniform(0.5, 2.0, size=(out_e, out_e))

    def f(p):
        out = R.deep_bdclstm_forward(seq, cfg, p, mode="eval")
        return TR.weighted_cross_entropy(ag.softmax_channels(out[n // 2]), label, weights)

    return f, params


def case_kunet(rng, extent=16, fusion="A"):
    cfg = F.KUNetConfig(k=2, fusion=fusion, unet=F.UNetConfig(depth=2, base_channels=4, out_channels=4))
    params = TR.init_params(F.fcn_param_spec(cfg), int(rng.integers(2**31)), np.float64)
    # small random biases move pre-activations off the ReLU kink at zero
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(-0.1, 0.1, size=params[k].shape)
    image = rng.uniform(size=(1, extent, extent))
    label = rng.integers(0, 2, size=(extent, extent))
    weights = rng.uniform(0.5, 2.0, size=(extent, extent))

    def f(p):
        return TR.weighted_cross_entropy(ag.softmax_channels(F.fcn_logits(image, p, cfg)), label, weights)

    return f, params


CASES = {
    "conv2d_valid": lambda rng: case_conv2d(rng, "valid"),
    "conv2d_same": lambda rng: case_conv2d(rng, "same"),
    "max_pool2": case_max_pool2,
    "deconv2": case_deconv2,
    "softmax_weighted_ce": case_softmax_wce,
    "lstm_step": case_lstm_step,
    "clstm_step": case_clstm_step,
    "clstm_step_valid": lambda rng: case_clstm_step(rng, padding="valid"),
    "bdclstm_forward": case_bdclstm,
    "deep_bdclstm_reduced": case_deep_stack,
    "kunet_d2_k2": case_kunet,
}


# ReLU/max-pool networks are piecewise linear; a shorter probe stays on one linear piece
STEPS = {"kunet_d2_k2": 1e-5}


def run_suite(seed=0, tol=1e-4, names=None, log=print):
    """Run every case; returns ``{name: GradCheckReport}``."""
    reports = {}
    for name in names or CASES:
        rng = np.random.default_rng([seed, sum(name.encode())])
        f, params = CASES[name](rng)
        t0 = time.perf_counter()
        rep = ag.finite_diff_check(f, params, step=STEPS.get(name, 1e-4), tol=tol, seed=seed)
        reports[name] = rep
        if log:
            log(f"{name:<22s} {rep.format()}  ({time.perf_counter() - t0:.1f}s)")
    return reports
