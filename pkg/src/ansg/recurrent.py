"""LSTM, convolutional LSTM, bi-directional ConvLSTM and the deep BDC-LSTM stack.

Gate equations (``*`` is a matrix product for :func:`lstm_step` and a 2D
cross-correlation for :func:`clstm_step`)::

    i = sigmoid(x * W_xi + h_prev * W_hi + b_i)
    f = sigmoid(x * W_xf + h_prev * W_hf + b_f)
    c = c_prev . f + i . tanh(x * W_xc + h_prev * W_hc + b_c)
    o = sigmoid(x * W_xo + h_prev * W_ho + b_o)
    h = o . tanh(c)

Both cells stack their four gate weights and evaluate them with one
contraction, in the same order, so a ConvLSTM on ``1 x 1`` maps with
``1 x 1`` kernels reproduces the vector LSTM bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DimensionError, UsageError

GATES = ("i", "f", "c", "o")
WEIGHT_NAMES = ("W_xi", "W_hi", "W_xf", "W_hf", "W_xc", "W_hc", "W_xo", "W_ho")
BIAS_NAMES = ("b_i", "b_f", "b_c", "b_o")


@dataclass
class LSTMParams:
    """Vector LSTM weights. ``W_x*`` is ``in x hidden``, ``W_h*`` is ``hidden x hidden``."""

    W_xi: object
    W_hi: object
    W_xf: object
    W_hf: object
    W_xc: object
    W_hc: object
    W_xo: object
    W_ho: object
    b_i: object
    b_f: object
    b_c: object
    b_o: object

    @property
    def hidden(self):
        return ag.value(self.b_i).shape[0]


@dataclass
class ConvLSTMParams:
    """ConvLSTM kernels: ``W_x*`` is ``hidden x in x k x k``, ``W_h*`` is ``hidden x hidden x k x k``."""

    W_xi: object
    W_hi: object
    W_xf: object
    W_hf: object
    W_xc: object
    W_hc: object
    W_xo: object
    W_ho: object
    b_i: object
    b_f: object
    b_c: object
    b_o: object

    @property
    def hidden(self):
        return ag.value(self.b_i).shape[0]

    @property
    def in_channels(self):
        return ag.value(self.W_xi).shape[1]

    @property
    def kernel(self):
        return ag.value(self.W_xi).shape[2]


def params_from_flat(cls, flat, prefix):
    return cls(**{f.name: flat[f"{prefix}.{f.name}"] for f in fields(cls)})


def param_shapes_lstm(in_size, hidden):
    shapes = {}
    for g in GATES:
        shapes[f"W_x{g}"] = (in_size, hidden)
        shapes[f"W_h{g}"] = (hidden, hidden)
        shapes[f"b_{g}"] = (hidden,)
    return shapes


def param_shapes_clstm(in_channels, hidden, kernel):
    shapes = {}
    for g in GATES:
        shapes[f"W_x{g}"] = (hidden, in_channels, kernel, kernel)
        shapes[f"W_h{g}"] = (hidden, hidden, kernel, kernel)
        shapes[f"b_{g}"] = (hidden,)
    return shapes


@dataclass
class CellState:
    c: object
    h: object


def zero_state(hidden_shape, dtype):
    z = np.zeros(hidden_shape, dtype=dtype)
    return CellState(z, z)


def _stack_transposed(mats):
    """Rows ``[W_1^T; W_2^T; ...]`` as one contiguous matrix (differentiable)."""
    mats = [ag.lift(m) for m in mats]
    widths = np.cumsum([0] + [m.shape[1] for m in mats])
    val = np.ascontiguousarray(np.concatenate([m.value.T for m in mats], axis=0))

    def vjp(g):
        return tuple(g[widths[i]:widths[i + 1]].T for i in range(len(mats)))

    return ag.node(val, mats, vjp, "stack_T")


def _gate_update(pre, c_prev, hidden):
    i, f, g, o = ag.split_channels(pre, 4)
    i = ag.sigmoid(i)
    f = ag.sigmoid(f)
    o = ag.sigmoid(o)
    c = c_prev * f + i * ag.tanh(g)
    h = o * ag.tanh(c)
    return CellState(c, h), (i, f, o)


def lstm_step(x, prev, params, return_gates=False):
    """One step of the classic LSTM on a 1D input vector."""
    n = params.hidden
    xv = ag.value(x)
    if xv.ndim != 1 or xv.shape[0] != ag.value(params.W_xi).shape[0]:
        raise DimensionError(
            f"input length {xv.shape} does not match W_xi rows {ag.value(params.W_xi).shape[0]}"
        )
    if ag.value(prev.h).shape != (n,) or ag.value(prev.c).shape != (n,):
        raise DimensionError(f"state must have length {n}")
    wx = _stack_transposed([params.W_xi, params.W_xf, params.W_xc, params.W_xo])
    wh = _stack_transposed([params.W_hi, params.W_hf, params.W_hc, params.W_ho])
    b = ag.concat_channels(params.b_i, params.b_f, params.b_c, params.b_o)
    pre = ag.contract(wx, ag.reshape(x, (-1, 1))) + ag.reshape(b, (-1, 1))
    pre = pre + ag.contract(wh, ag.reshape(prev.h, (-1, 1)))
    pre = ag.reshape(pre, (4 * n,))
    state, gates = _gate_update(pre, prev.c, n)
    return (state, gates) if return_gates else state


def clstm_step(x, prev, params, padding="same", return_gates=False):
    """One ConvLSTM step on a ``C x H x W`` map.

    ``padding`` applies to the input-to-hidden convolutions; hidden-to-hidden
    convolutions are always same-padded so the state keeps its extent.
    """
    xv = ag.value(x)
    if xv.ndim != 3 or xv.shape[0] != params.in_channels:
        raise DimensionError(
            f"input channels {xv.shape[0] if xv.ndim == 3 else xv.shape} != kernel in_channels "
            f"{params.in_channels}"
        )
    wx = ag.concat_channels(params.W_xi, params.W_xf, params.W_xc, params.W_xo)
    wh = ag.concat_channels(params.W_hi, params.W_hf, params.W_hc, params.W_ho)
    b = ag.concat_channels(params.b_i, params.b_f, params.b_c, params.b_o)
    pre = ag.conv2d(x, wx, b, padding)
    if ag.value(prev.h).shape[1:] != pre.shape[1:]:
        raise DimensionError(
            f"hidden state extent {ag.value(prev.h).shape[1:]} does not align with gate maps "
            f"{pre.shape[1:]}"
        )
    pre = pre + ag.conv2d(prev.h, wh, None, "same")
    state, gates = _gate_update(pre, prev.c, params.hidden)
    return (state, gates) if return_gates else state


def clstm_out_extent(h, w, kernel, padding):
    if padding == "same":
        return h, w
    return h - kernel + 1, w - kernel + 1


def clstm_scan(seq, params, padding="same", reverse=False):
    """Run one ConvLSTM over ``seq``; returns hidden maps in input order."""
    order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
    c, h, w = ag.value(seq[0]).shape
    ho, wo = clstm_out_extent(h, w, params.kernel, padding)
    state = zero_state((params.hidden, ho, wo), ag.value(seq[0]).dtype)
    out = [None] * len(seq)
    for z in order:
        state = clstm_step(seq[z], state, params, padding)
        out[z] = state.h
    return out


def bdclstm_forward(seq, fwd, bwd, padding="same"):
    """Bi-directional ConvLSTM: ``concat(h_fwd[z], h_bwd[z])`` for every slice ``z``.

    ``fwd`` scans ``z = 0..N-1`` and ``bwd`` scans ``z = N-1..0``, both from
    zero states.
    """
    if len(seq) == 0:
        raise UsageError("bdclstm_forward needs a non-empty sequence")
    hf = clstm_scan(seq, fwd, padding)
    hb = clstm_scan(seq, bwd, padding, reverse=True)
    return [ag.concat_channels(a, b) for a, b in zip(hf, hb)]


# deep stack -----------------------------------------------------------------------

@dataclass(frozen=True)
class BDCLSTMLayer:
    """Bi-directional layer; ``hidden`` units per direction, output ``2 * hidden``."""

    hidden: int
    kernel: int = 5
    padding: str = "valid"

    def describe(self):
        return f"bdclstm(hidden={self.hidden}x2, {self.kernel}x{self.kernel})"


@dataclass(frozen=True)
class MaxPool2Layer:
    def describe(self):
        return "max_pool2"


@dataclass(frozen=True)
class Deconv2Layer:
    out_channels: int

    def describe(self):
        return f"deconv2(out={self.out_channels})"


@dataclass(frozen=True)
class DropoutLayer:
    p: float = 0.5

    def describe(self):
        return f"dropout(p={self.p})"


@dataclass(frozen=True)
class PlainConvLayer:
    out_channels: int
    kernel: int
    activation: str = "relu"

    def describe(self):
        return f"conv({self.kernel}x{self.kernel}, out={self.out_channels}, {self.activation})"


@dataclass(frozen=True)
class BDCLSTMStackConfig:
    layers: tuple
    in_channels: int
    nominal_input: int | None = None

    @property
    def out_channels(self):
        return trace_channels(self)


LAYER_TYPES = {
    "bdclstm": BDCLSTMLayer,
    "max_pool2": MaxPool2Layer,
    "deconv2": Deconv2Layer,
    "dropout": DropoutLayer,
    "plain_conv": PlainConvLayer,
}


def stack_from_dict(d):
    """Build a stack config from ``{"in_channels":..., "layers": [{"type":..., ...}]}``."""
    layers = []
    for entry in d["layers"]:
        entry = dict(entry)
        kind = entry.pop("type")
        if kind not in LAYER_TYPES:
            raise ConfigError(f"unknown stack layer type {kind!r}")
        layers.append(LAYER_TYPES[kind](**entry))
    return BDCLSTMStackConfig(tuple(layers), d["in_channels"], d.get("nominal_input"))


def stack_to_dict(cfg):
    rev = {v: k for k, v in LAYER_TYPES.items()}
    layers = []
    for layer in cfg.layers:
        entry = {"type": rev[type(layer)]}
        entry.update({f.name: getattr(layer, f.name) for f in fields(layer)})
        layers.append(entry)
    return {"in_channels": cfg.in_channels, "nominal_input": cfg.nominal_input, "layers": layers}


def build_stack(in_channels, hidden, kernel, mid_channels, nominal_input=None, dropout=0.5):
    """The published layer pattern at arbitrary widths.

    dropout, 2x BDC-LSTM, max-pool, dropout, 2x BDC-LSTM, deconv, dropout,
    3x3 conv, 1x1 conv to two classes.
    """
    return BDCLSTMStackConfig(
        layers=(
            DropoutLayer(dropout),
            BDCLSTMLayer(hidden, kernel),
            BDCLSTMLayer(hidden, kernel),
            MaxPool2Layer(),
            DropoutLayer(dropout),
            BDCLSTMLayer(hidden, kernel),
            BDCLSTMLayer(hidden, kernel),
            Deconv2Layer(mid_channels),
            DropoutLayer(dropout),
            PlainConvLayer(mid_channels, 3, "relu"),
            PlainConvLayer(2, 1, "none"),
        ),
        in_channels=in_channels,
        nominal_input=nominal_input,
    )


def full_stack():
    """Full-width stack: 64-channel input, 64-channel BDC-LSTM outputs, 5x5 kernels."""
    return build_stack(64, 32, 5, 64, nominal_input=126)


def reduced_stack(in_channels=4, hidden=8, kernel=3, nominal_input=20):
    """Small stack for gradient checks (3x3 kernels so a 20x20 input fits)."""
    return build_stack(in_channels, hidden, kernel, 2 * hidden, nominal_input=nominal_input)


def desk_stack(in_channels=8, hidden=8):
    """Desk-scale stack with the published 5x5 geometry (margin 26)."""
    return build_stack(in_channels, hidden, 5, 2 * hidden, nominal_input=126)


def layer_out_shape(layer, shape):
    c, h, w = shape
    if isinstance(layer, DropoutLayer):
        return shape
    if isinstance(layer, BDCLSTMLayer):
        ho, wo = clstm_out_extent(h, w, layer.kernel, layer.padding)
        if ho < 1 or wo < 1:
            raise DimensionError(f"{layer.describe()} on {h}x{w} leaves no output")
        return (2 * layer.hidden, ho, wo)
    if isinstance(layer, MaxPool2Layer):
        if h % 2 or w % 2 or h < 2 or w < 2:
            raise DimensionError(f"max_pool2 inside the stack needs even extents, got {h}x{w}")
        return (c, h // 2, w // 2)
    if isinstance(layer, Deconv2Layer):
        return (layer.out_channels, 2 * h, 2 * w)
    if isinstance(layer, PlainConvLayer):
        ho, wo = h - layer.kernel + 1, w - layer.kernel + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"{layer.describe()} on {h}x{w} leaves no output")
        return (layer.out_channels, ho, wo)
    raise ConfigError(f"unknown layer {layer!r}")


def trace_shapes(cfg, shape):
    """List of ``(layer description, output shape)`` starting with the input."""
    shape = tuple(shape)
    if shape[0] != cfg.in_channels:
        raise DimensionError(f"stack expects {cfg.in_channels} input channels, got {shape[0]}")
    rows = [("input", shape)]
    for layer in cfg.layers:
        shape = layer_out_shape(layer, shape)
        rows.append((layer.describe(), shape))
    return rows


def trace_channels(cfg):
    c = cfg.in_channels
    for layer in cfg.layers:
        if isinstance(layer, BDCLSTMLayer):
            c = 2 * layer.hidden
        elif isinstance(layer, (Deconv2Layer, PlainConvLayer)):
            c = layer.out_channels
    return c


def shape_chain(cfg, extent=None):
    """Shape after each block, where consecutive BDC-LSTMs form one block and dropout is invisible."""
    extent = extent or cfg.nominal_input
    rows = trace_shapes(cfg, (cfg.in_channels, extent, extent))
    chain = [rows[0][1]]
    for k, layer in enumerate(cfg.layers):
        shape = rows[k + 1][1]
        nxt = cfg.layers[k + 1] if k + 1 < len(cfg.layers) else None
        if isinstance(layer, DropoutLayer):
            continue
        if isinstance(layer, BDCLSTMLayer) and isinstance(nxt, BDCLSTMLayer):
            continue
        chain.append(shape)
    return chain


def format_shape(shape):
    return "×".join(str(n) for n in shape)


def format_chain(chain):
    return " → ".join(format_shape(s) for s in chain)


def output_extent(cfg, extent):
    return trace_shapes(cfg, (cfg.in_channels, extent, extent))[-1][1][1]


def input_extent_for(cfg, out_extent):
    """Smallest input extent whose stack output is exactly ``out_extent``."""
    for s in range(out_extent, out_extent + 10_000):
        try:
            if output_extent(cfg, s) == out_extent:
                return s
        except DimensionError:
            continue
    raise ConfigError(f"no input extent produces a {out_extent}x{out_extent} output")


def stack_margin(cfg, out_extent=None):
    """Total shrinkage ``input - output`` of the stack."""
    if out_extent is None:
        out_extent = output_extent(cfg, cfg.nominal_input)
    return input_extent_for(cfg, out_extent) - out_extent


def stack_param_shapes(cfg, prefix="rnn"):
    shapes = {}
    c = cfg.in_channels
    for k, layer in enumerate(cfg.layers):
        base = f"{prefix}.L{k}"
        if isinstance(layer, BDCLSTMLayer):
            for d in ("fwd", "bwd"):
                for name, s in param_shapes_clstm(c, layer.hidden, layer.kernel).items():
                    shapes[f"{base}.{d}.{name}"] = s
            c = 2 * layer.hidden
        elif isinstance(layer, Deconv2Layer):
            shapes[f"{base}.w"] = (layer.out_channels, c, 2, 2)
            shapes[f"{base}.b"] = (layer.out_channels,)
            c = layer.out_channels
        elif isinstance(layer, PlainConvLayer):
            shapes[f"{base}.w"] = (layer.out_channels, c, layer.kernel, layer.kernel)
            shapes[f"{base}.b"] = (layer.out_channels,)
            c = layer.out_channels
    return shapes


def _dropout(seq, p, rng):
    out = []
    for x in seq:
        keep = rng.random(ag.value(x).shape) >= p
        mask = keep.astype(ag.value(x).dtype) / (1.0 - p)
        out.append(x * mask)
    return out


def deep_bdclstm_forward(seq, cfg, params, mode="eval", rng=None, prefix="rnn"):
    """Run the stacked BDC-LSTM over a list of ``C x H x W`` slices.

    Returns per-slice two-channel logits. ``mode="train"`` draws inverted
    dropout masks from ``rng``; ``mode="eval"`` disables dropout.
    """
    if len(seq) == 0:
        raise UsageError("deep_bdclstm_forward needs a non-empty sequence")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise UsageError("train mode needs an rng for dropout masks")
    shape = ag.value(seq[0]).shape
    try:
        trace_shapes(cfg, shape)
    except DimensionError as exc:
        expected = ""
        if cfg.nominal_input:
            expected = "; expected chain " + format_chain(shape_chain(cfg))
        raise DimensionError(f"input {format_shape(shape)} does not fit the stack: {exc}{expected}") from None
    for x in seq:
        if ag.value(x).shape != shape:
            raise DimensionError("all slices must share one shape")

    for k, layer in enumerate(cfg.layers):
        base = f"{prefix}.L{k}"
        if isinstance(layer, DropoutLayer):
            if mode == "train" and layer.p > 0:
                seq = _dropout(seq, layer.p, rng)
        elif isinstance(layer, BDCLSTMLayer):
            fwd = params_from_flat(ConvLSTMParams, params, f"{base}.fwd")
            bwd = params_from_flat(ConvLSTMParams, params, f"{base}.bwd")
            seq = bdclstm_forward(seq, fwd, bwd, layer.padding)
        elif isinstance(layer, MaxPool2Layer):
            seq = [ag.max_pool2(x) for x in seq]
        elif isinstance(layer, Deconv2Layer):
            seq = [ag.deconv2(x, params[f"{base}.w"], params[f"{base}.b"]) for x in seq]
        elif isinstance(layer, PlainConvLayer):
            seq = [ag.conv2d(x, params[f"{base}.w"], params[f"{base}.b"], "valid") for x in seq]
            if layer.activation == "relu":
                seq = [ag.relu(x) for x in seq]
    return seq
