"""Losses, weight maps, optimizers, initialization, augmentation and training loops.

Defaults follow the published recipe: kU-Net uses Adam (beta1 0.9, beta2
0.999, eps 1e-10, constant lr 5e-5) with He-normal init; the BDC-LSTM uses
RMSprop (alpha 0.9, eps 1e-5) with lr 1e-3 halving every 2000 iterations
down to 1e-5 and uniform [-0.02, 0.02] init. Gradients are clipped
elementwise to [-5, 5].
"""
from __future__ import annotations

import copy
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autograd as ag
from . import fcn as F
from . import recurrent as R
from .errors import ConfigError, DimensionError, FormatError, NumericError, UsageError
from .pipeline import PipelineConfig, resolve_margin, window_indices
from .seeding import stream


# loss -------------------------------------------------------------------------------

PROB_FLOOR = 1e-12


def weighted_cross_entropy(prob, label, weights):
    """``mean_v w(v) * -log p_{y(v)}(v)`` for a ``2 x H x W`` probability map."""
    prob = ag.lift(prob)
    p = prob.value
    y = np.asarray(label).astype(np.int64)
    w = np.asarray(weights, dtype=p.dtype)
    if p.ndim != 3 or p.shape[0] != 2 or p.shape[1:] != y.shape or w.shape != y.shape:
        raise DimensionError(f"prob {p.shape}, label {y.shape}, weights {w.shape} do not agree")
    py = np.take_along_axis(p, y[None], axis=0)[0]
    safe = np.maximum(py, PROB_FLOOR)
    n = y.size
    loss = np.asarray((w * -np.log(safe)).sum() / n, dtype=p.dtype)
    if not np.isfinite(loss):
        raise NumericError("weighted cross-entropy is not finite")

    def vjp(g):
        d = np.zeros_like(p)
        gy = np.where(py >= PROB_FLOOR, -g * w / (n * safe), 0.0).astype(p.dtype)
        np.put_along_axis(d, y[None], gy[None], axis=0)
        return (d,)

    return ag.node(loss, (prob,), vjp, "weighted_cross_entropy")


def class_weights(label):
    """Per-voxel class balancing ``N / (n_classes_present * N_class)``."""
    label = np.asarray(label) > 0
    n = label.size
    n_fg = int(label.sum())
    counts = [c for c in (n - n_fg, n_fg) if c]
    k = len(counts)
    w = np.empty(label.shape)
    if n_fg:
        w[label] = n / (k * n_fg)
    if n - n_fg:
        w[~label] = n / (k * (n - n_fg))
    return w


def compute_weight_map(label, w0=10.0, sigma=5.0, balance=True):
    """Class balance plus a separation term ``w0 exp(-(d1 + d2)^2 / (2 sigma^2))``.

    ``d1`` and ``d2`` are the distances to the nearest and second-nearest
    foreground component; with fewer than two components the separation term
    vanishes.
    """
    label = np.asarray(label) > 0
    w = class_weights(label) if balance else np.ones(label.shape)
    comps, k = ndimage.label(label)
    if k >= 2:
        dists = np.stack([ndimage.distance_transform_edt(comps != i) for i in range(1, k + 1)])
        dists.sort(axis=0)
        d1, d2 = dists[0], dists[1]
        w = w + w0 * np.exp(-((d1 + d2) ** 2) / (2.0 * sigma ** 2))
    return w


# optimizers -----------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerHyper:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-10
    alpha: float = 0.9
    base_lr: float = 5e-5
    schedule: str = "constant"  # or "halving"
    halve_every: int = 2000
    min_lr: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("adam", "rmsprop"):
            raise ConfigError(f"optimizer kind must be adam or rmsprop, got {self.kind!r}")
        for name in ("beta1", "beta2", "alpha"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.epsilon <= 0 or self.base_lr <= 0:
            raise ConfigError("epsilon and base_lr must be positive")
        if self.schedule not in ("constant", "halving"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr(self, iteration):
        if self.schedule == "constant":
            return self.base_lr
        return lr_schedule(iteration, self.base_lr, self.halve_every, self.min_lr)


ADAM = OptimizerHyper()
RMSPROP = OptimizerHyper(kind="rmsprop", epsilon=1e-5, alpha=0.9, base_lr=1e-3, schedule="halving")


def lr_schedule(iteration, base=1e-3, halve_every=2000, floor=1e-5):
    """``max(base * 2^-(iteration // halve_every), floor)``."""
    if iteration < 0:
        raise UsageError("iteration must be >= 0")
    return max(base * 2.0 ** -(iteration // halve_every), floor)


@dataclass
class TrainState:
    params: dict
    hyper: OptimizerHyper
    moments: dict = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.moments:
            names = ("m", "v") if self.hyper.kind == "adam" else ("cache",)
            self.moments = {n: {k: np.zeros_like(p) for k, p in self.params.items()} for n in names}


def _check_grads(state, grads):
    for k, g in grads.items():
        if k not in state.params:
            raise UsageError(f"gradient for unknown parameter {k!r}")
        if g.shape != state.params[k].shape:
            raise DimensionError(f"gradient {k!r} has shape {g.shape}, parameter {state.params[k].shape}")


def adam_step(state, grads, hyper=None):
    """Bias-corrected Adam update, in place; returns ``state``."""
    hyper = hyper or state.hyper
    _check_grads(state, grads)
    t = state.iteration + 1
    lr = hyper.lr(state.iteration)
    b1, b2 = hyper.beta1, hyper.beta2
    m, v = state.moments["m"], state.moments["v"]
    for k, g in grads.items():
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        p = state.params[k]
        p -= (lr * mhat / (np.sqrt(vhat) + hyper.epsilon)).astype(p.dtype)
    state.iteration = t
    return state


def rmsprop_step(state, grads, hyper=None):
    """``cache = a*cache + (1-a) g^2``; ``p -= lr g / sqrt(cache + eps)``, in place."""
    hyper = hyper or state.hyper
    _check_grads(state, grads)
    lr = hyper.lr(state.iteration)
    a = hyper.alpha
    cache = state.moments["cache"]
    for k, g in grads.items():
        cache[k] = a * cache[k] + (1 - a) * g * g
        p = state.params[k]
        p -= (lr * g / np.sqrt(cache[k] + hyper.epsilon)).astype(p.dtype)
    state.iteration += 1
    return state


def optimizer_step(state, grads):
    if state.hyper.kind == "adam":
        return adam_step(state, grads)
    return rmsprop_step(state, grads)


def clip_gradients(grads, bound=5.0):
    out = {}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}")
        out[k] = np.clip(g, -bound, bound)
    return out


# init -----------------------------------------------------------------------------------

UNIFORM_RANGE = 0.02


def init_params(spec, seed, dtype=np.float32, uniform_range=UNIFORM_RANGE):
    """Draw parameters from ``name -> (shape, kind)``; each name has its own seeded stream.

    Kinds: ``he`` (normal, std ``sqrt(2 / fan_in)``, fan_in = in x kh x kw),
    ``he_deconv`` (fan_in = in channels), ``zero``, ``uniform``
    (``U[-uniform_range, uniform_range]``, 0.02 by default).
    """
    out = {}
    for name, (shape, kind) in spec.items():
        rng = stream(seed, "init/" + name)
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif kind == "he_deconv":
            arr = rng.normal(0.0, math.sqrt(2.0 / shape[1]), size=shape)
        elif kind == "zero":
            arr = np.zeros(shape)
        elif kind == "uniform":
            arr = rng.uniform(-uniform_range, uniform_range, size=shape)
        else:
            raise ConfigError(f"unknown init kind {kind!r} for {name}")
        out[name] = arr.astype(dtype)
    return out


def rnn_param_spec(stack_cfg, prefix="rnn"):
    return {k: (s, "uniform") for k, s in R.stack_param_shapes(stack_cfg, prefix).items()}


# augmentation ----------------------------------------------------------------------------

def dihedral(x, k):
    """Element ``k`` (0..7) of the dihedral group on the last two axes.

    ``k % 4`` quarter turns, preceded by a horizontal mirror when ``k >= 4``.
    """
    x = np.asarray(x)
    if k >= 4:
        x = x[..., ::-1]
    return np.rot90(x, k % 4, axes=(-2, -1))


def dihedral_inverse(x, k):
    x = np.rot90(np.asarray(x), -(k % 4), axes=(-2, -1))
    if k >= 4:
        x = x[..., ::-1]
    return x


def augment(sample, rng):
    """Apply one uniformly drawn dihedral transform to every array in ``sample``.

    ``sample`` is a tuple of arrays sharing their last two axes (image, label,
    weights, ...). Returns ``(transformed tuple, k)``.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    k = int(rng.integers(8))
    h, w = np.shape(sample[0])[-2:]
    if h != w and k % 2:
        raise ConfigError(f"rotation augmentation needs square tiles, got {h}x{w}")
    return tuple(np.ascontiguousarray(dihedral(a, k)) for a in sample), k


# training loop --------------------------------------------------------------------------

MODES = ("fcn_only", "rnn_only", "end_to_end")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    fcn_optimizer: OptimizerHyper = ADAM
    rnn_optimizer: OptimizerHyper = RMSPROP
    clip: float = 5.0
    w0: float = 10.0
    sigma: float = 5.0
    class_balance: bool = True
    augment: bool = True
    rnn_tile: int = 24
    rnn_init_range: float = UNIFORM_RANGE
    checkpoint_every: int = 0
    dtype: str = "float32"


@dataclass
class TrainResult:
    fcn_params: dict | None
    rnn_params: dict | None
    states: dict
    trace: list
    checkpoints: list


def _pad_to(x, h, w):
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, h - x.shape[-2]), (0, w - x.shape[-1])])


def _fcn_sample(stack, weights, z, m):
    img = stack.slice(z)
    lab = stack.labels[z]
    wts = weights[z]
    h, w = img.shape[1:]
    hp, wp = h + (-h) % m, w + (-w) % m
    return _pad_to(img, hp, wp), _pad_to(lab, hp, wp), _pad_to(wts, hp, wp)


class _FeatureCache:
    """Frozen kU-Net features of every (slice, dihedral transform) pair."""

    def __init__(self, stack, fcn_params, kcfg, dtype):
        self.stack, self.params, self.kcfg, self.dtype = stack, fcn_params, kcfg, dtype
        self.m = 2 ** (kcfg.k - 1 + kcfg.unet.depth)
        self._cache = {}

    def get(self, z, k):
        key = (z, k)
        if key not in self._cache:
            img = np.ascontiguousarray(dihedral(self.stack.slice(z), k)).astype(self.dtype)
            h, w = img.shape[1:]
            img = _pad_to(img, h + (-h) % self.m, w + (-w) % self.m)
            f = ag.value(F.kunet_forward(img, self.params, self.kcfg))[:, :h, :w]
            self._cache[key] = f
        return self._cache[key]


def _rnn_window(stack, z, rho, tile, margin, rng):
    """Pick an output crop (even origin) and return its geometry on the zero-padded canvas."""
    h, w = stack.image.shape[1:]
    hc, wc = max(tile, h + h % 2), max(tile, w + w % 2)
    oy = 2 * int(rng.integers((hc - tile) // 2 + 1))
    ox = 2 * int(rng.integers((wc - tile) // 2 + 1))
    return oy, ox, hc, wc


def _canvas(x, lo, hi_y, hi_x):
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(lo, hi_y), (lo, hi_x)])


def train_loop(cfg, stack, mode, kcfg, stack_cfg=None, pcfg=None, seed=0,
               fcn_params=None, rnn_params=None, callback=None):
    """Train on one labeled stack; one randomly chosen example per iteration.

    ``fcn_only`` trains kU-Net plus its 1x1 head on 2D slices with Adam.
    ``rnn_only`` freezes ``fcn_params`` and trains the BDC-LSTM on their
    features with RMSprop. ``end_to_end`` backpropagates through both,
    stepping each component with its own optimizer.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if stack.labels is None:
        raise UsageError("training stack has no labels")
    dtype = np.dtype(cfg.dtype)
    pcfg = pcfg or PipelineConfig()
    sample_rng = stream(seed, "train/sample")
    aug_rng = stream(seed, "train/augment")
    drop_rng = stream(seed, "train/dropout")
    crop_rng = stream(seed, "train/crop")

    if fcn_params is None:
        fcn_params = init_params(F.fcn_param_spec(kcfg), seed, dtype)
    fcn_params = {k: np.array(v, dtype=dtype) for k, v in fcn_params.items()}
    if mode != "fcn_only":
        if stack_cfg is None:
            raise ConfigError(f"mode {mode} needs a BDC-LSTM stack config")
        if rnn_params is None:
            rnn_params = init_params(rnn_param_spec(stack_cfg), seed, dtype, cfg.rnn_init_range)
        rnn_params = {k: np.array(v, dtype=dtype) for k, v in rnn_params.items()}
        margin = resolve_margin(stack_cfg, cfg.rnn_tile, None)

    weights = np.stack([compute_weight_map(l, cfg.w0, cfg.sigma, cfg.class_balance)
                        for l in stack.labels]).astype(dtype)
    states = {}
    if mode in ("fcn_only", "end_to_end"):
        states["fcn"] = TrainState(fcn_params, cfg.fcn_optimizer, seed=seed)
    if mode in ("rnn_only", "end_to_end"):
        states["rnn"] = TrainState(rnn_params, cfg.rnn_optimizer, seed=seed)
    cache = _FeatureCache(stack, fcn_params, kcfg, dtype) if mode == "rnn_only" else None
    m = 2 ** (kcfg.k - 1 + kcfg.unet.depth)
    trace, checkpoints = [], []
    n = stack.n_slices

    for it in range(cfg.iterations):
        z = int(sample_rng.integers(n))
        if mode == "fcn_only":
            img, lab, wts = _fcn_sample(stack, weights, z, m)
            if cfg.augment:
                (img, lab, wts), _ = augment((img, lab, wts), aug_rng)
            img = img.astype(dtype)

            def loss_fn(p):
                logits = F.fcn_logits(img, p, kcfg)
                return weighted_cross_entropy(ag.softmax_channels(logits), lab, wts)
        else:
            k = int(aug_rng.integers(8)) if cfg.augment else 0
            h, w = stack.image.shape[1:]
            if h != w and k % 2:
                k -= 1
            tile = cfg.rnn_tile
            oy, ox, hc, wc = _rnn_window(stack, z, pcfg.rho, tile, margin, crop_rng)
            lo = margin // 2
            hi_y, hi_x = margin - lo + hc - h, margin - lo + wc - w
            win = tile + margin
            lab = _pad_to(dihedral(stack.labels[z], k), hc, wc)[oy:oy + tile, ox:ox + tile]
            wts = _pad_to(dihedral(weights[z], k), hc, wc)[oy:oy + tile, ox:ox + tile]
            idx = window_indices(z, n, pcfg.rho)

            if mode == "rnn_only":
                seq = [_canvas(cache.get(i, k), lo, hi_y, hi_x)[:, oy:oy + win, ox:ox + win] for i in idx]

                def loss_fn(p, seq=seq):
                    out = R.deep_bdclstm_forward(seq, stack_cfg, p, mode="train", rng=drop_rng)
                    return weighted_cross_entropy(ag.softmax_channels(out[pcfg.rho]), lab, wts)
            else:
                imgs = [np.ascontiguousarray(dihedral(stack.slice(i), k)).astype(dtype) for i in idx]

                def loss_fn(p, imgs=imgs):
                    seq = []
                    for img in imgs:
                        xp = _pad_to(img, h + (-h) % m, w + (-w) % m)
                        f = F.kunet_forward(xp, p, kcfg)
                        f = ag.crop(f, 0, 0, h, w)
                        f = ag.pad(f, lo, hi_y, lo, hi_x)
                        seq.append(ag.crop(f, oy, ox, win, win))
                    out = R.deep_bdclstm_forward(seq, stack_cfg, p, mode="train", rng=drop_rng)
                    return weighted_cross_entropy(ag.softmax_channels(out[pcfg.rho]), lab, wts)

        trainable = {}
        for st in states.values():
            trainable.update(st.params)
        if mode == "rnn_only":
            live = ag.params_to_vars(rnn_params)
        else:
            live = ag.params_to_vars(trainable)
            if mode == "end_to_end":
                live = {k: v for k, v in live.items() if not k.startswith("fcn.head.")}
        try:
            loss_var = loss_fn(live)
            grads = clip_gradients(ag.backward(loss_var), cfg.clip)
        except NumericError as exc:
            raise NumericError(f"training diverged at iteration {it}: {exc}") from None
        loss = float(loss_var.value)
        lr = None
        for name, st in states.items():
            mine = {k: g for k, g in grads.items() if k in st.params}
            lr = st.hyper.lr(st.iteration)
            optimizer_step(st, mine)
        trace.append((it, lr, loss))
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoints.append((it + 1, copy.deepcopy(states)))
        if callback is not None:
            callback(it, loss)

    return TrainResult(fcn_params, rnn_params if mode != "fcn_only" else None, states, trace, checkpoints)


# checkpoints ------------------------------------------------------------------------------
#
# ANSG container, little-endian:
#   b"ANSG", u32 version, u32 dtype code (1 = f32, 2 = f64), u32 parameter count,
#   per parameter: u32 name length, utf-8 name, u32 rank, u32 extents[rank], raw scalars;
#   u32 optimizer count, per optimizer: u32 label length, label, u32 kind length, kind,
#   u64 iteration, u32 array count, then arrays in the parameter-table layout
#   (names "<moment>/<parameter>").

CKPT_MAGIC = b"ANSG"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _pack_table(arrays, dtype):
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=dtype, order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def text(self, what):
        try:
            return self.take(self.u32(what), what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid utf-8", self.pos) from None

    def table(self, dtype):
        out = {}
        for _ in range(self.u32("table size")):
            name = self.text("array name")
            rank = self.u32(f"rank of {name}")
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank, f"extents of {name}"))
            count = int(np.prod(shape, dtype=np.int64))
            raw = self.take(count * dtype.itemsize, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        return out


def write_checkpoint(path, params, states=None):
    """Write parameters plus optimizer state (``label -> TrainState``)."""
    states = states or {}
    dtypes = {np.asarray(p).dtype for p in params.values()}
    if len(dtypes) > 1:
        raise UsageError(f"checkpoint parameters must share one dtype, got {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.dtype("float32")
    if dtype not in _CODES:
        raise UsageError(f"unsupported checkpoint dtype {dtype}")
    code = _CODES[dtype]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, code), _pack_table(params, dtype)]
    parts.append(struct.pack("<I", len(states)))
    for label in sorted(states):
        st = states[label]
        flat = {f"{m}/{k}": arr for m, d in st.moments.items() for k, arr in d.items()}
        for s in (label.encode(), st.hyper.kind.encode()):
            parts.append(struct.pack("<I", len(s)) + s)
        parts.append(struct.pack("<Q", st.iteration))
        parts.append(_pack_table(flat, dtype))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    """``(params, optimizers)`` where optimizers maps label -> (kind, iteration, moments)."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    code = r.u32("dtype code")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    dtype = _DTYPES[code]
    params = r.table(dtype)
    optimizers = {}
    for _ in range(r.u32("optimizer count")):
        label = r.text("optimizer label")
        kind = r.text("optimizer kind")
        iteration = r.u64("iteration")
        moments = {}
        for key, arr in r.table(dtype).items():
            m, _, name = key.partition("/")
            moments.setdefault(m, {})[name] = arr
        optimizers[label] = (kind, iteration, moments)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return params, optimizers


def write_loss_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in trace:
            w.writerow([it, repr(float(lr)), repr(float(loss))])
