"""3D inference: per-slice kU-Net features, BDC-LSTM over a z-window, softmax.

The deep BDC-LSTM shrinks each slice by a fixed margin (26 pixels for the
published 5x5 geometry). :func:`tiled_apply` zero-pads the feature maps by
half the margin on each border, runs overlapping input windows of
``tile + margin`` pixels and stitches their ``tile x tile`` outputs.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import fcn as F
from . import recurrent as R
from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, UsageError

SEQUENCE_MODES = ("window", "full")


def worker_count():
    """Thread cap from ``ANSG_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("ANSG_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PipelineConfig:
    rho: int = 1
    tile: int = 100
    margin: int | None = 26
    sequence_mode: str = "window"
    fcn_working_size: int | None = None
    check_overlap: bool = False

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.sequence_mode not in SEQUENCE_MODES:
            raise ConfigError(f"sequence_mode must be one of {SEQUENCE_MODES}")


def resolve_margin(stack_cfg, tile, margin=None):
    """Shrinkage of the stack for ``tile``-sized outputs; checks a declared margin against it."""
    try:
        actual = R.stack_margin(stack_cfg, tile)
    except (ConfigError, DimensionError) as exc:
        raise ConfigError(f"tile {tile} is not a valid output extent for the stack: {exc}") from None
    if margin is not None and margin != actual:
        raise ConfigError(f"configured margin {margin} != stack shrinkage {actual}")
    return actual


def _origins(extent, tile):
    last = extent - tile
    out = list(range(0, last, tile))
    out.append(last)
    return out


def tiled_apply(features, stack_cfg, params, tile=100, margin=None, check_overlap=False, threads=None):
    """Run the deep stack over a feature sequence by overlapping tiles.

    ``features`` is a list of ``C x H x W`` slices. Returns per-slice
    ``out_channels x H x W`` logits.
    """
    if len(features) == 0:
        raise UsageError("tiled_apply needs a non-empty feature sequence")
    feats = np.stack([np.asarray(f) for f in features])
    n, c, h, w = feats.shape
    if tile % 2:
        raise ConfigError("tile extent must be even so tile origins stay on the pooling grid")
    margin = resolve_margin(stack_cfg, tile, margin)
    lo = margin // 2
    hi = margin - lo
    # canvas extents: at least one tile, even so every origin stays even
    hc = max(tile, h + h % 2)
    wc = max(tile, w + w % 2)
    canvas = np.pad(feats, ((0, 0), (0, 0), (lo, hi + hc - h), (lo, hi + wc - w)))
    jobs = [(oy, ox) for oy in _origins(hc, tile) for ox in _origins(wc, tile)]
    win = tile + margin

    def run(job):
        oy, ox = job
        seq = [canvas[z, :, oy:oy + win, ox:ox + win] for z in range(n)]
        out = R.deep_bdclstm_forward(seq, stack_cfg, params, mode="eval")
        return [ag.value(o) for o in out]

    threads = threads or worker_count()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    out_c = results[0][0].shape[0]
    out = np.zeros((n, out_c, hc, wc), dtype=results[0][0].dtype)
    filled = np.zeros((hc, wc), dtype=bool)
    for (oy, ox), res in zip(jobs, results):
        block = np.stack(res)
        if check_overlap:
            prev = filled[oy:oy + tile, ox:ox + tile]
            if prev.any():
                diff = np.abs(out[:, :, oy:oy + tile, ox:ox + tile] - block)[:, :, prev]
                if diff.size and diff.max() > 1e-5:
                    raise NumericError(f"tile overlap disagreement {diff.max():.3e} at origin ({oy}, {ox})")
        out[:, :, oy:oy + tile, ox:ox + tile] = block
        filled[oy:oy + tile, ox:ox + tile] = True
    return list(out[:, :, :h, :w])


def apply_whole(features, stack_cfg, params):
    """Single-window application over the whole (zero-padded) image."""
    _, h, w = np.asarray(features[0]).shape
    tile = max(h + h % 2, w + w % 2)
    return tiled_apply(features, stack_cfg, params, tile=tile, threads=1)


def window_indices(z, n, rho):
    """Slice indices ``z - rho .. z + rho``, replicating the nearest slice past either end."""
    return [min(max(z + d, 0), n - 1) for d in range(-rho, rho + 1)]


def _pad_to_multiple(x, m):
    _, h, w = x.shape
    ph, pw = (-h) % m, (-w) % m
    return np.pad(x, ((0, 0), (0, ph), (0, pw))), h, w


def slice_features(image, fcn_params, kcfg, working_size=None):
    """kU-Net features of one ``1 x H x W`` slice (padded to the pyramid's divisibility)."""
    m = 2 ** (kcfg.k - 1 + kcfg.unet.depth)
    x = np.asarray(image)
    if working_size is None or max(x.shape[1:]) <= working_size:
        xp, h, w = _pad_to_multiple(x, m)
        return ag.value(F.kunet_forward(xp, fcn_params, kcfg))[:, :h, :w]
    # large slices: overlapping windows with a halo, cropped back to their cores
    halo = 4 * m
    core = max(m, (working_size - 2 * halo) // m * m)
    _, h, w = x.shape
    out = None
    for oy in range(0, h, core):
        for ox in range(0, w, core):
            y0, x0 = max(0, oy - halo), max(0, ox - halo)
            y1, x1 = min(h, oy + core + halo), min(w, ox + core + halo)
            sub, sh, sw = _pad_to_multiple(x[:, y0:y1, x0:x1], m)
            f = ag.value(F.kunet_forward(sub, fcn_params, kcfg))[:, :sh, :sw]
            if out is None:
                out = np.zeros((f.shape[0], h, w), dtype=f.dtype)
            cy1, cx1 = min(h, oy + core), min(w, ox + core)
            out[:, oy:cy1, ox:cx1] = f[:, oy - y0:cy1 - y0, ox - x0:cx1 - x0]
    return out


def extract_slice_features(stack, fcn_params, kcfg, working_size=None):
    """One ``out_channels x N_x x N_y`` kU-Net feature map per slice, in slice order."""
    if stack.n_slices == 0:
        raise UsageError("empty stack")
    return [slice_features(stack.slice(z), fcn_params, kcfg, working_size) for z in range(stack.n_slices)]


def fcn_probabilities(features, fcn_params, prefix="fcn"):
    """Softmax of the FCN's own 1x1 head, per slice."""
    w, b = fcn_params[f"{prefix}.head.w"], fcn_params[f"{prefix}.head.b"]
    return np.stack([T.softmax_channels(T.conv2d(f, w, b)) for f in features])


def rnn_logits(features, stack_cfg, rnn_params, pcfg):
    n = len(features)
    kw = dict(tile=pcfg.tile, margin=pcfg.margin, check_overlap=pcfg.check_overlap)
    if pcfg.sequence_mode == "full":
        return tiled_apply(features, stack_cfg, rnn_params, **kw)
    out = []
    for z in range(n):
        idx = window_indices(z, n, pcfg.rho)
        res = tiled_apply([features[i] for i in idx], stack_cfg, rnn_params, **kw)
        out.append(res[pcfg.rho])
    return out


def segment_stack(stack, fcn_params, kcfg, rnn_params=None, stack_cfg=None, pcfg=None, features=None):
    """Two-class probabilities ``N_z x 2 x N_x x N_y``.

    With ``rnn_params`` the BDC-LSTM refines the kU-Net features over the
    z-context; without it the FCN's own head produces the probabilities.
    """
    pcfg = pcfg or PipelineConfig()
    if features is None:
        features = extract_slice_features(stack, fcn_params, kcfg, pcfg.fcn_working_size)
    if rnn_params is None:
        return fcn_probabilities(features, fcn_params)
    if stack_cfg is None:
        raise ConfigError("rnn_params given without a stack config")
    logits = rnn_logits(features, stack_cfg, rnn_params, pcfg)
    return np.stack([T.softmax_channels(l) for l in logits])
