"""JSON run configuration: documented defaults, strict merging, object builders."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from . import data as D
from . import fcn as F
from . import recurrent as R
from . import training as TR
from .errors import ConfigError
from .pipeline import PipelineConfig
from .seeding import stream

DEFAULTS = {
    "seed": 0,
    "data": {
        "path": None,  # ZSTK input; None generates a phantom from the keys below
        "extents": [12, 48, 48],
        "anisotropy": 4.0,
        "n_tubes": 3,
        "radius_range": [2.0, 4.0],
        "noise": 0.1,
        "illumination": 0.2,
        "background": 0.2,
        "foreground": 0.8,
        "mask_every": 0,  # >0 marks every n-th slice as evaluated
    },
    "fcn": {
        "k": 2,
        "fusion": "A",
        "depth": 2,
        "base_channels": 8,
        "out_channels": 8,
    },
    "rnn": {
        "preset": None,  # "full", "desk", "reduced" or None for the keys below
        "hidden": 8,  # per direction; each BDC-LSTM emits 2 * hidden channels
        "kernel": 5,
        "mid_channels": 16,
        "dropout": 0.5,
        "nominal_input": 126,
        "layers": None,  # explicit layer list overrides everything above
    },
    "pipeline": {
        "checkpoint": None,
        "rho": 1,
        "tile": 100,
        "margin": None,
        "sequence_mode": "window",
        "fcn_working_size": None,
        "check_overlap": False,
    },
    "training": {
        "mode": "fcn_only",
        "iterations": 500,
        "init_checkpoint": None,
        "checkpoint_every": 0,
        "clip": 5.0,
        "w0": 10.0,
        "sigma": 5.0,
        "class_balance": True,
        "augment": True,
        "rnn_tile": 24,
        "rnn_init_range": 0.02,
        "dtype": "float32",
        "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-10, "base_lr": 5e-5},
        "rmsprop": {"alpha": 0.9, "epsilon": 1e-5, "base_lr": 1e-3, "halve_every": 2000, "min_lr": 1e-5},
    },
    "metrics": {"connectivity": 4, "threshold": 0.5},
}

MANIFEST_KEY = "manifest"


def merge(base, override, where="config"):
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def load_config(path=None):
    """Defaults merged with a JSON file; a run manifest is accepted as well."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    doc = dict(doc)
    doc.pop(MANIFEST_KEY, None)
    return merge(DEFAULTS, doc)


def phantom_config(cfg):
    d = cfg["data"]
    seed = int(stream(cfg["seed"], "data/phantom").integers(2**63))
    return D.PhantomConfig(
        extents=tuple(d["extents"]), anisotropy=d["anisotropy"], n_tubes=d["n_tubes"],
        radius_range=tuple(d["radius_range"]), noise=d["noise"], illumination=d["illumination"],
        background=d["background"], foreground=d["foreground"], seed=seed,
    )


def load_stack(cfg):
    """The configured input stack (file, or a generated phantom)."""
    d = cfg["data"]
    if d["path"] is not None:
        if not Path(d["path"]).is_file():
            raise ConfigError(f"stack file not found: {d['path']}")
        return D.read_stack(d["path"])
    stack = D.generate_phantom(phantom_config(cfg))
    if d["mask_every"]:
        stack.mask = D.sparse_mask(stack.n_slices, stack.image.shape[1:], d["mask_every"])
    return stack


def kunet_config(cfg):
    f = cfg["fcn"]
    unet = F.UNetConfig(depth=f["depth"], base_channels=f["base_channels"], out_channels=f["out_channels"])
    return F.KUNetConfig(k=f["k"], fusion=f["fusion"], unet=unet)


def stack_config(cfg):
    r = cfg["rnn"]
    if r["layers"] is not None:
        return R.stack_from_dict({"layers": r["layers"], "in_channels": cfg["fcn"]["out_channels"],
                                  "nominal_input": r["nominal_input"]})
    presets = {"full": R.full_stack, "desk": R.desk_stack, "reduced": R.reduced_stack}
    if r["preset"] is not None:
        if r["preset"] not in presets:
            raise ConfigError(f"unknown rnn preset {r['preset']!r}; expected one of {sorted(presets)}")
        return presets[r["preset"]]()
    return R.build_stack(cfg["fcn"]["out_channels"], r["hidden"], r["kernel"], r["mid_channels"],
                         nominal_input=r["nominal_input"], dropout=r["dropout"])


def pipeline_config(cfg):
    p = {k: v for k, v in cfg["pipeline"].items() if k != "checkpoint"}
    return PipelineConfig(**p)


def train_config(cfg):
    t = cfg["training"]
    a, r = t["adam"], t["rmsprop"]
    adam = TR.OptimizerHyper(kind="adam", beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"],
                             base_lr=a["base_lr"])
    rms = TR.OptimizerHyper(kind="rmsprop", alpha=r["alpha"], epsilon=r["epsilon"], base_lr=r["base_lr"],
                            schedule="halving", halve_every=r["halve_every"], min_lr=r["min_lr"])
    if t["mode"] not in TR.MODES:
        raise ConfigError(f"training.mode must be one of {TR.MODES}")
    return TR.TrainConfig(
        iterations=int(t["iterations"]), fcn_optimizer=adam, rnn_optimizer=rms, clip=t["clip"],
        w0=t["w0"], sigma=t["sigma"], class_balance=t["class_balance"], augment=t["augment"],
        rnn_tile=t["rnn_tile"], rnn_init_range=t["rnn_init_range"],
        checkpoint_every=t["checkpoint_every"], dtype=t["dtype"],
    )
