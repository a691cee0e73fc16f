"""``ansg`` command line: gen-data, train, infer, eval, gradcheck, shapes.

Exit status 0 on success, 1 for usage/configuration/format errors, 2 for
numeric failures (non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import data as D
from . import gradcheck as G
from . import metrics as M
from . import pipeline as P
from . import recurrent as R
from . import training as TR
from .errors import AnsgError, ConfigError, NumericError

log = logging.getLogger("ansg")

COMMANDS = ("gen-data", "train", "infer", "eval", "gradcheck", "shapes")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="ansg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ansg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config or a previous run's manifest")
        p.add_argument("--seed", type=int, help="top-level seed (u64)")
        p.add_argument("--out", default=".", help="output directory")
        if name in ("train", "infer", "eval"):
            p.add_argument("--input", help="ZSTK stack (sets data.path)")
        if name == "train":
            p.add_argument("--mode", choices=TR.MODES)
            p.add_argument("--iters", type=int, help="training iterations")
            p.add_argument("--init-checkpoint", help="ANSG checkpoint to start from")
        if name == "infer":
            p.add_argument("--checkpoint", help="ANSG checkpoint (sets pipeline.checkpoint)")
        if name == "eval":
            p.add_argument("--pred", required=True, help="probability ZSTK written by infer")
    return parser


def effective_config(args):
    cfg = C.load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    if getattr(args, "input", None):
        cfg["data"]["path"] = args.input
    if getattr(args, "mode", None):
        cfg["training"]["mode"] = args.mode
    if getattr(args, "iters", None) is not None:
        cfg["training"]["iterations"] = args.iters
    if getattr(args, "init_checkpoint", None):
        cfg["training"]["init_checkpoint"] = args.init_checkpoint
    if getattr(args, "checkpoint", None):
        cfg["pipeline"]["checkpoint"] = args.checkpoint
    return cfg


def write_manifest(out, command, cfg):
    doc = dict(cfg)
    doc[C.MANIFEST_KEY] = {"command": command, "version": __version__}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _split(params):
    fcn = {k: v for k, v in params.items() if k.startswith("fcn.")}
    rnn = {k: v for k, v in params.items() if k.startswith("rnn.")}
    return fcn, rnn


def _checked_stack_config(cfg):
    sc = C.stack_config(cfg)
    if sc.in_channels != cfg["fcn"]["out_channels"]:
        raise ConfigError(
            f"BDC-LSTM stack expects {sc.in_channels} input channels but kU-Net emits "
            f"{cfg['fcn']['out_channels']} (fcn.out_channels)"
        )
    return sc


def cmd_gen_data(cfg, out):
    stack = C.load_stack(dict(cfg, data=dict(cfg["data"], path=None)))
    path = out / "stack.zstk"
    D.write_stack(stack, path)
    fg = float(stack.labels.mean())
    print(f"wrote {path} ({'x'.join(map(str, stack.image.shape))}, foreground fraction {fg:.4f})")


def cmd_train(cfg, out):
    mode = cfg["training"]["mode"]
    stack = C.load_stack(cfg)
    kcfg = C.kunet_config(cfg)
    tcfg = C.train_config(cfg)
    sc = _checked_stack_config(cfg) if mode != "fcn_only" else None
    fcn_params = rnn_params = None
    init = cfg["training"]["init_checkpoint"]
    if init is not None:
        params, _ = TR.read_checkpoint(init)
        fcn_params, rnn_params = _split(params)
        fcn_params, rnn_params = fcn_params or None, rnn_params or None
    if mode == "rnn_only" and fcn_params is None:
        raise ConfigError("rnn_only training needs training.init_checkpoint with trained kU-Net parameters")
    res = TR.train_loop(tcfg, stack, mode, kcfg, stack_cfg=sc, pcfg=C.pipeline_config(cfg),
                        seed=cfg["seed"], fcn_params=fcn_params, rnn_params=rnn_params)
    params = dict(res.fcn_params)
    if res.rnn_params is not None:
        params.update(res.rnn_params)
    for it, states in res.checkpoints:
        TR.write_checkpoint(out / f"checkpoint_{it:06d}.ansg", params_at(states, params), states)
    TR.write_checkpoint(out / "checkpoint.ansg", params, res.states)
    TR.write_loss_csv(res.trace, out / "loss.csv")
    if res.trace:
        print(f"{mode}: {len(res.trace)} iterations, loss {res.trace[0][2]:.6f} -> {res.trace[-1][2]:.6f}")
    print(f"wrote {out / 'checkpoint.ansg'}")


def params_at(states, fallback):
    params = dict(fallback)
    for st in states.values():
        params.update(st.params)
    return params


def cmd_infer(cfg, out):
    ckpt = cfg["pipeline"]["checkpoint"]
    if ckpt is None:
        raise ConfigError("infer needs a checkpoint (--checkpoint or pipeline.checkpoint)")
    params, _ = TR.read_checkpoint(ckpt)
    fcn_params, rnn_params = _split(params)
    stack = C.load_stack(cfg)
    kcfg = C.kunet_config(cfg)
    sc = _checked_stack_config(cfg) if rnn_params else None
    prob = P.segment_stack(stack, fcn_params, kcfg, rnn_params or None, sc, C.pipeline_config(cfg))
    fg = prob[:, 1]
    if not np.all(np.isfinite(fg)):
        raise NumericError("non-finite probabilities")
    result = D.ImageStack(fg.astype(np.float32), stack.voxel_scale, stack.labels, stack.mask)
    D.write_stack(result, out / "prob.zstk")
    for z in range(result.n_slices):
        D.write_pgm(fg[z], out / f"prob_z{z:03d}.pgm")
    which = "kU-Net + BDC-LSTM" if rnn_params else "kU-Net"
    print(f"{which}: wrote {out / 'prob.zstk'} and {result.n_slices} PGM previews")


def cmd_eval(cfg, out, pred_path):
    pred = D.read_stack(pred_path)
    if cfg["data"]["path"] is not None or pred.labels is None:
        truth = C.load_stack(cfg)
    else:
        truth = pred
    if truth.labels is None:
        raise ConfigError("evaluation needs a labeled stack")
    if truth.labels.shape != pred.image.shape:
        raise ConfigError(f"prediction {pred.image.shape} and labels {truth.labels.shape} differ in shape")
    m = cfg["metrics"]
    mask = truth.mask
    pe = M.pixel_error(pred.image, truth.labels, mask)
    seg = M.segment_from_prob(pred.image, m["threshold"], m["connectivity"])
    gt = M.connected_components(truth.labels, m["connectivity"])
    if mask is not None:
        sel = mask > 0
        seg, gt = seg[sel], gt[sel]
    vr, vi = M.rand_score_foreground(seg, gt), M.info_score(seg, gt)
    row = f"{Path(pred_path).stem},{pe!r},{vr!r},{vi!r}"
    (out / "metrics.csv").write_text("stack,pixel_error,v_rand,v_info\n" + row + "\n")
    print("stack,pixel_error,v_rand,v_info")
    print(row)


def cmd_gradcheck(cfg, out):
    reports = G.run_suite(seed=cfg["seed"] % 2**32)
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(reports)} gradient checks passed")


def cmd_shapes(cfg, out):
    sc = C.stack_config(cfg)
    chain = R.shape_chain(sc)
    print(R.format_chain(chain))
    out_extent = chain[-1][1]
    margin = R.stack_margin(sc, out_extent)
    print(f"margin {margin}: a W×H output tile needs a (W+{margin})×(H+{margin}) input window")


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = write_manifest(out, args.command, cfg)
        log.info("effective config: %s", json.dumps(cfg, sort_keys=True))
        log.info("manifest: %s", manifest)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "infer":
            cmd_infer(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.pred)
        elif args.command == "gradcheck":
            cmd_gradcheck(cfg, out)
        elif args.command == "shapes":
            cmd_shapes(cfg, out)
    except NumericError as exc:
        print(f"ansg: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (AnsgError, OSError) as exc:
        print(f"ansg: error: {exc}", file=sys.stderr)
        return 1
    return 0
