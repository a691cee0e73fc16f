"""Train a small kU-Net on one phantom and score it on another."""
import numpy as np

from ansg import data as D
from ansg import fcn as F
from ansg import metrics as M
from ansg import pipeline as P
from ansg import training as TR

train = D.generate_phantom(D.PhantomConfig(seed=0))
held = D.generate_phantom(D.PhantomConfig(seed=1))
kcfg = F.KUNetConfig(k=2, fusion="A", unet=F.UNetConfig(depth=2, base_channels=8, out_channels=8))


def report(tag, params):
    prob = P.segment_stack(held, params, kcfg)[:, 1]
    pe, vr, vi = M.evaluate(prob, held.labels)
    print(f"{tag:>9s}: pixel error {pe:.3f}  V_rand {vr:.3f}  V_info {vi:.3f}")


report("untrained", TR.init_params(F.fcn_param_spec(kcfg), 0))


def progress(it, loss, window=[]):
    window.append(loss)
    if (it + 1) % 100 == 0:
        print(f"  iteration {it + 1}: mean loss {np.mean(window[-100:]):.4f}")


res = TR.train_loop(TR.TrainConfig(iterations=500), train, "fcn_only", kcfg, seed=0, callback=progress)
report("trained", res.fcn_params)

# the other fusion variants build and run with the same interface
for fusion in "BCD":
    cfg = F.KUNetConfig(k=2, fusion=fusion, unet=kcfg.unet)
    feats = F.kunet_forward(train.slice(0), TR.init_params(F.fcn_param_spec(cfg), 0), cfg)
    print(f"fusion {fusion}: features {feats.shape}")
