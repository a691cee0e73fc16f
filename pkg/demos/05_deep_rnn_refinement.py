"""Freeze a trained kU-Net and train the deep BDC-LSTM on its features.

Runs about two minutes on one core.
"""
from ansg import data as D
from ansg import fcn as F
from ansg import metrics as M
from ansg import pipeline as P
from ansg import recurrent as R
from ansg import training as TR

train = D.generate_phantom(D.PhantomConfig(seed=0))
held = D.generate_phantom(D.PhantomConfig(seed=1))
kcfg = F.KUNetConfig(k=2, unet=F.UNetConfig(depth=2, base_channels=8, out_channels=8))
stack = R.desk_stack(8, 8)
pcfg = P.PipelineConfig(rho=1, tile=48, margin=26)

fcn = TR.train_loop(TR.TrainConfig(iterations=500), train, "fcn_only", kcfg, seed=0).fcn_params
feats = P.extract_slice_features(held, fcn, kcfg)
pe_fcn = M.pixel_error(P.segment_stack(held, fcn, kcfg, features=feats)[:, 1], held.labels)
print(f"kU-Net alone: held-out pixel error {pe_fcn:.3f}")

# weights start wider than the full-size default so the narrow stack trains within 400 steps
cfg = TR.TrainConfig(iterations=400, rnn_tile=24, rnn_init_range=0.2)
res = TR.train_loop(cfg, train, "rnn_only", kcfg, stack_cfg=stack, pcfg=pcfg, seed=0, fcn_params=fcn)
print(f"RNN loss {res.trace[0][2]:.3f} -> {res.trace[-1][2]:.3f}")

for mode in ("window", "full"):
    p = P.PipelineConfig(rho=1, tile=48, margin=26, sequence_mode=mode)
    prob = P.segment_stack(held, fcn, kcfg, res.rnn_params, stack, p, features=feats)[:, 1]
    print(f"kU-Net + BDC-LSTM ({mode} mode): pixel error {M.pixel_error(prob, held.labels):.3f}")
