"""Pixel error and the two foreground-restricted segmentation scores."""
import numpy as np

from ansg import metrics as M

gt = np.array([1, 1, 2, 2])
merged = np.array([1, 1, 1, 1])
print("merge two objects:  V_rand", M.rand_score_foreground(merged, gt), " V_info", M.info_score(merged, gt))
print("identical:          V_rand", M.rand_score_foreground(gt, gt), " V_info", M.info_score(gt, gt))

# a small grid: a diagonal touch is one object with 8-connectivity, two with 4
mask = np.array([[1, 1, 0, 0],
                 [1, 1, 0, 0],
                 [0, 0, 1, 1],
                 [0, 0, 1, 1]])
truth = M.connected_components(mask, 4)
for conn in (4, 8):
    seg = M.connected_components(mask, conn)
    print(f"{conn}-connected: {seg.max()} object(s), V_rand {M.rand_score_foreground(seg, truth):.3f}, "
          f"V_info {M.info_score(seg, truth):.3f}")

prob = np.clip(mask + np.random.default_rng(0).normal(0, 0.3, mask.shape), 0, 1)
print("noisy probabilities: pixel error %.3f, V_rand %.3f, V_info %.3f" % M.evaluate(prob, mask))
