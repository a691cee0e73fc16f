"""Finite-difference check of every differentiable piece, then a hand-built one."""
import numpy as np

from ansg import autograd as ag
from ansg import gradcheck as G

G.run_suite(seed=0)

# the same machinery works for any scalar function of named parameters
rng = np.random.default_rng(0)
params = {"w": rng.normal(size=(2, 3, 3, 3)), "x": rng.normal(size=(3, 6, 6))}


def f(p):
    y = ag.tanh(ag.conv2d(p["x"], p["w"], None, "same"))
    return ag.sum(ag.mul(y, y))


print("custom:", ag.finite_diff_check(f, params, tol=1e-4).format())
