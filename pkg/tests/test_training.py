import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from ansg import autograd as ag
from ansg import data as D
from ansg import fcn as F
from ansg import pipeline as P
from ansg import recurrent as R
from ansg import training as TR
from ansg.errors import ConfigError, DimensionError, FormatError, NumericError


# loss -----------------------------------------------------------------------------------

def test_wce_closed_forms(rng):
    lab = rng.integers(0, 2, size=(4, 5))
    perfect = np.stack([1.0 - lab, lab.astype(float)])
    assert float(ag.value(TR.weighted_cross_entropy(perfect, lab, np.ones((4, 5))))) == 0.0
    half = np.full((2, 4, 5), 0.5)
    assert math.isclose(float(ag.value(TR.weighted_cross_entropy(half, lab, np.ones((4, 5))))), math.log(2),
                        rel_tol=1e-15)
    p = rng.dirichlet([1, 1], size=(4, 5)).transpose(2, 0, 1)
    w = rng.uniform(0.5, 2, size=(4, 5))
    one = float(ag.value(TR.weighted_cross_entropy(p, lab, w)))
    two = float(ag.value(TR.weighted_cross_entropy(p, lab, 2 * w)))
    assert two == 2 * one


def test_wce_clamps_zero_probability():
    p = np.zeros((2, 1, 1))
    p[0] = 1.0
    loss = ag.value(TR.weighted_cross_entropy(p, np.ones((1, 1), int), np.ones((1, 1))))
    assert math.isclose(float(loss), -math.log(TR.PROB_FLOOR))


def test_wce_gradient_through_softmax(rng):
    lab = rng.integers(0, 2, size=(5, 5))
    w = rng.uniform(0.5, 4, size=(5, 5))
    rep = ag.finite_diff_check(lambda p: TR.weighted_cross_entropy(ag.softmax_channels(p["z"]), lab, w),
                               {"z": rng.normal(size=(2, 5, 5))})
    assert rep.passed, rep.format()


def test_wce_errors():
    with pytest.raises(DimensionError):
        TR.weighted_cross_entropy(np.full((2, 3, 3), 0.5), np.zeros((3, 4), int), np.ones((3, 4)))
    with pytest.raises(NumericError):
        TR.weighted_cross_entropy(np.full((2, 1, 1), np.nan), np.zeros((1, 1), int), np.ones((1, 1)))


# weight maps ----------------------------------------------------------------------------

def _weight_oracle(label, w0=10.0, sigma=5.0):
    comps, k = ndimage.label(label)
    h, w = label.shape
    out = TR.class_weights(label)
    if k < 2:
        return out
    pts = [np.argwhere(comps == i) for i in range(1, k + 1)]
    for r in range(h):
        for c in range(w):
            d = sorted(np.min(np.hypot(p[:, 0] - r, p[:, 1] - c)) for p in pts)
            out[r, c] += w0 * math.exp(-((d[0] + d[1]) ** 2) / (2 * sigma ** 2))
    return out


def test_weight_map_matches_distance_oracle(rng):
    lab = np.zeros((14, 15))
    lab[2:5, 2:6] = 1
    lab[8:12, 3:5] = 1
    lab[4:7, 10:13] = 1
    np.testing.assert_allclose(TR.compute_weight_map(lab), _weight_oracle(lab), rtol=1e-12)


def test_weight_map_boundary_between_close_components():
    lab = np.zeros((40, 60))
    lab[:, 10:20] = 1
    lab[:, 22:32] = 1  # two components 2 pixels apart
    w = TR.compute_weight_map(lab)
    mid = w[20, 21]
    comps, _ = ndimage.label(lab)
    far = ndimage.distance_transform_edt(comps != 2) >= 10
    assert mid > w[far & (lab == 0)].max()


def test_weight_map_far_field_and_degenerate_labels():
    lab = np.zeros((90, 90))
    lab[5:8, 5:8] = 1
    lab[80:83, 80:83] = 1
    w = TR.compute_weight_map(lab)
    comps, _ = ndimage.label(lab)
    d = np.sort(np.stack([ndimage.distance_transform_edt(comps != i) for i in (1, 2)]), axis=0)
    far = d[0] + d[1] >= 10 * 5 / math.sqrt(2)
    assert far.any()
    assert np.max(np.abs(w - TR.class_weights(lab))[far]) < 1e-8
    empty = TR.compute_weight_map(np.zeros((6, 6)))
    np.testing.assert_array_equal(empty, np.ones((6, 6)))
    single = np.zeros((6, 6))
    single[2:4, 2:4] = 1
    np.testing.assert_array_equal(TR.compute_weight_map(single), TR.class_weights(single))
    assert np.all(w > 0) and np.all(np.isfinite(w))


def test_class_weights_balance_total_mass():
    lab = np.zeros((10, 10))
    lab[:2] = 1
    w = TR.class_weights(lab)
    assert math.isclose(w[lab == 1].sum(), w[lab == 0].sum())
    assert math.isclose(w.mean(), 1.0)


# optimizers -----------------------------------------------------------------------------

def _state(hyper, value=0.0):
    return TR.TrainState({"p": np.array([value])}, hyper)


def test_adam_one_step_hand_value():
    st_ = TR.adam_step(_state(TR.ADAM), {"p": np.array([1.0])})
    expected = -5e-5 * (1.0 / (1.0 + 1e-10))
    assert abs(st_.params["p"][0] - expected) < 1e-9
    assert abs(st_.params["p"][0] - (-5e-5)) < 1e-9
    assert st_.iteration == 1


def test_rmsprop_one_step_hand_value():
    st_ = TR.rmsprop_step(_state(TR.RMSPROP), {"p": np.array([1.0])})
    expected = -1e-3 / math.sqrt(0.1 + 1e-5)
    assert abs(st_.params["p"][0] - expected) < 1e-9
    assert abs(expected - (-3.1621e-3)) < 1e-7


def test_zero_gradient_decays_moments():
    st_ = _state(TR.ADAM, 0.3)
    st_.moments["m"]["p"][:] = 1.0
    st_.moments["v"]["p"][:] = 1.0
    TR.adam_step(st_, {"p": np.zeros(1)})
    assert st_.moments["m"]["p"][0] == 0.9
    assert st_.moments["v"]["p"][0] == 0.999
    r = _state(TR.RMSPROP, 0.3)
    TR.rmsprop_step(r, {"p": np.zeros(1)})
    assert r.params["p"][0] == 0.3


def test_fresh_adam_zero_gradient_is_exact_noop():
    st_ = _state(TR.ADAM, 0.3)
    TR.adam_step(st_, {"p": np.zeros(1)})
    assert st_.params["p"][0] == 0.3


def test_full_hyperparameters():
    assert (TR.ADAM.beta1, TR.ADAM.beta2, TR.ADAM.epsilon, TR.ADAM.base_lr) == (0.9, 0.999, 1e-10, 5e-5)
    assert (TR.RMSPROP.alpha, TR.RMSPROP.epsilon, TR.RMSPROP.base_lr) == (0.9, 1e-5, 1e-3)


def test_optimizer_shape_mismatch():
    with pytest.raises(DimensionError):
        TR.adam_step(_state(TR.ADAM), {"p": np.zeros(2)})


def test_hyper_validation():
    with pytest.raises(ConfigError):
        TR.OptimizerHyper(beta1=1.0)
    with pytest.raises(ConfigError):
        TR.OptimizerHyper(epsilon=0)
    with pytest.raises(ConfigError):
        TR.OptimizerHyper(kind="sgd")


def test_lr_schedule_values():
    assert TR.lr_schedule(0) == 1e-3
    assert TR.lr_schedule(1999) == 1e-3
    assert TR.lr_schedule(4000) == 2.5e-4
    assert TR.lr_schedule(14000) == 1e-5
    assert 1e-3 * 2.0 ** -7 == 7.8125e-6


@given(a=st.integers(0, 10**6), b=st.integers(0, 10**6))
def test_lr_schedule_monotone_with_exact_floor(a, b):
    lo, hi = min(a, b), max(a, b)
    assert TR.lr_schedule(hi) <= TR.lr_schedule(lo)
    assert TR.lr_schedule(hi) >= 1e-5
    if hi >= 14000:
        assert TR.lr_schedule(hi) == 1e-5


def test_clip():
    out = TR.clip_gradients({"g": np.array([7.0, -6.0, 3.0])})
    np.testing.assert_array_equal(out["g"], [5.0, -5.0, 3.0])
    np.testing.assert_array_equal(TR.clip_gradients(out)["g"], out["g"])
    with pytest.raises(NumericError):
        TR.clip_gradients({"g": np.array([np.nan])})


# init -----------------------------------------------------------------------------------

def test_init_distributions():
    spec = {"conv.w": ((200, 8, 3, 3), "he"), "conv.b": ((200,), "zero"), "rnn.x": ((50, 50), "uniform"),
            "up.w": ((4, 32, 2, 2), "he_deconv")}
    p = TR.init_params(spec, 0, np.float64)
    assert abs(p["conv.w"].std() / math.sqrt(2 / 72) - 1) < 0.1
    assert np.all(p["conv.b"] == 0)
    assert p["rnn.x"].min() >= -0.02 and p["rnn.x"].max() <= 0.02
    assert abs(p["up.w"].std() / math.sqrt(2 / 32) - 1) < 0.15
    q = TR.init_params(spec, 0, np.float64)
    assert all(np.array_equal(p[k], q[k]) for k in spec)
    r = TR.init_params(spec, 1, np.float64)
    assert not np.array_equal(p["conv.w"], r["conv.w"])


def test_init_streams_are_per_parameter():
    a = TR.init_params({"x": ((5,), "he")}, 3)
    b = TR.init_params({"other": ((7,), "he"), "x": ((5,), "he")}, 3)
    np.testing.assert_array_equal(a["x"], b["x"])


def test_every_rnn_parameter_in_range():
    p = TR.init_params(TR.rnn_param_spec(R.full_stack()), 0)
    assert max(np.abs(v).max() for v in p.values()) <= 0.02


# augmentation ---------------------------------------------------------------------------

def _expected_coord(r, c, n, k):
    if k >= 4:
        c = n - 1 - c
    for _ in range(k % 4):
        r, c = n - 1 - c, r
    return r, c


@pytest.mark.parametrize("k", range(8))
def test_dihedral_coordinate_oracle(k):
    n = 7
    r, c = 1, 5
    img = np.zeros((1, n, n))
    img[0, r, c] = 1
    lab = img[0].copy()
    out_img = TR.dihedral(img, k)
    out_lab = TR.dihedral(lab, k)
    assert tuple(np.argwhere(out_img[0])[0]) == _expected_coord(r, c, n, k)
    assert tuple(np.argwhere(out_lab)[0]) == _expected_coord(r, c, n, k)
    np.testing.assert_array_equal(TR.dihedral_inverse(out_img, k), img)


def test_group_laws(rng):
    x = rng.normal(size=(2, 5, 5))
    y = x
    for _ in range(4):
        y = TR.dihedral(y, 1)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(TR.dihedral(x, 0), x)
    images = {TR.dihedral(x, k).tobytes() for k in range(8)}
    assert len(images) == 8


def test_augment_applies_one_transform_to_all(rng):
    img = rng.normal(size=(1, 6, 6))
    lab = (img[0] > 0).astype(float)
    w = rng.uniform(size=(6, 6))
    (a, b, c), k = TR.augment((img, lab, w), np.random.default_rng(4))
    np.testing.assert_array_equal(b, (a[0] > 0).astype(float))
    np.testing.assert_array_equal(c, TR.dihedral(w, k))


def test_augment_non_square_rotation_is_config_error():
    rng = np.random.default_rng(0)
    ks = []
    with pytest.raises(ConfigError, match="square"):
        for _ in range(50):
            _, k = TR.augment((np.zeros((1, 4, 6)),), rng)
            ks.append(k)
    assert all(k % 2 == 0 for k in ks)


# training loop --------------------------------------------------------------------------

KCFG = F.KUNetConfig(k=2, unet=F.UNetConfig(depth=2, base_channels=4, out_channels=4))


@pytest.fixture(scope="module")
def small_stack():
    return D.generate_phantom(D.PhantomConfig(extents=(4, 16, 16), radius_range=(2.0, 3.0), seed=5))


def test_zero_iterations_returns_initial_parameters(small_stack):
    res = TR.train_loop(TR.TrainConfig(iterations=0), small_stack, "fcn_only", KCFG, seed=2)
    init = TR.init_params(F.fcn_param_spec(KCFG), 2)
    assert res.trace == []
    assert all(np.array_equal(res.fcn_params[k], init[k]) for k in init)


def test_seeded_runs_are_bitwise_identical(small_stack):
    a = TR.train_loop(TR.TrainConfig(iterations=5), small_stack, "fcn_only", KCFG, seed=9)
    b = TR.train_loop(TR.TrainConfig(iterations=5), small_stack, "fcn_only", KCFG, seed=9)
    assert a.trace == b.trace
    assert all(np.array_equal(a.fcn_params[k], b.fcn_params[k]) for k in a.fcn_params)


def _rnn_setup():
    sc = R.build_stack(4, 2, 3, 4, nominal_input=20, dropout=0.5)
    return sc, P.PipelineConfig(tile=6)


def test_decoupled_training_never_touches_kunet(small_stack):
    sc, pc = _rnn_setup()
    fcn = TR.init_params(F.fcn_param_spec(KCFG), 0)
    frozen = {k: v.copy() for k, v in fcn.items()}
    res = TR.train_loop(TR.TrainConfig(iterations=3, rnn_tile=6), small_stack, "rnn_only", KCFG,
                        stack_cfg=sc, pcfg=pc, seed=1, fcn_params=fcn)
    assert set(res.states) == {"rnn"}
    assert all(k.startswith("rnn.") for k in res.states["rnn"].params)
    assert all(np.array_equal(res.fcn_params[k], frozen[k]) for k in frozen)
    assert res.states["rnn"].iteration == 3
    assert res.trace[0][1] == 1e-3


def test_end_to_end_updates_both(small_stack):
    sc, pc = _rnn_setup()
    fcn = TR.init_params(F.fcn_param_spec(KCFG), 0)
    res = TR.train_loop(TR.TrainConfig(iterations=2, rnn_tile=6), small_stack, "end_to_end", KCFG,
                        stack_cfg=sc, pcfg=pc, seed=1, fcn_params=fcn)
    assert set(res.states) == {"fcn", "rnn"}
    moved = [k for k in fcn if not np.array_equal(fcn[k], res.fcn_params[k])]
    assert any(k.startswith("fcn.u1.") for k in moved)
    assert not any(k.startswith("fcn.head.") for k in moved)


def test_divergence_reports_iteration(small_stack):
    bad = D.ImageStack(np.full_like(small_stack.image, np.nan), small_stack.voxel_scale, small_stack.labels)
    with pytest.raises(NumericError, match="iteration 0"):
        TR.train_loop(TR.TrainConfig(iterations=2), bad, "fcn_only", KCFG)


def test_rnn_modes_need_a_stack(small_stack):
    with pytest.raises(ConfigError):
        TR.train_loop(TR.TrainConfig(iterations=1), small_stack, "rnn_only", KCFG)
    with pytest.raises(ConfigError):
        TR.train_loop(TR.TrainConfig(iterations=1), small_stack, "joint", KCFG)


def test_checkpoint_intervals(small_stack):
    res = TR.train_loop(TR.TrainConfig(iterations=4, checkpoint_every=2), small_stack, "fcn_only", KCFG)
    assert [it for it, _ in res.checkpoints] == [2, 4]


def test_fixed_batch_adam_halves_loss():
    st_ = D.generate_phantom(D.PhantomConfig(extents=(1, 32, 32), n_tubes=3, seed=11))
    kcfg = F.KUNetConfig(k=2, unet=F.UNetConfig(depth=2, base_channels=8, out_channels=8))
    cfg = TR.TrainConfig(iterations=200, augment=False)
    res = TR.train_loop(cfg, st_, "fcn_only", kcfg, seed=0)
    w = TR.compute_weight_map(st_.labels[0])

    def loss(p):
        return float(ag.value(TR.weighted_cross_entropy(
            ag.softmax_channels(F.fcn_logits(st_.slice(0), p, kcfg)), st_.labels[0], w)))

    before = loss(TR.init_params(F.fcn_param_spec(kcfg), 0))
    after = loss(res.fcn_params)
    assert after < 0.5 * before, (before, after)


# checkpoint container -------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"fcn.a": rng.normal(size=(2, 3)).astype(np.float32), "rnn.b": np.zeros(4, np.float32),
              "s": np.array(1.5, np.float32)}
    st_ = TR.TrainState({k: v.copy() for k, v in params.items()}, TR.ADAM)
    TR.adam_step(st_, {"fcn.a": np.ones((2, 3), np.float32)})
    TR.write_checkpoint(tmp_path / "c.ansg", params, {"fcn": st_})
    back, opts = TR.read_checkpoint(tmp_path / "c.ansg")
    assert set(back) == set(params)
    for k in params:
        assert back[k].dtype == np.float32 and np.array_equal(back[k], params[k])
    kind, it, moments = opts["fcn"]
    assert kind == "adam" and it == 1
    np.testing.assert_array_equal(moments["m"]["fcn.a"], st_.moments["m"]["fcn.a"])
    raw = (tmp_path / "c.ansg").read_bytes()
    assert raw[:4] == b"ANSG"


def test_checkpoint_format_errors(tmp_path, rng):
    path = tmp_path / "c.ansg"
    TR.write_checkpoint(path, {"w": rng.normal(size=(3, 3))})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        TR.read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        TR.read_checkpoint(tmp_path / "short")
    with pytest.raises(Exception):
        TR.write_checkpoint(path, {"a": np.zeros(1, np.float32), "b": np.zeros(1)})


def test_loss_csv(tmp_path):
    TR.write_loss_csv([(0, 1e-3, 0.5), (1, 1e-3, 0.25)], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["iteration,lr,loss", "0,0.001,0.5", "1,0.001,0.25"]
