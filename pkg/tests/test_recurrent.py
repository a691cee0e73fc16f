import numpy as np
import pytest
from hypothesis import given, strategies as st

from ansg import autograd as ag
from ansg import recurrent as R
from ansg.errors import ConfigError, DimensionError, UsageError
from oracles import lstm_textbook

V = ag.value

FULL_CHAIN = "64×126×126 → 64×118×118 → 64×59×59 → 64×51×51 → 64×102×102 → 64×100×100 → 2×100×100"


def _lstm(rng, n_in, hidden, scale=1.0):
    return {k: rng.uniform(-scale, scale, s) for k, s in R.param_shapes_lstm(n_in, hidden).items()}


def _as_clstm(p):
    """Reinterpret vector LSTM weights as 1x1 ConvLSTM kernels."""
    out = {}
    for k, v in p.items():
        out[k] = v.T[:, :, None, None] if k.startswith("W_") else v
    return out


def test_lstm_step_matches_textbook(rng):
    p = _lstm(rng, 3, 5)
    x, h, c = rng.normal(size=3), rng.normal(size=5), rng.normal(size=5)
    st_ = R.lstm_step(x, R.CellState(c, h), R.LSTMParams(**p))
    c2, h2 = lstm_textbook(x, h, c, p)
    np.testing.assert_allclose(V(st_.c), c2, rtol=1e-13)
    np.testing.assert_allclose(V(st_.h), h2, rtol=1e-13)


def test_lstm_gate_saturation_preserves_cell(rng):
    p = _lstm(rng, 2, 3)
    p["b_f"] = np.full(3, 60.0)
    p["b_i"] = np.full(3, -60.0)
    c = rng.normal(size=3)
    st_ = R.lstm_step(rng.normal(size=2), R.CellState(c, rng.normal(size=3)), R.LSTMParams(**p))
    np.testing.assert_allclose(V(st_.c), c, atol=1e-12)


def test_lstm_rejects_bad_shapes(rng):
    p = R.LSTMParams(**_lstm(rng, 2, 3))
    with pytest.raises(DimensionError):
        R.lstm_step(np.zeros(4), R.zero_state(3, float), p)


@given(seed=st.integers(0, 2**31 - 1), n_in=st.integers(1, 4), hidden=st.integers(1, 4))
def test_clstm_on_1x1_equals_lstm_bitwise(seed, n_in, hidden):
    rng = np.random.default_rng(seed)
    p = _lstm(rng, n_in, hidden)
    x, h, c = rng.normal(size=n_in), rng.normal(size=hidden), rng.normal(size=hidden)
    a = R.lstm_step(x, R.CellState(c, h), R.LSTMParams(**p))
    b = R.clstm_step(x[:, None, None], R.CellState(c[:, None, None], h[:, None, None]),
                     R.ConvLSTMParams(**_as_clstm(p)))
    assert np.array_equal(V(a.h), V(b.h)[:, 0, 0]) and np.array_equal(V(a.c), V(b.c)[:, 0, 0])


def test_clstm_valid_shrinks_and_misaligned_state(rng):
    p = R.ConvLSTMParams(**{k: rng.normal(size=s) for k, s in R.param_shapes_clstm(2, 3, 3).items()})
    x = rng.normal(size=(2, 7, 7))
    st_ = R.clstm_step(x, R.zero_state((3, 5, 5), float), p, padding="valid")
    assert st_.h.shape == (3, 5, 5)
    with pytest.raises(DimensionError, match="align"):
        R.clstm_step(x, R.zero_state((3, 7, 7), float), p, padding="valid")
    with pytest.raises(DimensionError, match="channels"):
        R.clstm_step(rng.normal(size=(3, 7, 7)), R.zero_state((3, 7, 7), float), p)


def test_bdclstm_concatenates_forward_then_backward(rng):
    shapes = R.param_shapes_clstm(2, 3, 3)
    fwd = R.ConvLSTMParams(**{k: rng.normal(size=s) * 0.3 for k, s in shapes.items()})
    bwd = R.ConvLSTMParams(**{k: rng.normal(size=s) * 0.3 for k, s in shapes.items()})
    seq = [rng.normal(size=(2, 5, 5)) for _ in range(4)]
    out = R.bdclstm_forward(seq, fwd, bwd)
    hf = R.clstm_scan(seq, fwd)
    hb = R.clstm_scan(seq[::-1], bwd)[::-1]
    for z in range(4):
        assert out[z].shape == (6, 5, 5)
        np.testing.assert_array_equal(V(out[z])[:3], V(hf[z]))
        np.testing.assert_array_equal(V(out[z])[3:], V(hb[z]))
    with pytest.raises(UsageError):
        R.bdclstm_forward([], fwd, bwd)


def test_single_slice_both_directions_see_the_same_input(rng):
    shapes = R.param_shapes_clstm(1, 2, 3)
    p = {k: rng.normal(size=s) for k, s in shapes.items()}
    x = [rng.normal(size=(1, 4, 4))]
    out = R.bdclstm_forward(x, R.ConvLSTMParams(**p), R.ConvLSTMParams(**p))
    np.testing.assert_array_equal(V(out[0])[:2], V(out[0])[2:])


def test_full_shape_chain_and_margin():
    cfg = R.full_stack()
    assert R.format_chain(R.shape_chain(cfg)) == FULL_CHAIN
    assert R.stack_margin(cfg, 100) == 26
    assert R.input_extent_for(cfg, 100) == 126


def test_reduced_and_desk_stacks():
    red = R.reduced_stack()
    assert R.format_chain(R.shape_chain(red)) == "4×20×20 → 16×16×16 → 16×8×8 → 16×4×4 → 16×8×8 → 16×6×6 → 2×6×6"
    assert R.stack_margin(R.desk_stack(), 24) == 26


@given(t=st.integers(1, 60))
def test_margin_is_constant_for_every_even_tile(t):
    cfg = R.desk_stack()
    assert R.output_extent(cfg, 2 * t + 26) == 2 * t


def test_odd_extent_rejected_with_chain():
    cfg = R.full_stack()
    with pytest.raises(DimensionError, match="expected chain 64×126×126"):
        R.deep_bdclstm_forward([np.zeros((64, 127, 127))], cfg, {})


def test_stack_dict_roundtrip():
    cfg = R.full_stack()
    assert R.stack_from_dict(R.stack_to_dict(cfg)) == cfg
    with pytest.raises(ConfigError):
        R.stack_from_dict({"in_channels": 1, "layers": [{"type": "attention"}]})


def test_param_names_and_count():
    shapes = R.stack_param_shapes(R.reduced_stack(), "rnn")
    assert "rnn.L1.fwd.W_xi" in shapes and "rnn.L2.bwd.b_o" in shapes
    assert shapes["rnn.L1.fwd.W_xi"] == (8, 4, 3, 3)
    assert shapes["rnn.L2.fwd.W_xi"] == (8, 16, 3, 3)  # second layer reads the 2x8 concat
    assert sum(np.prod(s) for s in shapes.values()) == 52034


def _params(cfg, rng, scale=0.2):
    return {k: rng.uniform(-scale, scale, s) for k, s in R.stack_param_shapes(cfg).items()}


def test_eval_mode_is_deterministic_and_train_needs_rng(rng):
    cfg = R.reduced_stack()
    p = _params(cfg, rng)
    seq = [rng.normal(size=(4, 20, 20)) for _ in range(3)]
    a = [V(o) for o in R.deep_bdclstm_forward(seq, cfg, p)]
    b = [V(o) for o in R.deep_bdclstm_forward(seq, cfg, p)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (2, 6, 6)
    with pytest.raises(UsageError):
        R.deep_bdclstm_forward(seq, cfg, p, mode="train")
    t = R.deep_bdclstm_forward(seq, cfg, p, mode="train", rng=np.random.default_rng(0))
    assert not np.array_equal(ag.value(t[0]), a[0])


def test_inverted_dropout_preserves_mean():
    x = [np.ones((1, 200, 200))]
    out = V(R._dropout(x, 0.5, np.random.default_rng(0))[0])
    vals = np.unique(out)
    np.testing.assert_array_equal(vals, [0.0, 2.0])
    assert abs(out.mean() - 1.0) < 0.02
