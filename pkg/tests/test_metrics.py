import numpy as np
import pytest
from hypothesis import given, strategies as st

from ansg import metrics as M
from ansg.errors import UsageError
import oracles as O

labelings = st.lists(st.integers(0, 3), min_size=2, max_size=9)


def test_pixel_error_examples():
    assert M.pixel_error(np.array([1.0, 0.0]), np.array([1, 0])) == 0.0
    assert M.pixel_error(np.full(5, 0.5), np.array([1, 0, 1, 1, 0])) == 0.5
    assert M.pixel_error(np.array([0.8, 0.3]), np.array([1, 0])) == pytest.approx(0.25, abs=1e-15)
    assert M.pixel_error(np.array([0.8, 0.3]), np.array([1, 0]), mask=np.array([0, 1])) == pytest.approx(0.3)
    with pytest.raises(UsageError):
        M.pixel_error(np.zeros(2), np.zeros(2), mask=np.zeros(2))


@given(seed=st.integers(0, 2**16), t=st.floats(0, 1))
def test_pixel_error_monotone_toward_label(seed, t):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 20)
    p = rng.random(20)
    q = p + t * (y - p)
    assert M.pixel_error(q, y) <= M.pixel_error(p, y) + 1e-15


def test_connected_components_examples():
    assert not M.connected_components(np.zeros((3, 3))).any()
    diag = np.array([[1, 0], [0, 1]])
    assert M.connected_components(diag, 4).max() == 2
    assert M.connected_components(diag, 8).max() == 1
    a = np.array([[0, 1, 0, 1], [0, 1, 0, 0], [1, 0, 0, 1]])
    lab = M.connected_components(a, 4)
    assert lab[0, 1] == 1 and lab[0, 3] == 2 and lab[2, 0] == 3 and lab[2, 3] == 4
    np.testing.assert_array_equal(M.canonicalize(lab), lab)
    with pytest.raises(UsageError):
        M.connected_components(a, 6)


def test_connected_components_3d_uses_face_or_full_adjacency():
    v = np.zeros((2, 2, 2))
    v[0, 0, 0] = v[1, 1, 1] = 1
    assert M.connected_components(v, 4).max() == 2
    assert M.connected_components(v, 8).max() == 1


@given(st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_canonicalize_idempotent_with_first_occurrence_order(ids):
    c = M.canonicalize(np.array(ids))
    np.testing.assert_array_equal(M.canonicalize(c), c)
    firsts = [v for k, v in enumerate(c) if v and v not in c[:k]]
    assert firsts == list(range(1, len(firsts) + 1))


def test_four_pixel_worked_example():
    gt = np.array([1, 1, 2, 2])
    pred = np.array([1, 1, 1, 1])
    assert O.rand_pairs(pred, gt) == (2, 6, 2)
    assert M.rand_counts(pred, gt) == (2, 6, 2)
    assert M.rand_score_foreground(pred, gt) == 0.5
    # frozen from the entropy oracle: H(P) = 0, I = 0
    assert O.info_f(pred, gt) == 0.0
    assert M.info_score(pred, gt) == 0.0


def test_identical_and_independent_partitions():
    gt = np.array([1, 1, 2, 2, 3, 3])
    assert M.rand_score_foreground(gt * 7, gt) == 1.0
    assert M.info_score(gt + 4, gt) == pytest.approx(1.0, abs=1e-15)
    a = np.array([1, 1, 2, 2])
    b = np.array([1, 2, 1, 2])
    assert M.info_score(a, b) == pytest.approx(0.0, abs=1e-15)
    one = np.ones(4, int)
    assert M.info_score(one, one) == 1.0


def test_no_foreground_is_usage_error():
    with pytest.raises(UsageError):
        M.rand_score_foreground(np.ones(3), np.zeros(3))


@given(pred=labelings, gt=labelings, perm=st.permutations([1, 2, 3, 4]))
def test_scores_match_oracles_and_are_permutation_invariant(pred, gt, perm):
    n = min(len(pred), len(gt))
    pred, gt = np.array(pred[:n]), np.array(gt[:n])
    if not gt.any():
        return
    assert M.rand_counts(pred, gt) == O.rand_pairs(pred, gt)
    vr = M.rand_score_foreground(pred, gt)
    vi = M.info_score(pred, gt)
    assert vr == O.rand_f(*O.rand_pairs(pred, gt))
    assert abs(vi - O.info_f(pred, gt)) < 1e-12
    assert 0 <= vr <= 1 and 0 <= vi <= 1
    mapping = np.array([0] + list(perm))
    assert M.rand_score_foreground(mapping[pred], mapping[gt]) == vr
    assert abs(M.info_score(mapping[pred], mapping[gt]) - vi) < 1e-12


@given(pred=labelings, gt=labelings)
def test_score_one_iff_identical_partitions(pred, gt):
    n = min(len(pred), len(gt))
    pred, gt = np.array(pred[:n]), np.array(gt[:n])
    if not gt.any():
        return
    fg = gt != 0
    same = len(set(zip(pred[fg], gt[fg]))) == len(set(pred[fg])) == len(set(gt[fg]))
    assert (M.rand_score_foreground(pred, gt) == 1.0) == same
    assert (abs(M.info_score(pred, gt) - 1.0) < 1e-12) == same


def test_evaluate_with_mask():
    label = np.zeros((2, 6, 6))
    label[:, 1:3, 1:3] = 1
    label[:, 4:6, 4:6] = 1
    prob = label * 0.9
    mask = np.zeros_like(label)
    mask[1] = 1
    pe, vr, vi = M.evaluate(prob, label, mask)
    assert pe == pytest.approx(0.1 * label[1].sum() / 36)
    assert vr == 1.0 and vi == pytest.approx(1.0)
