"""NMG loss, its gradient and the ordinal baseline."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stereosup import oracles
from stereosup.errors import DegenerateScale, InsufficientValidPixels
from stereosup.fields import MaskedField
from stereosup.nmg import NmgConfig, nmg_gradient, nmg_loss, nmg_scale, ordinal_loss, sample_ordinal_pairs

SMALL = NmgConfig((1, 3))


def test_scale_of_proportional_fields():
    q = np.random.default_rng(0).random((20, 20))
    assert nmg_scale(q, 2 * q, NmgConfig((2, 8))) == pytest.approx(2.0, rel=1e-14)


def test_constant_prediction_is_degenerate():
    with pytest.raises(DegenerateScale):
        nmg_scale(np.ones((10, 10)), np.random.default_rng(0).random((10, 10)), NmgConfig((2,)))


def test_two_by_two_hand_case():
    res = nmg_loss(np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[0.0, 2.0], [4.0, 6.0]]), NmgConfig((1,)))
    assert res.scale == 2.0
    assert res.total == 0.0
    assert res.pair_count == 4


def test_spacing_larger_than_grid_is_rejected():
    with pytest.raises(ValueError):
        nmg_loss(np.ones((8, 8)), np.ones((8, 8)), NmgConfig((8, 16)))


def test_oversized_spacings_contribute_nothing(rng):
    q, d = rng.random((12, 20)), rng.random((12, 20))
    a = nmg_loss(q, d, NmgConfig((2, 8, 16, 32)))
    total, count, _ = oracles.nmg_bruteforce(q, d, np.ones((12, 20), bool), (2, 8, 16, 32))
    assert a.pair_count == count
    assert a.total == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("shape,spacings", [((16, 16), (1, 2, 5)), ((32, 32), (2, 8)), ((9, 21), (1, 4))])
def test_scale_and_loss_match_brute_force(rng, shape, spacings):
    q, d = rng.random(shape), rng.random(shape)
    valid = rng.random(shape) > 0.2
    cfg = NmgConfig(spacings)
    res = nmg_loss(MaskedField(q, valid), MaskedField(d, valid), cfg)
    total, count, s = oracles.nmg_bruteforce(q, d, valid, spacings)
    assert res.scale == pytest.approx(s, rel=1e-12)
    assert res.total == pytest.approx(total, rel=1e-10)
    assert res.pair_count == count


def test_mask_of_either_field_removes_pairs(rng):
    q, d = rng.random((16, 16)), rng.random((16, 16))
    mq = rng.random((16, 16)) > 0.3
    md = rng.random((16, 16)) > 0.3
    res = nmg_loss(MaskedField(q, mq), MaskedField(d, md), SMALL)
    total, count, _ = oracles.nmg_bruteforce(q, d, mq & md, SMALL.spacings)
    assert res.pair_count == count
    assert res.total == pytest.approx(total, rel=1e-10)


def test_nan_values_are_treated_as_invalid(rng):
    q, d = rng.random((12, 12)), rng.random((12, 12))
    d[3, 4] = np.nan
    res = nmg_loss(q, d, SMALL)
    valid = np.ones((12, 12), bool)
    valid[3, 4] = False
    assert res.total == pytest.approx(oracles.nmg_bruteforce(q, np.nan_to_num(d), valid, SMALL.spacings)[0], rel=1e-12)


def test_mean_is_total_over_pairs(rng):
    res = nmg_loss(rng.random((10, 10)), rng.random((10, 10)), SMALL)
    assert res.mean == res.total / res.pair_count


@settings(max_examples=40, deadline=None)
@given(
    q=hnp.arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
    a=st.floats(0.1, 10),
    b=st.floats(-100, 100),
)
def test_affine_disparity_gives_zero_loss(q, a, b):
    if np.ptp(q) < 1e-3:
        return
    res = nmg_loss(q, a * q + b, SMALL)
    assert res.total <= 1e-9 * max(1.0, a)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(-1e3, 1e3), seed=st.integers(0, 2**31))
def test_constant_shift_of_disparity_is_exact(c, seed):
    rng = np.random.default_rng(seed)
    q, d = rng.random((12, 12)), rng.random((12, 12))
    # constants representable exactly keep the differences bit-identical
    c = float(np.float32(round(c)))
    assert nmg_loss(q, d + c, SMALL).total == pytest.approx(nmg_loss(q, d, SMALL).total, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.floats(0.01, 100))
def test_loss_invariant_to_prediction_scale(seed, k):
    rng = np.random.default_rng(seed)
    q, d = rng.random((12, 12)), rng.random((12, 12))
    assert nmg_loss(k * q, d, SMALL).total == pytest.approx(nmg_loss(q, d, SMALL).total, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_loss_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert nmg_loss(rng.normal(size=(10, 10)), rng.normal(size=(10, 10)), SMALL).total >= 0


def test_gradient_is_zero_at_affine_minimum(rng):
    q = rng.random((12, 12))
    np.testing.assert_array_equal(nmg_gradient(q, 3 * q + 7, SMALL), 0.0)


def test_gradient_matches_finite_differences(rng):
    q, d = rng.random((12, 12)), rng.random((12, 12))
    g = nmg_gradient(q, d, NmgConfig((2, 8)))
    num = oracles.nmg_fd_gradient(q, d, (2, 8))
    rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-6 * np.abs(num).max())
    assert rel.max() <= 1e-5


def test_gradient_vanishes_on_invalid_pixels(rng):
    q, d = rng.random((12, 12)), rng.random((12, 12))
    valid = np.ones((12, 12), bool)
    valid[5, 5] = valid[0, 11] = False
    g = nmg_gradient(MaskedField(q, valid), MaskedField(d, valid), SMALL)
    assert g[5, 5] == 0.0 and g[0, 11] == 0.0


def test_gradient_sums_to_zero(rng):
    # every pair adds +c and -c, so a constant shift of q leaves the loss unchanged
    g = nmg_gradient(rng.random((12, 12)), rng.random((12, 12)), SMALL)
    assert abs(g.sum()) < 1e-10


def test_gradient_orthogonal_to_prediction(rng):
    # loss is invariant to scaling q, so the directional derivative along q is zero
    q = rng.random((12, 12))
    g = nmg_gradient(q, rng.random((12, 12)), SMALL)
    assert abs((g * q).sum()) < 1e-9


def test_ordinal_hand_value():
    assert ordinal_loss(np.array([1.0, 0.0]), [(0, 1, 1)]) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)
    assert ordinal_loss(np.array([1.0, 0.0]), [(0, 1, 1)]) == pytest.approx(0.3132617, abs=1e-7)


def test_ordinal_equal_pair_and_asymptote():
    assert ordinal_loss(np.array([0.4, 0.4]), [(0, 1, 0)]) == 0.0
    assert ordinal_loss(np.array([0.5, 0.2]), [(0, 1, 0)]) == pytest.approx(0.09)
    assert ordinal_loss(np.array([800.0, 0.0]), [(0, 1, 1)]) == 0.0
    assert ordinal_loss(np.array([800.0, 0.0]), [(0, 1, -1)]) == pytest.approx(800.0)


def test_ordinal_rejects_bad_index():
    with pytest.raises(IndexError):
        ordinal_loss(np.zeros(3), [(0, 3, 1)])


def test_equal_disparity_gives_zero_labels():
    pairs = sample_ordinal_pairs(np.full((10, 10), 4.0), 200)
    assert pairs.shape == (200, 3)
    assert (pairs[:, 2] == 0).all()
    assert (pairs[:, 0] != pairs[:, 1]).all()


def test_pair_sampling_is_deterministic(rng):
    d = rng.random((20, 20))
    np.testing.assert_array_equal(sample_ordinal_pairs(d, 300, rng_seed=7), sample_ordinal_pairs(d, 300, rng_seed=7))


def test_doubled_pixel_is_ranked():
    d = MaskedField(np.array([[1.0, 2.0]]), np.ones((1, 2), bool))
    pairs = sample_ordinal_pairs(d, 20, 1.02, rng_seed=0)
    for i, j, label in pairs:
        assert label == (1 if i == 1 else -1)


def test_sampling_needs_two_valid_pixels():
    with pytest.raises(InsufficientValidPixels):
        sample_ordinal_pairs(MaskedField(np.ones((3, 3)), np.eye(3, dtype=bool) & False), 5)
