import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrnorm import synth
from rrnorm.mappers import (
    AffineMapping,
    LutMapping,
    SingularFitError,
    apply_mapping,
    build_weighted_histogram,
    case1_weights,
    case2_weights,
    case3_weights,
    fit_affine_wls,
    fit_luts,
    fit_monotone_lut,
    mapping_from_json,
    match_distance,
)
from rrnorm.noise_model import GAUSSIAN, LAPLACE, MixtureParams
from rrnorm.raster import Raster


def hist(bins):
    from rrnorm.mappers import WeightedHistogram
    return WeightedHistogram(np.asarray(bins, dtype=float))


def lut_for(x, y, w, T):
    return fit_monotone_lut(build_weighted_histogram(x, w, T), build_weighted_histogram(y, w, T))


# ---------------- affine ----------------

def test_wls_examples():
    assert fit_affine_wls([0, 1, 2], [1, 3, 5]) == pytest.approx((2.0, 1.0), abs=1e-12)
    w, b = fit_affine_wls([0, 1, 2, 2], [1, 3, 5, 100], [1, 1, 1, 1e-12])
    assert abs(w - 2) < 1e-6 and abs(b - 1) < 1e-6
    assert fit_affine_wls([0, 3, 9], [7, 7, 7]) == pytest.approx((0.0, 7.0), abs=1e-12)


def test_wls_outlier_matches_oracle():
    x, y, g = [0, 1, 2, 2], [1, 3, 5, 100], [1, 1, 1, 1e-12]
    assert np.allclose(fit_affine_wls(x, y, g), synth.oracle_wls(x, y, g), atol=1e-8)


@pytest.mark.parametrize("x,g", [([4, 4, 4], [1, 1, 1]), ([1, 2, 3], [1, 0, 0]), ([1, 2, 3], [0, 5, 0])])
def test_wls_singular(x, g):
    with pytest.raises(SingularFitError):
        fit_affine_wls(x, [1, 2, 3], g)


def test_wls_constant_x_message_suggests_fallback():
    with pytest.raises(SingularFitError, match="fall back"):
        fit_affine_wls([4, 4, 4], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_wls_matches_extended_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 60))
    x = rng.integers(0, 256, n).astype(float)
    y = np.clip(rng.uniform(0.5, 1.5) * x + rng.normal(0, 10, n), 0, 255)
    g = rng.uniform(0, 3, n)
    if np.ptp(x[g > 0]) == 0:
        return
    assert np.allclose(fit_affine_wls(x, y, g), synth.oracle_wls(x, y, g), atol=1e-8)


# ---------------- histograms ----------------

def test_histogram_examples():
    assert build_weighted_histogram([0, 0, 2], [1, 1, 1], 2).bins.tolist() == [2, 0, 1]
    assert build_weighted_histogram([0, 2], [0.5, 1.5], 2).bins.tolist() == [0.5, 0, 1.5]
    h = build_weighted_histogram([3, 1, 1, 0], None, 3)
    assert h.total == 4 and h.profile()[-1] == 1.0
    assert np.all(np.diff(h.profile()) >= 0)


def test_histogram_permutation_invariant(rng):
    v = rng.integers(0, 256, 1000)
    w = rng.random(1000)
    p = rng.permutation(1000)
    a = build_weighted_histogram(v, w, 255).bins
    b = build_weighted_histogram(v[p], w[p], 255).bins
    assert np.allclose(a, b, rtol=1e-12)


@pytest.mark.parametrize("values,weights", [([0, 1], [0, 0]), ([0, 4], [1, 1]), ([0, 1], [1, -1]), ([], [])])
def test_histogram_errors(values, weights):
    with pytest.raises(ValueError):
        build_weighted_histogram(values, weights, 3)


def test_match_distance_examples():
    assert match_distance(hist([1, 0, 1]), hist([0, 1, 1])) == 1
    assert match_distance(hist([2, 0]), hist([0, 2])) == 2
    assert match_distance(hist([3, 1, 4]), hist([3, 1, 4])) == 0
    with pytest.raises(ValueError):
        match_distance(hist([1, 1]), hist([1, 1, 1]))


def test_match_distance_is_one_dimensional_emd(rng):
    # independent oracle: scipy's Wasserstein-1 on the same weighted support
    from scipy.stats import wasserstein_distance
    a, b = rng.random(9), rng.random(9)
    a *= 5 / a.sum()
    b *= 5 / b.sum()
    emd = wasserstein_distance(np.arange(9), np.arange(9), a, b) * 5
    assert match_distance(hist(a), hist(b)) == pytest.approx(emd, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 8), n=st.integers(1, 20))
def test_match_distance_equals_weighted_l1_under_sort_assumption(seed, T, n):
    rng = np.random.default_rng(seed)
    x, y, g = synth.sort_assumption_instance(rng, T, n, weight_denominator=8)
    f = np.sort(rng.integers(0, T + 1, T + 1))[x]      # any monotone f keeps co-sortedness
    order = np.lexsort((y, f))
    direct = synth.oracle_match_distance(f[order], y[order], g[order], T)
    d = match_distance(build_weighted_histogram(f, g, T), build_weighted_histogram(y, g, T))
    assert d == direct


def test_match_distance_oracle_rejects_unsorted():
    with pytest.raises(ValueError, match="sort"):
        synth.oracle_match_distance([0, 2, 1], [0, 1, 2], [1, 1, 1], 3)


# ---------------- lut ----------------

def test_lut_uniform_shift():
    lut = fit_monotone_lut(hist([1, 1, 0, 0]), hist([0, 0, 1, 1]))
    assert lut.tolist() == [2, 3, 3, 3]
    out = apply_mapping(LutMapping(lut), Raster(np.array([[[1]]], np.uint8)))
    assert out.data.item() == 3


def test_lut_identity_where_cp_increases():
    h = hist([1, 2, 0, 3, 1])
    lut = fit_monotone_lut(h, h)
    for t in (0, 1, 3, 4):
        assert lut[t] == t


def test_lut_constant_target():
    lut = fit_monotone_lut(hist(np.ones(11)), hist(np.eye(11)[5] * 7))
    assert lut.tolist() == [5] * 11


def test_lut_preserves_low_weight_tail():
    # a tail of tiny weights must not collapse onto the bulk of the target
    hx = hist([1.0, 1.0, 1e-12, 1e-12])
    lut = fit_monotone_lut(hx, hx)
    assert lut.tolist() == [0, 1, 2, 3]


def test_lut_weight_scale_invariant(rng):
    x = rng.integers(0, 64, 500)
    y = np.clip(x + rng.integers(-5, 6, 500), 0, 63)
    w = rng.random(500)
    assert np.array_equal(lut_for(x, y, w, 63), lut_for(x, y, w * 2.0, 63))
    assert np.array_equal(lut_for(x, y, w, 63), lut_for(x, y, w * 1e-6, 63))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 40))
def test_lut_monotone_for_any_histograms(seed, T):
    rng = np.random.default_rng(seed)
    bx = rng.random(T + 1) * (rng.random(T + 1) < 0.6)
    by = rng.random(T + 1) * (rng.random(T + 1) < 0.6)
    bx[rng.integers(T + 1)] += 1
    by[rng.integers(T + 1)] += 1
    lut = fit_monotone_lut(hist(bx), hist(by))
    assert np.all(np.diff(lut) >= 0) and lut.min() >= 0 and lut.max() <= T


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), n=st.integers(1, 15))
def test_lut_attains_brute_force_minimum(seed, T, n):
    rng = np.random.default_rng(seed)
    x, y, g = synth.sort_assumption_instance(rng, T, n)
    best, _ = synth.oracle_monotone_lut(x, y, g, T)
    assert synth.weighted_l1(lut_for(x, y, g, T), x, y, g) == best


def test_oracle_lut_small_case():
    best, lut = synth.oracle_monotone_lut([0, 1, 2], [2, 0, 1], [1, 1, 1], 2)
    assert best == 2.0
    assert np.all(np.diff(lut) >= 0)


def test_fit_luts_per_band(rng):
    x = rng.integers(0, 16, (300, 2))
    y = np.stack([x[:, 0], 15 - x[:, 1] // 2], axis=1)
    m = fit_luts(x, y, None, 15)
    assert m.tables.shape == (2, 16)
    assert np.array_equal(m.tables[0][np.unique(x[:, 0])], np.unique(x[:, 0]))


# ---------------- application and serialization ----------------

def test_apply_affine_round_and_clamp():
    m = AffineMapping([[1.0, 10.0]])
    out = apply_mapping(m, Raster(np.array([[[250, 3]]], np.uint8)), 255)
    assert out.data.tolist() == [[[255, 13]]]
    m = AffineMapping([[0.5, 0.0]])
    assert apply_mapping(m, Raster(np.array([[[3, 5]]], np.uint8))).data.tolist() == [[[2, 3]]]


def test_apply_identity_lut(rng):
    r = Raster(rng.integers(0, 256, (3, 8, 8)).astype(np.uint8))
    ident = LutMapping(np.tile(np.arange(256), (3, 1)))
    assert np.array_equal(apply_mapping(ident, r).data, r.data)


def test_apply_band_mismatch():
    with pytest.raises(ValueError, match="bands"):
        apply_mapping(AffineMapping([[1, 0]]), Raster(np.zeros((2, 1, 1), np.uint8)))


def test_lut_rejects_non_monotone():
    with pytest.raises(ValueError):
        LutMapping([[0, 2, 1]])


def test_mapping_json_roundtrip():
    for m in (AffineMapping([[1.5, -2.0], [0.9, 3.0]]), LutMapping([[0, 0, 1, 3], [1, 1, 2, 2]])):
        d = m.to_json()
        assert d["variant"] in ("affine", "lut")
        back = mapping_from_json(d)
        assert back.to_json() == d


# ---------------- weights ----------------

def mix(family, scales):
    return MixtureParams(family, np.array([0.5, 0.5]), np.array([scales], float))


def test_case3_weights():
    p = mix(GAUSSIAN, [2.0, 50.0])
    g = case3_weights(np.array([[1.0, 0.0], [0.0, 1.0]]), p, 0)
    assert g.tolist() == [0.5, 0.0]
    half = mix(GAUSSIAN, [1.0, 50.0])
    assert case3_weights(np.array([[0.3, 0.7]]), half, 0)[0] == pytest.approx(
        2 * case3_weights(np.array([[0.3, 0.7]]), p, 0)[0])
    with pytest.raises(ValueError):
        case3_weights(np.array([[1.0, 0.0]]), mix(LAPLACE, [1, 2]), 0)


def test_case2_weights():
    p = mix(LAPLACE, [2.0, 10.0])
    g = case2_weights(np.array([[1.0, 0.0], [0.5, 0.5]]), p, 0)
    assert g == pytest.approx([0.5, 0.3])
    far = mix(LAPLACE, [2.0, 1e300])
    assert case2_weights(np.array([[0.4, 0.6]]), far, 0)[0] == pytest.approx(0.2)


def test_case1_weights():
    p = mix(GAUSSIAN, [2.0, 8.0])
    g = case1_weights(np.array([[1.0, 0.0], [0.5, 0.5]]), p, 0)
    assert g == pytest.approx([0.25, 0.5 / 4 + 0.5 / 16])
