import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcct import cfa, synthdata as sd, theory as th
from oracles import w1_sorted_pairs


def band_of(n):
    """A band object with ``n`` bins; only its length matters to spectral_gap."""
    return th.AliasingBand(np.zeros((n, 2), dtype=int), (4, 4), 1.0)


# --- linear responses ----------------------------------------------------------

def test_scalar_response_exact(rng):
    x = rng.normal(size=500)
    r = th.estimate_linear_response(x, 2 * x)
    assert r.T.shape == (1, 1)
    assert r.T[0, 0] == pytest.approx(2.0, abs=1e-4)


def test_identity_response(rng):
    x = rng.normal(size=(400, 3))
    np.testing.assert_allclose(th.estimate_linear_response(x, x).T, np.eye(3), atol=1e-3)


def test_noisy_response_recovers_a(rng):
    a = rng.normal(size=(4, 3))
    x = rng.normal(size=(10000, 3))
    y = x @ a.T + rng.normal(scale=0.1, size=(10000, 4))
    t = th.estimate_linear_response(x, y).T
    assert np.linalg.norm(t - a) / np.linalg.norm(a) <= 0.05


def test_batched_complex_response(rng):
    a = rng.normal(size=(5, 2, 3)) + 1j * rng.normal(size=(5, 2, 3))
    x = rng.normal(size=(300, 5, 3)) + 1j * rng.normal(size=(300, 5, 3))
    y = np.einsum("byx,nbx->nby", a, x)
    np.testing.assert_allclose(th.estimate_linear_response(x, y).T, a, atol=1e-4)


def test_response_errors(rng):
    with pytest.raises(th.DataError):
        th.estimate_linear_response(rng.normal(size=10), rng.normal(size=9))
    with pytest.raises(th.ConditioningError):
        th.estimate_linear_response(rng.normal(size=(2, 5)), rng.normal(size=(2, 1)))
    with pytest.raises(th.ConditioningError):
        th.estimate_linear_response(np.zeros((50, 2)), rng.normal(size=(50, 1)))


# --- polyphase -------------------------------------------------------------------

def test_periodic_field_constant_subfields():
    f = np.tile([[1.0, 2.0], [3.0, 4.0]], (3, 4))
    sub = th.polyphase_decompose(f)
    assert sub.shape == (4, 3, 4)
    for k, v in enumerate((1, 2, 3, 4)):
        np.testing.assert_array_equal(sub[k], v)


@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2 ** 31))
def test_polyphase_invertible_and_energy(h, w, seed):
    f = np.random.default_rng(seed).normal(size=(2 * h, 2 * w))
    sub = th.polyphase_decompose(f)
    np.testing.assert_array_equal(th.polyphase_recompose(sub), f)
    assert (sub ** 2).sum() == pytest.approx((f ** 2).sum(), rel=1e-12)


def test_polyphase_odd_extent():
    with pytest.raises(cfa.SizeError):
        th.polyphase_decompose(np.zeros((5, 4)))


# --- band and gap ------------------------------------------------------------------

def test_aliasing_band_bins_near_corner():
    band = th.aliasing_band(16, 16)
    w = band.frequencies()
    assert len(band) > 0
    assert (np.abs(w - np.pi) <= np.pi / 4 + 1e-12).all()
    assert (band.bins >= 0).all() and (band.bins < 16).all()
    assert [8, 8] in band.bins.tolist()


def test_aliasing_band_errors():
    with pytest.raises(th.ParameterError):
        th.aliasing_band(8, 8, radius=0)
    with pytest.raises(th.ParameterError):
        th.aliasing_band(3, 3, radius=0.1)  # no bin of a 3-point grid sits at pi


def test_gap_equal_responses_zero(rng):
    t = rng.normal(size=(6, 8, 4)) + 1j * rng.normal(size=(6, 8, 4))
    assert th.spectral_gap(t, t, band_of(6)) == 0.0


def test_gap_scalar_bins():
    a = np.array([3.0, -2.0, 5.0]).reshape(3, 1, 1)
    assert th.spectral_gap(a, np.zeros_like(a), band_of(3)) == pytest.approx(2.0)


def test_gap_diagonal_matrix():
    d = np.diag([3.0, 1.0])[None]
    assert th.spectral_gap(d, np.zeros_like(d), band_of(1)) == pytest.approx(1.0)


def test_sigma_min_complex_matches_numpy(rng):
    m = rng.normal(size=(10, 8, 4)) + 1j * rng.normal(size=(10, 8, 4))
    want = np.linalg.svd(m, compute_uv=False)[..., -1]
    np.testing.assert_allclose(th.sigma_min(m), want, rtol=1e-10)


def test_gap_bin_mismatch():
    with pytest.raises(th.DomainError):
        th.spectral_gap(np.zeros((3, 1, 1)), np.zeros((3, 1, 1)), band_of(4))
    with pytest.raises(th.DomainError):
        th.spectral_gap(np.zeros((3, 1, 1)), np.zeros((3, 2, 1)), band_of(3))


# --- delta and W1 -------------------------------------------------------------------

def test_delta_examples():
    assert th.prop1_delta(2, 9, 4) == pytest.approx(3.0)
    assert th.prop1_delta(0, 123.0, 7) == 0.0
    assert th.prop1_delta(1.3, 4 * 5.0, 9) == pytest.approx(2 * th.prop1_delta(1.3, 5.0, 9))
    with pytest.raises(th.ParameterError):
        th.prop1_delta(1, 1, 0)


def test_w1_examples(rng):
    s = rng.normal(size=20)
    assert th.w1_mean_bound(s, s) == 0.0
    assert th.w1_mean_bound([1.0] * 5, [4.0] * 7) == pytest.approx(3.0)
    assert th.w1_exact_1d(s, s) == 0.0
    assert th.w1_exact_1d([0], [5]) == 5.0
    assert th.w1_exact_1d([0, 1], [1, 2]) == 1.0


def test_w1_gaussians(rng):
    p = rng.normal(0, 1, 10000)
    q = rng.normal(2, 1, 10000)
    b = th.w1_mean_bound(p, q)
    exact = th.w1_exact_1d(p, q)
    assert 1.9 <= b <= 2.1
    assert b <= exact + 2 * th.mean_diff_se(p, q)
    assert exact == pytest.approx(w1_sorted_pairs(p, q), rel=1e-12)


@given(seed=st.integers(0, 2 ** 31), n=st.integers(2, 60))
def test_mean_bound_below_exact(seed, n):
    r = np.random.default_rng(seed)
    p, q = r.standard_cauchy(n), r.exponential(size=n)
    # |mean(p - q)| <= mean|p_(i) - q_(i)| by the triangle inequality on sorted pairs
    assert th.w1_mean_bound(p, q) <= th.w1_exact_1d(p, q) + 1e-9


def test_w1_errors():
    with pytest.raises(th.DataError):
        th.w1_mean_bound([], [1.0])
    with pytest.raises(th.DataError):
        th.w1_exact_1d([1.0, 2.0], [1.0])
    with pytest.raises(th.DataError):
        th.w1_mean_bound(np.zeros((3, 2)), np.zeros((3, 3)))


# --- end-to-end diagnostic on a small corpus ---------------------------------------

@pytest.fixture(scope="module")
def small_corpora():
    photo, _ = sd.make_corpus("photographic", 24, seed=0, size=32)
    gen, _ = sd.make_corpus("generated", 24, seed=0, size=32, mode="upsampled")
    return photo, gen


def test_diagnose_small(small_corpora):
    photo, gen = small_corpora
    rep = th.diagnose(photo, gen, projections=4)
    assert rep.gamma > 0 and rep.delta > 0 and rep.c_x > 0
    assert rep.n == 16 * 16
    assert rep.delta == pytest.approx(th.prop1_delta(rep.gamma, rep.c_x, rep.n))
    assert len(rep.projections) == 4 and rep.bound_ordering_ok
    names = [r[0] for r in rep.as_rows()]
    assert names[:4] == ["gamma", "c_x", "N", "delta"]


def test_diagnose_errors(small_corpora):
    photo, _ = small_corpora
    with pytest.raises(th.DataError):
        th.diagnose([], photo)
    small, _ = sd.make_corpus("generated", 4, seed=1, size=16)
    with pytest.raises(th.DataError):
        th.diagnose(photo, small)
