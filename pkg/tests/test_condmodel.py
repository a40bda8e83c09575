import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcct import condmodel as cm
from dcct import numcore as nc
from oracles import logistic_pmf_scalar

T = 7
LOG15 = math.log(15)


def field(w, mu, s):
    """MixtureField from K-vectors broadcast to a 1 x 1 x K x 1 x 1 layout."""
    shape = (1, 1, len(w), 1, 1)
    return cm.MixtureField(np.reshape(w, shape).astype(float), np.reshape(mu, shape).astype(float),
                           np.reshape(s, shape).astype(float))


def uniform_field():
    return field(np.full(15, 1 / 15), np.arange(-7, 8), np.full(15, cm.S_MIN))


def small_model(k=3, depth=2, width=4, bank=2, seed=0, zero_head=False):
    cfg = cm.CondNetConfig.for_bank(bank, k=k, width=width, depth=depth)
    return cm.CondModel(cfg, cm.init_params(cfg, seed, zero_head=zero_head), {"t": T})


# --- forward ----------------------------------------------------------------

def test_k1_weights_are_one(rng):
    m = small_model(k=1)
    f = m.forward(rng.integers(-7, 8, size=(2, 2, 8, 8)))
    np.testing.assert_array_equal(f.w, 1.0)


def test_forward_deterministic(rng):
    m = small_model()
    x = rng.integers(-7, 8, size=(1, 2, 8, 8))
    a, b = m.forward(x), m.forward(x.copy())
    assert a.mu.tobytes() == b.mu.tobytes() and a.w.tobytes() == b.w.tobytes()


def test_zero_head(rng):
    m = small_model(k=4, zero_head=True)
    f = m.forward(rng.integers(-7, 8, size=(1, 2, 8, 8)))
    np.testing.assert_array_equal(f.mu, 0)
    np.testing.assert_array_equal(f.s, 1)
    np.testing.assert_allclose(f.w, 0.25)


def test_field_invariants(rng):
    m = small_model(k=5, seed=3)
    f = m.forward(rng.integers(-7, 8, size=(2, 2, 8, 8)))
    assert f.w.shape == (2, 4, 5, 8, 8)
    np.testing.assert_allclose(f.w.sum(axis=2), 1, atol=1e-6)
    assert (f.w >= 0).all() and (f.s >= cm.S_MIN).all()


def test_forward_size_error():
    m = small_model(depth=2)
    with pytest.raises(cm.SizeError):
        m.forward(np.zeros((1, 2, 6, 6)))
    with pytest.raises(cm.SizeError):
        m.forward(np.zeros((1, 3, 8, 8)))


def test_config_validation():
    with pytest.raises(ValueError):
        cm.CondNetConfig(4, 6)
    with pytest.raises(ValueError):
        cm.CondNetConfig.for_bank(4, k=0)


# --- pmf ---------------------------------------------------------------------

def test_pmf_centre_bin_value():
    assert cm.discretized_logistic_pmf(0, 0.0, 1.0, T) == pytest.approx(0.244919, abs=1e-6)
    assert cm.discretized_logistic_pmf(0, 0.0, 1.0, T) == pytest.approx(logistic_pmf_scalar(0, 0, 1, T), abs=1e-12)


def test_pmf_sums_to_one():
    p = cm.discretized_logistic_pmf(np.arange(-T, T + 1), 0.0, 1.0, T)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_pmf_tail_absorption():
    p = cm.discretized_logistic_pmf(np.arange(-T, T + 1), -100.0, 1.0, T)
    assert p[0] == pytest.approx(1.0)
    assert p[1:].max() < 1e-12


def test_pmf_domain_errors():
    with pytest.raises(cm.DomainError):
        cm.discretized_logistic_pmf(8, 0.0, 1.0, T)
    with pytest.raises(cm.DomainError):
        cm.discretized_logistic_pmf(0, 0.0, 1e-4, T)


@given(mu=st.floats(-20, 20), s=st.floats(1e-3, 50), b=st.integers(-7, 7))
def test_pmf_matches_scalar_oracle(mu, s, b):
    assert cm.discretized_logistic_pmf(b, mu, s, T) == pytest.approx(logistic_pmf_scalar(b, mu, s, T), abs=1e-9)


def test_normalisation_random_draws():
    r = np.random.default_rng(11)
    for _ in range(100):
        k = int(r.integers(1, 6))
        w = r.dirichlet(np.ones(k))
        f = field(w, r.uniform(-10, 10, k), np.exp(r.uniform(np.log(cm.S_MIN), 3, k)))
        assert cm.pmf_table(f, T).sum() == pytest.approx(1.0, abs=1e-6)


# --- nll / entropy / mean -----------------------------------------------------

def test_nll_uniform_predictor():
    f = uniform_field()
    for y in range(-7, 8):
        assert cm.nll(f, np.full((1, 1, 1, 1), y), T) == pytest.approx(LOG15, abs=1e-9)


def test_nll_sharp_correct_component():
    f = field([1.0], [3.0], [cm.S_MIN])
    v = cm.nll(f, np.full((1, 1, 1, 1), 3), T)
    mode = cm.discretized_logistic_pmf(3, 3.0, cm.S_MIN, T)
    assert v <= -math.log(mode) + 1e-12
    assert v < LOG15


def test_nll_pure_and_bounded(rng):
    m = small_model(seed=2)
    x = rng.integers(-7, 8, size=(1, 2, 8, 8))
    y = rng.integers(-7, 8, size=(1, 4, 8, 8))
    f = m.forward(x)
    a, b = cm.nll(f, y, T), cm.nll(f, y.copy(), T)
    assert a == b and a >= 0


def test_nll_shape_and_domain_errors(rng):
    f = uniform_field()
    with pytest.raises(nc.ShapeError):
        cm.nll(f, np.zeros((1, 2, 1, 1)), T)
    with pytest.raises(cm.DomainError):
        cm.nll(f, np.full((1, 1, 1, 1), 9), T)


def test_entropy_uniform_and_degenerate():
    assert cm.entropy_map(uniform_field(), T).item() == pytest.approx(LOG15, abs=1e-9)
    sharp = field([1.0], [0.0], [cm.S_MIN])
    eps = cm.PROB_FLOOR
    assert cm.entropy_map(sharp, T).item() <= 15 * eps * -math.log(eps)


@given(seed=st.integers(0, 10 ** 6))
def test_entropy_bounds(seed):
    r = np.random.default_rng(seed)
    k = 3
    f = field(r.dirichlet(np.ones(k)), r.uniform(-9, 9, k), np.exp(r.uniform(-7, 3, k)))
    h = cm.entropy_map(f, T).item()
    assert -1e-12 <= h <= LOG15 + 1e-12


def test_mixture_mean_examples():
    assert cm.mixture_mean(field([1.0], [2.0], [1.0]), T).item() == 2.0
    assert cm.mixture_mean(field([0.5, 0.5], [-3.0, 3.0], [1.0, 1.0]), T).item() == 0.0
    assert cm.mixture_mean(field([0.25, 0.75], [0.0, 4.0], [1.0, 1.0]), T).item() == pytest.approx(3.0)
    assert cm.mixture_mean(field([1.0], [30.0], [1.0]), T).item() == T


def test_calibration_identity_toy():
    """Targets drawn from the predicted PMF make mean(NLL) - mean(H) vanish."""
    r = np.random.default_rng(0)
    n = 20000
    ctx = r.integers(0, 2, n)
    mus, ss = np.array([-1.5, 2.0]), np.array([0.8, 2.5])
    shape = (1, 1, 1, 1, n)
    f = cm.MixtureField(np.ones(shape), mus[ctx].reshape(shape), ss[ctx].reshape(shape))
    pmf = cm.pmf_table(f, T)[0, 0, 0]
    cdf = np.cumsum(pmf, axis=-1)
    y = (r.uniform(size=(n, 1)) > cdf).sum(axis=1) - T
    y = np.minimum(y, T).reshape(1, 1, 1, n)
    d = cm.nll_map(f, y, T).mean() - cm.entropy_map(f, T).mean()
    assert abs(d) <= 0.02


# --- fast inference paths agree with the float64 reference ---------------------

def test_fast_paths_match_reference(rng):
    m = small_model(k=3, seed=5)
    x = rng.integers(-7, 8, size=(2, 2, 8, 8))
    y = rng.integers(-7, 8, size=(2, 4, 8, 8))
    f = m.forward(x)
    with nc.no_grad():
        raw = [r.data for r in m.raw(x)]
    y3 = y.reshape(2, 4, -1)
    nll, mean = cm.site_nll_and_mean(raw, y3, T)
    np.testing.assert_allclose(nll.reshape(y.shape), cm.nll_map(f, y, T), atol=1e-4)
    np.testing.assert_allclose(mean.reshape(y.shape), cm.mixture_mean(f, T), atol=1e-4)
    d = cm.site_nll_minus_entropy(raw, y3, T)
    np.testing.assert_allclose(d.reshape(y.shape), cm.nll_map(f, y, T) - cm.entropy_map(f, T), atol=1e-4)


# --- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1])
def test_nll_gradients_through_net(seed):
    cfg = cm.CondNetConfig.for_bank(1, k=2, width=2, depth=2)
    params = cm.init_params(cfg, seed)
    r = np.random.default_rng(seed)
    x = r.integers(-3, 4, size=(1, 1, 4, 4))
    y = r.integers(-3, 4, size=(1, 2, 16))

    def loss(p):
        return cm.nll_tensor(cm.forward_raw(p, cfg, x, 3), y, 3)

    res = nc.check_gradients(loss, params, max_per_param=6, rng=r)
    assert res.ok, res


def test_head_gradients_match_fd():
    """Gradients w.r.t. the raw mixture outputs, including edge bins."""
    r = np.random.default_rng(4)
    shape = (2, 3, 3, 5)
    raw = {n: nc.Tensor(r.normal(size=shape).astype(np.float32), requires_grad=True, name=n)
           for n in ("logits", "mu", "log_s")}
    y = r.integers(-3, 4, size=(2, 3, 5))
    y[0, 0, :2] = (-3, 3)

    def loss(p):
        return cm.nll_tensor((p["logits"], p["mu"] * 2.0, p["log_s"]), y, 3)

    assert nc.check_gradients(loss, raw).ok


def test_float64_reference_matches_loss():
    """The double-precision oracle used by the acceptance gradient check
    agrees with the float32 loss."""
    from oracles import cond_nll_f64
    cfg = cm.CondNetConfig.for_bank(2, k=3, width=4, depth=2)
    r = np.random.default_rng(9)
    for seed in range(5):
        params = cm.init_params(cfg, seed)
        x = r.integers(-7, 8, size=(2, 2, 8, 8))
        y = r.integers(-7, 8, size=(2, 4, 64))
        want = cm.nll_tensor(cm.forward_raw(params, cfg, x, 7), y, 7).item()
        got = cond_nll_f64({k: v.data.astype(np.float64) for k, v in params.items()}, cfg, x, y, 7)
        assert got == pytest.approx(want, abs=1e-4)
