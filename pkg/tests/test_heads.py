import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from ensflow import flow as fl
from ensflow import heads as hd
from ensflow.errors import ContractViolation
from ensflow.metrics import crps_normal, crps_quantile_approx


def test_parameter_counts():
    assert hd.NormalHead().n_params == 42
    assert hd.BernsteinHead().n_params == 273
    assert hd.FlowHead().n_params == 840
    assert hd.get_head("flow_free").n_params == 21 * 60


def test_unknown_head():
    with pytest.raises(ContractViolation):
        hd.get_head("mixture")


def test_wrong_raw_width():
    with pytest.raises(ContractViolation):
        hd.NormalHead().law(np.zeros(41), np.zeros(21), np.ones(21))


def test_quantile_levels():
    tau = hd.QUANTILE_LEVELS
    assert tau.size == 100
    assert tau[0] == 0.005 and tau[-1] == 0.995
    np.testing.assert_allclose(np.diff(tau), 0.01, atol=1e-15)
    np.testing.assert_allclose(tau + tau[::-1], 1.0, atol=1e-15)
    assert np.all(np.diff(tau) > 0)


# -- normal -----------------------------------------------------------------


def test_normal_head_examples():
    law = hd.normal_head(np.array([0.5, 0.0]), np.array([1.0]), np.array([1.0]))
    assert law.mu[0] == 1.5
    assert law.sigma[0] == pytest.approx(1 + np.log(2))
    law = hd.normal_head(np.array([0.0, -800.0]), np.array([0.0]), np.array([0.3]))
    assert law.sigma[0] == pytest.approx(0.3)


def test_normal_head_rejects_negative_spread():
    with pytest.raises(ContractViolation):
        hd.normal_head(np.zeros(2), np.zeros(1), np.array([-0.1]))


def test_normal_nll_examples():
    law = hd.NormalLaw(np.array([2.0]), np.array([1.0]))
    assert hd.normal_nll(law, np.array([2.0])) == pytest.approx(0.9189385, abs=1e-7)
    law = hd.NormalLaw(np.array([2.0]), np.array([3.0]))
    assert hd.normal_nll(law, np.array([5.0])) == pytest.approx(0.5 + np.log(3) + 0.5 * np.log(2 * np.pi))


def test_normal_nll_matches_quadrature_oracle():
    mu, sigma, y = 0.7, 1.9, -1.2
    pdf = lambda t: np.exp(-0.5 * ((t - mu) / sigma) ** 2)
    norm, _ = integrate.quad(pdf, -np.inf, np.inf)
    oracle = -np.log(pdf(y) / norm)
    assert hd.normal_nll(hd.NormalLaw(np.array([mu]), np.array([sigma])), np.array([y])) == pytest.approx(oracle, abs=1e-9)


def test_normal_nll_skips_missing():
    law = hd.NormalLaw(np.zeros(3), np.ones(3))
    assert hd.normal_nll(law, np.array([0.0, np.nan, 0.0])) == pytest.approx(0.9189385, abs=1e-7)


def _fd(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def test_normal_head_gradient():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(3, 42))
    mean, std = rng.normal(size=(3, 21)), rng.uniform(0.1, 2, size=(3, 21))
    y = rng.normal(size=(3, 21))
    y[1, 4] = np.nan
    head = hd.NormalHead()
    loss, g = head.loss_and_grad(raw, mean, std, y)
    assert loss == pytest.approx(np.nanmean(head.lead_loss(raw, mean, std, y)))
    fd = _fd(lambda r: head.loss_and_grad(r, mean, std, y)[0], raw)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


# -- flow -------------------------------------------------------------------


def identity_raw():
    # knots equal values in every spline: an exact identity map
    return np.zeros(840)


def test_flow_nll_identity_zero():
    assert hd.flow_nll(identity_raw(), np.zeros(21)) == pytest.approx(0.0, abs=1e-14)


def test_flow_nll_hand_example():
    # one spline doubles its input; z = 1 at y = 0.5 and log T' = ln 2
    k = np.tile(np.arange(5.0), (4, 1))
    v = k.copy()
    v[0] = 2 * k[0]
    raw = np.zeros((4, 2, 5))
    for l in range(4):
        for row, arr in enumerate((k[l], v[l])):
            raw[l, row, 0] = arr[0]
            gaps = np.diff(arr) - 1e-3
            raw[l, row, 1:] = np.log(np.expm1(gaps))
    raw = raw.reshape(40)
    np.testing.assert_allclose(fl.FlowParams.from_raw(raw).values, v, atol=1e-12)
    assert hd.flow_nll(raw, np.array(0.5)) == pytest.approx(0.5 - np.log(2), abs=1e-12)
    assert hd.flow_nll(raw, np.array(0.5)) == pytest.approx(-0.1931, abs=1e-4)


def test_flow_nll_plus_constant_is_negative_logpdf():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=840)
    y = rng.normal(scale=2, size=21)
    law = hd.FlowHead(anchor=False).law(raw)
    per = -law.logpdf(y)
    assert hd.flow_nll(raw, y) + hd.LOG_SQRT_2PI == pytest.approx(per.mean(), abs=1e-12)


@pytest.mark.parametrize("anchor", [False, True])
def test_flow_head_gradient(anchor):
    rng = np.random.default_rng(2)
    raw = rng.normal(scale=0.5, size=(2, 840))
    mean = rng.normal(size=(2, 21))
    y = mean + rng.normal(size=(2, 21))
    y[0, 3] = np.nan
    head = hd.FlowHead(anchor=anchor)
    loss, g = head.loss_and_grad(raw, mean, None, y)
    assert loss + hd.LOG_SQRT_2PI == pytest.approx(np.nanmean(head.lead_loss(raw, mean, None, y)), abs=1e-12)
    idx = rng.choice(840, 60, replace=False)

    def f(sub):
        r = raw.copy()
        r[1, idx] = sub
        return head.loss_and_grad(r, mean, None, y)[0]

    fd = _fd(f, raw[1, idx].copy())
    assert np.max(np.abs(g[1, idx] - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4


def test_anchor_shift_is_exact():
    rng = np.random.default_rng(3)
    raw = rng.normal(size=840)
    mean = rng.normal(scale=10, size=21)
    y = mean + rng.normal(size=21)
    anchored = hd.FlowHead().law(raw, mean)
    plain = hd.FlowHead(anchor=False).law(raw)
    np.testing.assert_allclose(anchored.logpdf(y), plain.logpdf(y - mean), atol=1e-10)
    np.testing.assert_allclose(anchored.quantiles(), plain.quantiles() + mean[:, None], atol=1e-9)
    # exported parameters rebuild the identical law
    rebuilt = hd.FlowLaw.from_params(anchored.params())
    np.testing.assert_allclose(rebuilt.params_.derivatives, anchored.params_.derivatives, rtol=1e-12)
    assert anchored.params().shape == (21, 40)


def test_flow_identity_quantile():
    law = hd.FlowHead(anchor=False).law(identity_raw())
    q, crossings = hd.head_quantiles(law, np.array([0.5, 0.975]))
    np.testing.assert_allclose(q[:, 1], 1.95996, atol=1e-5)
    np.testing.assert_allclose(q[:, 0], 0.0, atol=1e-12)
    assert crossings == 0


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, 840, elements=st.floats(-3, 3)))
def test_flow_quantiles_strictly_increasing(raw):
    q, crossings = hd.head_quantiles(hd.FlowHead(anchor=False).law(raw))
    assert crossings == 0
    assert np.all(np.diff(q, axis=-1) > 0)


def test_free_flow_head_round_trip():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=21 * 60)
    law = hd.get_head("flow_free").law(raw, np.zeros(21))
    back = hd.FreeFlowLaw.from_params(law.params())
    np.testing.assert_array_equal(back.params_.derivatives, law.params_.derivatives)


# -- Bernstein --------------------------------------------------------------


def test_bernstein_constant_and_endpoints():
    c = np.full(13, 3.3)
    tau = np.linspace(0, 1, 11)
    np.testing.assert_allclose(hd.bernstein_quantile(c, tau), 3.3, atol=1e-12)
    a = np.random.default_rng(5).normal(size=13)
    assert hd.bernstein_quantile(a, 0.0) == pytest.approx(a[0], abs=1e-12)
    assert hd.bernstein_quantile(a, 1.0) == pytest.approx(a[12], abs=1e-12)


def test_bernstein_linear_reproduction():
    c = np.arange(13) / 12
    assert hd.bernstein_quantile(c, 0.5) == pytest.approx(0.5, abs=1e-12)
    tau = np.linspace(0, 1, 37)
    np.testing.assert_allclose(hd.bernstein_quantile(c, tau), tau, atol=1e-12)


def test_bernstein_direct_summation_oracle():
    from math import comb

    a = np.random.default_rng(6).normal(size=13)
    t = 0.37
    oracle = sum(a[i] * comb(12, i) * t**i * (1 - t) ** (12 - i) for i in range(13))
    assert hd.bernstein_quantile(a, t) == pytest.approx(oracle, abs=1e-12)


def test_bernstein_level_domain():
    with pytest.raises(ContractViolation):
        hd.bernstein_quantile(np.zeros(13), 1.2)


def test_bernstein_increasing_coefficients_do_not_cross():
    law = hd.BernsteinLaw(np.cumsum(np.random.default_rng(7).uniform(0.01, 1, size=(21, 13)), axis=-1))
    _, crossings = hd.head_quantiles(law)
    assert crossings == 0


def test_bernstein_crossing_is_counted():
    c = np.zeros(13)
    c[6] = 5.0
    _, crossings = hd.head_quantiles(hd.BernsteinLaw(c[None, :]))
    assert crossings > 0


def test_bernstein_cdf_inverts_quantile():
    c = np.cumsum(np.random.default_rng(8).uniform(0.1, 1, size=13))
    law = hd.BernsteinLaw(np.tile(c, (4, 1)))
    tau = np.array([0.05, 0.3, 0.5, 0.93])
    q = law.quantiles(tau)  # (4, 4): row i holds all levels
    np.testing.assert_allclose(law.cdf(np.diag(q)), tau, atol=1e-9)
    assert law.cdf(np.full(4, c[0] - 1)).max() == 0.0
    assert law.cdf(np.full(4, c[-1] + 1)).min() == 1.0


def test_pinball_examples():
    assert hd.pinball_loss(1.0, 2.0, 0.5) == pytest.approx(0.5)
    assert hd.pinball_loss(1.0, 2.0, 0.9) == pytest.approx(0.9)
    assert hd.pinball_loss(1.0, 0.0, 0.9) == pytest.approx(0.1)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.001, 0.999))
def test_pinball_nonnegative(q, y, tau):
    assert hd.pinball_loss(q, y, tau) >= 0


@pytest.mark.parametrize("anchor", [False, True])
def test_bernstein_head_gradient(anchor):
    rng = np.random.default_rng(9)
    raw = rng.normal(size=(4, 273))
    mean = rng.normal(size=(4, 21))
    y = rng.normal(size=(4, 21))
    head = hd.BernsteinHead(anchor=anchor)
    loss, g = head.loss_and_grad(raw, mean, None, y)
    assert loss == pytest.approx(np.nanmean(head.lead_loss(raw, mean, None, y)))
    fd = _fd(lambda r: head.loss_and_grad(r, mean, None, y)[0], raw, h=1e-7)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_normal_quantiles_and_crps_link():
    law = hd.NormalLaw(np.array([0.0]), np.array([1.0]))
    q, _ = hd.head_quantiles(law)
    assert q[0, 49] < 0 < q[0, 50]
    approx = crps_quantile_approx(q, np.array([0.0]))
    assert approx[0] == pytest.approx(crps_normal(0.0, 1.0, 0.0), rel=1e-2)
    assert hd.head_quantiles(law, np.array([0.5]))[0][0, 0] == 0.0


def test_flow_law_cdf_matches_sampled_frequency():
    rng = np.random.default_rng(10)
    law = hd.FlowHead(anchor=False).law(rng.normal(size=840))
    f = law.params_.lead(0)
    draws = fl.flow_sample(f, rng, size=5000)
    assert stats.kstest(fl.flow_cdf(draws, f), "uniform").pvalue > 1e-3
