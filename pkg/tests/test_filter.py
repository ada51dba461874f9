import math
from dataclasses import dataclass

import numpy as np
import pytest
from scipy import stats

from splitfilter.config import preset
from splitfilter.domain import Box
from splitfilter.filter import (
    DegeneratePosteriorError, FilterAborted, GaussianDensity, Likelihood, Posterior,
    UnsupportedSensorError, estimate_normalizer, likelihood_sampler, quadrature_normalizer,
    run_filter,
)
from splitfilter.model import BenesModelParams, LinearModelParams, make_benes_model, make_linear_model
from splitfilter.sde import substream
from splitfilter.training import train_network

CASE1 = preset("linear-case1")


def _lik(h1, h2, dt, z):
    m = make_linear_model(LinearModelParams.scalar(-1.0, 0.0, 0.1, h1, h2))
    return Likelihood.from_increment(m, [z * dt], dt)


@dataclass(frozen=True)
class Constant:
    value: float
    domain: Box | None = None

    def __call__(self, x):
        x = np.atleast_2d(x)
        v = np.full(x.shape[0], self.value)
        return v if self.domain is None else np.where(self.domain.contains(x), v, 0.0)


class TestLikelihood:
    def test_sampler_case1(self):
        s = likelihood_sampler(_lik(90.0, 0.0, 0.01, 9.0))
        assert s.mean == pytest.approx(0.1, rel=1e-12)
        assert s.std == pytest.approx(1 / 9, rel=1e-12)
        assert round(s.std, 5) == 0.11111

    def test_sampler_standard_normal(self):
        s = likelihood_sampler(_lik(1.0, 0.0, 1.0, 0.0))
        assert (s.mean, s.std) == (0.0, 1.0)

    def test_sampler_benes(self):
        m = make_benes_model(BenesModelParams(3.0, 0.0, 0.5, 3.0, 0.0))
        s = likelihood_sampler(Likelihood.from_increment(m, [0.3], 0.1))
        assert s.mean == pytest.approx(1.0, rel=1e-12)
        assert s.std == pytest.approx(1 / math.sqrt(0.9), rel=1e-12)
        assert round(s.std, 4) == 1.0541

    def test_xi_is_scaled_gaussian(self):
        lik = _lik(90.0, 0.5, 0.01, 9.0)
        s = likelihood_sampler(lik)
        x = np.linspace(-0.5, 0.5, 41)
        np.testing.assert_allclose(lik(x), s.prefactor * stats.norm.pdf(x, s.mean, s.std), rtol=1e-12)
        v = lik(np.linspace(-50, 50, 1001))
        assert np.all(v <= 1.0) and np.all(v >= 0.0)
        assert lik(np.array([(9.0 - 0.5) / 90])) == pytest.approx(1.0)

    def test_zero_slope_unsupported(self):
        with pytest.raises(UnsupportedSensorError):
            likelihood_sampler(_lik(0.0, 1.0, 0.01, 9.0))

    def test_non_affine_unsupported(self):
        lik = Likelihood(np.array([1.0]), 0.1, lambda x: np.sin(x), None)
        with pytest.raises(UnsupportedSensorError):
            likelihood_sampler(lik)


class TestNormalizer:
    def test_constant_prior_unbounded_domain(self):
        lik = _lik(90.0, 0.0, 0.01, 9.0)
        c, acc = estimate_normalizer(Constant(1.0), lik, 1000, seed=0)
        assert c == pytest.approx(math.sqrt(2 * math.pi / (0.01 * 90**2)), rel=1e-14)
        assert acc == 1.0

    def test_acceptance_rate_matches_normal_cdf(self):
        dom = Box.interval(-0.5, 0.5)
        lik = _lik(90.0, 0.0, 0.01, 0.0)
        n = 100_000
        _, acc = estimate_normalizer(Constant(1.0, dom), lik, n, seed=1, domain=dom)
        p = stats.norm.cdf(4.5) - stats.norm.cdf(-4.5)
        assert round(p, 5) == 0.99999
        assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1 / n

    def test_acceptance_rate_off_centre(self):
        dom = Box.interval(-0.5, 0.5)
        lik = _lik(90.0, 0.0, 0.01, 36.0)  # likelihood centred at 0.4
        n = 100_000
        c, acc = estimate_normalizer(Constant(1.0, dom), lik, n, seed=2, domain=dom)
        p = stats.norm.cdf(0.9) - stats.norm.cdf(-8.1)
        assert abs(acc - p) < 4 * math.sqrt(p * (1 - p) / n)
        assert c == pytest.approx(acc * math.sqrt(2 * math.pi) / 9, rel=1e-12)

    def test_paper_literal_mode_drops_prefactor(self):
        lik = _lik(90.0, 0.0, 0.01, 9.0)
        c, _ = estimate_normalizer(Constant(2.0), lik, 100, seed=0, mode="paper_literal")
        assert c == 2.0

    def test_non_positive_constant(self):
        dom = Box.interval(-0.5, 0.5)
        with pytest.raises(DegeneratePosteriorError):
            estimate_normalizer(Constant(-1.0, dom), _lik(90.0, 0.0, 0.01, 0.0), 100, seed=0)
        # likelihood mass entirely outside the domain
        with pytest.raises(DegeneratePosteriorError, match="acceptance rate 0.000"):
            estimate_normalizer(Constant(1.0, dom), _lik(90.0, 0.0, 0.01, 900.0), 100, seed=0, domain=dom)

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            estimate_normalizer(Constant(1.0), _lik(1.0, 0.0, 1.0, 0.0), 0, seed=0)

    def test_deterministic(self):
        lik = _lik(90.0, 0.0, 0.01, 3.0)
        prior = GaussianDensity(0.0, 0.05, Box.interval(-0.5, 0.5))
        a = estimate_normalizer(prior, lik, 5000, substream(3, "normalizer", 1))
        b = estimate_normalizer(prior, lik, 5000, substream(3, "normalizer", 1))
        assert a == b


@pytest.fixture(scope="module")
def trained_case1_prior():
    m = CASE1.build_model()
    dom = CASE1.domain
    nd, _ = train_network(m, dom, (0.0, 0.01), GaussianDensity(0.0, 0.01, dom),
                          CASE1.with_budget(1500).training(), CASE1.seed, 1)
    return nd


class TestPosterior:
    def test_mc_normalizer_matches_quadrature(self, trained_case1_prior):
        lik = _lik(90.0, 0.0, 0.01, -1.5)
        c_mc, _ = estimate_normalizer(trained_case1_prior, lik, 100_000, seed=7, domain=CASE1.domain)
        c_q = quadrature_normalizer(trained_case1_prior, lik, CASE1.domain)
        assert abs(c_mc - c_q) / c_q < 0.01

    def test_scale_invariance(self, trained_case1_prior):
        lik = _lik(90.0, 0.0, 0.01, 2.0)
        dom = CASE1.domain
        scaled = lambda x: 3.7 * trained_case1_prior(x)
        c1 = quadrature_normalizer(trained_case1_prior, lik, dom)
        c2 = quadrature_normalizer(scaled, lik, dom)
        assert c2 == pytest.approx(3.7 * c1, rel=1e-12)
        x = dom.grid(501)[:, None]
        p1 = Posterior(trained_case1_prior, lik, c1, dom)(x)
        p2 = Posterior(scaled, lik, c2, dom)(x)
        np.testing.assert_allclose(p2, p1, rtol=0, atol=1e-10)

    def test_normalised_and_supported(self, trained_case1_prior):
        dom = CASE1.domain
        lik = _lik(90.0, 0.0, 0.01, 0.5)
        c, acc = estimate_normalizer(trained_case1_prior, lik, 100_000, seed=3, domain=dom)
        post = Posterior(trained_case1_prior, lik, c, dom, acc)
        x = dom.grid(2001)
        mass = float(np.sum(post(x)) - 0.5 * (post(x[:1])[0] + post(x[-1:])[0])) * (x[1] - x[0])
        assert 0.97 <= mass <= 1.03
        np.testing.assert_array_equal(post(np.array([[-0.6], [0.51]])), 0.0)
        prior_vals = trained_case1_prior(x[:, None])
        assert np.all(post(x)[prior_vals >= 0] >= 0)


class TestRunFilter:
    def _cfg(self, **kw):
        base = dict(steps=2, reference_paths=100, reference_points=21, normalizer_samples=2000,
                    export_points=201, checkpoint_every=20)
        base.update(kw)
        return CASE1.with_overrides(**base).with_budget(40)

    def test_short_run_structure(self):
        res = run_filter(self._cfg())
        assert len(res.steps) == 2 and res.error is None
        d = res.diagnostics[1]
        assert d.step == 2 and d.time == pytest.approx(0.02)
        assert d.exact_mean == pytest.approx(float(res.kalman[2].mean[0]))
        assert d.abs_mean_error == pytest.approx(abs(d.posterior_mean - d.exact_mean))
        assert 0.0 <= d.mc_acceptance_rate <= 1.0
        assert d.l2_vs_reference is not None and d.reference_mass is not None
        assert res.steps[0].grid.size == 201

    def test_deterministic(self):
        a = run_filter(self._cfg(seed=3))
        b = run_filter(self._cfg(seed=3))
        assert a.diagnostics == b.diagnostics

    def test_abort_policy_keeps_partial_results(self):
        with pytest.raises(FilterAborted) as info:
            run_filter(self._cfg(min_acceptance=1.0 + 1e-9, flag_acceptance=1.0 + 1e-9))
        res = info.value.result
        assert len(res.steps) == 1
        assert "acceptance rate" in res.error and res.diagnostics[0].flagged

    def test_continue_policy(self):
        res = run_filter(self._cfg(min_acceptance=1.0 + 1e-9, on_error="continue"))
        assert len(res.steps) == 2 and res.error is None

    def test_benes_uses_grid_oracle(self):
        cfg = preset("benes").with_overrides(
            steps=1, reference_paths=0, normalizer_samples=2000, export_points=201,
            oracle_dx=0.02).with_budget(30)
        res = run_filter(cfg)
        assert res.kalman is None and len(res.grid_oracle) == 2
        _, m, s = res.grid_oracle[1].moments()
        assert res.diagnostics[0].exact_mean == pytest.approx(m)
        assert res.diagnostics[0].l2_vs_reference is None
