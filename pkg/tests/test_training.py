import math

import numpy as np
import pytest

from splitfilter.config import preset
from splitfilter.diagnostics import l2_grid_error, trapezoid
from splitfilter.domain import Box
from splitfilter.filter import GaussianDensity
from splitfilter.model import LinearModelParams, make_linear_model
from splitfilter.nn import NetworkArchitecture, initialize
from splitfilter.reference import fk_pointwise_reference, reference_points
from splitfilter.sde import PathBatch, sample_auxiliary_batch, substream
from splitfilter.training import (
    ReferenceGrid, TrainingConfig, TrainingError, batch_loss, regression_targets, train_network,
)

CASE1 = preset("linear-case1")
DOMAIN = Box.interval(-0.5, 0.5)


def _batch(model, n=64, seed=0):
    return sample_auxiliary_batch(model, DOMAIN, 0.0, 0.01, 10, n, seed)


class TestBatchLoss:
    def test_zero_target_is_mean_square(self):
        arch = NetworkArchitecture()
        p = initialize(arch, 1)
        b = _batch(CASE1.build_model())
        res = batch_loss(p, arch, b, lambda x: np.zeros(x.shape[0]), lam=0.0)
        assert res.value == pytest.approx(float(np.mean(res.outputs ** 2)), rel=1e-14)

    def test_zero_network_zero_loss(self):
        arch = NetworkArchitecture()
        p = initialize(arch, 1)
        for k in p.weights:
            p.weights[k][...] = 0.0
        b = _batch(CASE1.build_model())
        res = batch_loss(p, arch, b, lambda x: np.zeros(x.shape[0]), lam=1.0)
        assert res.value == 0.0
        assert all(np.all(g == 0) for g in res.grads.values())

    def test_degenerate_diffusion_targets_are_psi(self):
        m = make_linear_model(LinearModelParams.scalar(0.0, 0.0, 0.0, 1.0, 0.0))
        b = _batch(m)
        psi = GaussianDensity(0.1, 0.2, DOMAIN)
        np.testing.assert_array_equal(regression_targets(b, psi), psi(b.starts))

    @pytest.mark.parametrize("sign", ["intent", "paper_literal"])
    def test_penalty_values(self, sign):
        arch = NetworkArchitecture()
        p = initialize(arch, 2)
        b = _batch(CASE1.build_model(), seed=2)
        psi = lambda x: np.zeros(x.shape[0])
        base = batch_loss(p, arch, b, psi, lam=0.0)
        pen = batch_loss(p, arch, b, psi, lam=0.5, penalty_sign=sign)
        nn = base.outputs
        extra = 0.5 * (np.mean(np.maximum(0, -nn)) if sign == "intent" else np.sum(np.maximum(0, nn)))
        assert pen.value == pytest.approx(base.value + extra, rel=1e-13)

    @pytest.mark.parametrize("sign", ["intent", "paper_literal"])
    def test_penalised_gradient_matches_finite_difference(self, sign):
        arch = NetworkArchitecture(1, (6,), 1)
        p = initialize(arch, 3)
        b = _batch(CASE1.build_model(), n=16, seed=3)
        psi = GaussianDensity(0.0, 0.1, DOMAIN)
        res = batch_loss(p, arch, b, psi, lam=0.7, penalty_sign=sign)
        key, idx, h = "dense2.W", (2, 0), 1e-6
        q = p.copy()
        q.weights[key][idx] += h
        up = batch_loss(q, arch, b, psi, lam=0.7, penalty_sign=sign).value
        q.weights[key][idx] -= 2 * h
        dn = batch_loss(q, arch, b, psi, lam=0.7, penalty_sign=sign).value
        assert res.grads[key][idx] == pytest.approx((up - dn) / (2 * h), rel=1e-5)

    def test_frozen_batch_bit_identical(self):
        arch = NetworkArchitecture()
        p = initialize(arch, 4)
        b = _batch(CASE1.build_model(), seed=4)
        psi = GaussianDensity(0.0, 0.01, DOMAIN)
        r1 = batch_loss(p, arch, b, psi, lam=1.0)
        r2 = batch_loss(p, arch, b, psi, lam=1.0)
        assert r1.value == r2.value
        for k in r1.grads:
            np.testing.assert_array_equal(r1.grads[k], r2.grads[k])

    def test_non_finite_target_names_sample(self):
        arch = NetworkArchitecture()
        b = _batch(CASE1.build_model(), n=10)

        def psi(x):
            out = np.ones(x.shape[0])
            out[7] = np.inf
            return out

        with pytest.raises(TrainingError, match="sample 7"):
            batch_loss(initialize(arch, 0), arch, b, psi)

    def test_case1_target_mean_matches_ou_pushforward(self):
        # E[psi(X_T) exp(dt) | X_0 = x] with X_T ~ N(e^dt x, Q) and psi = N(0, s^2):
        # exp(dt) * N(e^dt x; 0, s^2 + Q)
        m = CASE1.build_model()
        psi = GaussianDensity(0.0, 0.01, Box.interval(-10, 10))
        dt = 0.01
        delta = dt / 10
        # variance of the 10-step Euler scheme for dX = X dt + 0.1 dW
        q = sum((1 + delta) ** (2 * k) for k in range(10)) * 0.01 * delta
        for x0 in (0.0, 0.01, -0.02):
            starts = np.full((100_000, 1), x0)
            rng = substream(5, "test", int(round(1000 * x0)) + 100)
            from splitfilter.sde import euler_maruyama_auxiliary

            paths, k_int = euler_maruyama_auxiliary(m, starts, dt, 10, rng)
            y = psi(paths[:, -1]) * np.exp(-k_int)
            mean_x = (1 + delta) ** 10 * x0
            var = 1e-4 + q
            exact = math.exp(dt) * math.exp(-0.5 * mean_x**2 / var) / math.sqrt(2 * math.pi * var)
            se = y.std(ddof=1) / math.sqrt(y.size)
            assert abs(y.mean() - exact) < 3 * se, (x0, y.mean(), exact, se)


def _quick(epochs=300, **kw):
    return CASE1.with_overrides(**kw).with_budget(epochs).training()


class TestTrainNetwork:
    def test_deterministic_replay(self):
        m = CASE1.build_model()
        psi = GaussianDensity(0.0, 0.03, DOMAIN)
        _, r1 = train_network(m, DOMAIN, (0.0, 0.01), psi, _quick(60), seed=3, step=2)
        _, r2 = train_network(m, DOMAIN, (0.0, 0.01), psi, _quick(60), seed=3, step=2)
        np.testing.assert_array_equal(r1.losses, r2.losses)
        _, r3 = train_network(m, DOMAIN, (0.0, 0.01), psi, _quick(60), seed=4, step=2)
        assert not np.array_equal(r1.losses, r3.losses)

    def test_report_shape_and_csv(self, tmp_path):
        m = CASE1.build_model()
        psi = GaussianDensity(0.0, 0.03, DOMAIN)
        x = reference_points(DOMAIN, 21)
        ref = ReferenceGrid(x[:, 0], psi(x))
        hyper = CASE1.with_overrides(checkpoint_every=20).with_budget(50).training()
        nd, rep = train_network(m, DOMAIN, (0.0, 0.01), psi, hyper, seed=1, reference=ref)
        assert rep.losses.shape == rep.lrs.shape == (50,)
        assert rep.checkpoint_epochs == [20, 40, 50]
        assert rep.final_l2 == pytest.approx(l2_grid_error(nd(x), ref.values, ref.spacing))
        path = tmp_path / "train.csv"
        rep.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,lr,l2_ref"
        assert len(lines) == 51
        assert lines[20].split(",")[3] != "" and lines[21].split(",")[3] == ""

    def test_degenerate_regression(self):
        # sigma = 0, b = 0, r = 0: the network is fitted directly to psi
        m = make_linear_model(LinearModelParams.scalar(0.0, 0.0, 0.0, 1.0, 0.0))
        psi = GaussianDensity(0.0, 0.2, DOMAIN)
        nd, _ = train_network(m, DOMAIN, (0.0, 0.01), psi, CASE1.training(), seed=7)
        x = DOMAIN.grid(2001)[:, None]
        err = math.sqrt(trapezoid((nd(x) - psi(x)) ** 2, 5e-4) / trapezoid(psi(x) ** 2, 5e-4))
        assert err < 0.02

    def test_penalty_suppresses_negative_output(self):
        m = CASE1.build_model()
        psi = GaussianDensity(0.0, 0.03, DOMAIN)
        grid = DOMAIN.grid(201)[:, None]
        with_pen, rep = train_network(m, DOMAIN, (0.0, 0.01), psi, CASE1.training(), seed=7)
        assert np.mean(with_pen(grid) < -1e-3) <= 0.01
        # loss decreases over training
        assert rep.losses[-1000:].mean() < rep.losses[:1000].mean()
        without, _ = train_network(m, DOMAIN, (0.0, 0.01), psi,
                                   CASE1.with_overrides(penalty_lambda=0.0).training(), seed=7)
        assert np.mean(without(grid) < -1e-3) > np.mean(with_pen(grid) < -1e-3)


@pytest.fixture(scope="module")
def case1_step1():
    m = CASE1.build_model()
    psi = GaussianDensity(0.0, 0.01, DOMAIN)
    x = reference_points(DOMAIN, 201)
    vals, _ = fk_pointwise_reference(m, psi, x, (0.0, 0.01), 1000, seed=CASE1.seed, step=1)
    ref = ReferenceGrid(x[:, 0], vals)
    nd, rep = train_network(m, DOMAIN, (0.0, 0.01), psi, CASE1.training(), CASE1.seed, 1, ref)
    return nd, rep, ref


class TestCase1FirstStep:
    def test_midpoint_positive(self, case1_step1):
        nd, _, _ = case1_step1
        assert nd(np.zeros((1, 1)))[0] > 0

    def test_loss_decreases(self, case1_step1):
        _, rep, _ = case1_step1
        assert rep.losses[-1000:].mean() < rep.losses[:1000].mean()

    def test_relative_l2_against_reference(self, case1_step1):
        # Target band: final L2 error below 5% of the reference L2 norm.
        nd, rep, ref = case1_step1
        norm = math.sqrt(np.sum(ref.values ** 2) * ref.spacing)
        rel = rep.final_l2 / norm
        print(f"case-1 step-1 relative L2 error: {rel:.4f}")
        assert rel < 0.05
