"""Adaptive step halving and predictor-corrector baselines."""

import numpy as np
import pytest

from erkguid.baselines import (
    adaptive_step_batch,
    adaptive_step_sample,
    corrector_move,
    pc_batch,
    pc_corrector_step,
    pc_sample,
)
from erkguid.core import GUIDANCE_OFF, ConfigurationError, GuidanceConfig
from erkguid.fields import single_gaussian
from erkguid.sampler import sample_batch


class TestAdaptive:
    def test_infinite_threshold_is_heun(self, tree, sched32):
        a = adaptive_step_batch(tree, sched32, np.inf, master_seed=1, count=16)
        b = sample_batch(tree, sched32, guidance=GUIDANCE_OFF, master_seed=1, count=16)
        np.testing.assert_array_equal(a.endpoints, b.endpoints)
        np.testing.assert_array_equal(a.trace.nfe, b.trace.nfe)
        assert not a.trace.halved.any()

    def test_tiny_threshold_halves_every_paired_step(self, tree, sched32):
        res = adaptive_step_batch(tree, sched32, 1e-12, count=8)
        halved = res.trace.halved
        assert not halved[0].any() and halved[1:].all()
        # every halved step costs two extra evaluations, the final Euler step included
        np.testing.assert_array_equal(res.trace.nfe, 63 + 2 * 31)

    def test_nfe_accounting(self, tree, sched32):
        res = adaptive_step_batch(tree, sched32, 0.5, count=64)
        np.testing.assert_array_equal(res.trace.nfe, 63 + 2 * res.trace.halved.sum(axis=0))

    def test_halving_decision_follows_threshold(self, tree, sched32):
        t = adaptive_step_batch(tree, sched32, 0.5, count=64).trace
        assert np.all(t.rho_hat[t.halved] > 0.5)
        assert not np.any(t.halved & ~(t.rho_hat > 0.5))

    def test_more_evaluations_than_erk(self, tree, sched32):
        a = adaptive_step_batch(tree, sched32, 0.5, count=64)
        b = sample_batch(tree, sched32, guidance=GuidanceConfig(), count=64)
        assert a.trace.nfe.mean() > b.trace.nfe.mean()

    def test_single_sample_matches_batch(self, tree, sched32):
        batch = adaptive_step_batch(tree, sched32, 0.5, master_seed=2, count=5)
        end, rows = adaptive_step_sample(tree, sched32, 0.5, seed=2, index=3)
        np.testing.assert_array_equal(end, batch.endpoints[3])
        assert len(rows) == 32

    def test_invalid_threshold(self, tree, sched32):
        with pytest.raises(ConfigurationError):
            adaptive_step_batch(tree, sched32, 0.0)


class TestCorrectorMove:
    def test_zero_radius_identity(self, tree, rng):
        x = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(pc_corrector_step(tree, x, 0.3, 0.0), x)
        np.testing.assert_array_equal(pc_corrector_step(tree, x, 0.3, 0.0, stochastic=True, seed=0), x)

    def test_fixed_point_at_mode(self):
        gm = single_gaussian((0.5, -0.5), 1.0)
        x = np.array([0.5, -0.5])
        out, eps = corrector_move(gm, x, 0.2, 0.1)
        np.testing.assert_array_equal(out, x)
        assert eps == 0.0

    def test_deterministic_moves_toward_mean(self, rng):
        gm = single_gaussian()
        x = rng.normal(size=(10, 2)) * 3
        out = pc_corrector_step(gm, x, 0.5, 0.05)
        assert np.all(np.linalg.norm(out, axis=1) < np.linalg.norm(x, axis=1))

    def test_deterministic_step_size(self):
        gm = single_gaussian()
        x = np.array([2.0, 0.0])
        s = gm.score(x, 1.0)
        out, eps = corrector_move(gm, x, 1.0, 0.1)
        np.testing.assert_allclose(eps, 2 * (0.1 * np.sqrt(2) / np.linalg.norm(s)) ** 2)
        np.testing.assert_allclose(out, x + eps * s)

    def test_stochastic_with_given_noise(self):
        gm = single_gaussian()
        x, z = np.array([2.0, 0.0]), np.array([0.3, -0.4])
        s = gm.score(x, 1.0)
        out, eps = corrector_move(gm, x, 1.0, 0.1, stochastic=True, noise=z)
        np.testing.assert_allclose(eps, 2 * (0.1 * 0.5 / np.linalg.norm(s)) ** 2)
        np.testing.assert_allclose(out, x + eps * s + np.sqrt(2 * eps) * z)

    @pytest.mark.parametrize("sigma,r", [(0.0, 0.1), (1.0, -0.1)])
    def test_invalid(self, tree, sigma, r):
        with pytest.raises(ConfigurationError):
            corrector_move(tree, np.zeros(2), sigma, r)


class TestPredictorCorrector:
    def test_zero_radius_is_heun(self, tree, sched32):
        a = pc_batch(tree, sched32, 0.0, master_seed=4, count=12)
        b = sample_batch(tree, sched32, guidance=GUIDANCE_OFF, master_seed=4, count=12)
        np.testing.assert_array_equal(a.endpoints, b.endpoints)

    def test_nfe(self, tree, sched32):
        res = pc_batch(tree, sched32, 0.05, count=3)
        assert np.all(res.trace.nfe == 63 + 31)

    def test_stochastic_reproducible(self, tree, sched32):
        a = pc_batch(tree, sched32, 0.05, stochastic=True, master_seed=9, count=6)
        b = pc_batch(tree, sched32, 0.05, stochastic=True, master_seed=9, count=6, jobs=2)
        np.testing.assert_array_equal(a.endpoints, b.endpoints)
        end, _ = pc_sample(tree, sched32, 0.05, stochastic=True, seed=9, index=5)
        np.testing.assert_array_equal(end, a.endpoints[5])

    def test_stochastic_differs_from_deterministic(self, tree, sched32):
        a = pc_batch(tree, sched32, 0.05, stochastic=True, count=4)
        b = pc_batch(tree, sched32, 0.05, stochastic=False, count=4)
        assert not np.array_equal(a.endpoints, b.endpoints)

    def test_eps_traced(self, tree, sched32):
        t = pc_batch(tree, sched32, 0.05, count=4).trace
        assert np.all(t.corrector_eps[:-1] > 0) and np.all(t.corrector_eps[-1] == 0)
