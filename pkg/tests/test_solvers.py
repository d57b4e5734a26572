"""Single-step integrators and the fine-substep reference solver."""

import math

import numpy as np
import pytest

from erkguid.analysis import single_gaussian_flow
from erkguid.core import ConfigurationError
from erkguid.fields import LinearField
from erkguid.solvers import History, deis_ab2_step, dpm2s_step, euler_step, heun_step, reference_solve

IDENTITY = LinearField(np.eye(1))  # f(x) = x, constant in sigma
ZERO = LinearField(np.zeros((2, 2)))


class CountingField:
    def __init__(self, field):
        self.field, self.calls = field, 0
        self.dim, self.nfe_cost = field.dim, 1

    def drift(self, x, sigma):
        self.calls += 1
        return self.field.drift(x, sigma)


class TestEuler:
    def test_scalar(self):
        res = euler_step(IDENTITY, np.array([1.0]), 1.1, 1.0)
        np.testing.assert_allclose(res.x_next, [0.9])
        assert res.evals_used == 1 and res.pair is None

    def test_cached_drift(self):
        res = euler_step(IDENTITY, np.array([1.0]), 1.1, 1.0, f_i=np.array([1.0]))
        assert res.evals_used == 0

    def test_zero_drift(self):
        x = np.array([0.3, -0.7])
        np.testing.assert_array_equal(euler_step(ZERO, x, 1.0, 0.5).x_next, x)

    @pytest.mark.parametrize("si,sn", [(1.0, 1.0), (1.0, 2.0), (1.0, -0.1)])
    def test_interval_checked(self, si, sn):
        with pytest.raises(ConfigurationError):
            euler_step(IDENTITY, np.ones(1), si, sn)


class TestHeun:
    def test_scalar_update_and_pair(self):
        res = heun_step(IDENTITY, np.array([1.0]), 1.1, 1.0)
        np.testing.assert_allclose(res.pair.x_low, [0.9])
        np.testing.assert_allclose(res.x_next, [0.905])
        np.testing.assert_allclose(res.x_next - math.exp(-0.1), 1.6258196404042683e-4, rtol=1e-9)
        assert res.pair.sigma == 1.0 and res.pair.f_high is None
        assert res.evals_used == 2

    def test_difference_identity(self, tree, rng):
        x = rng.normal(size=(6, 2))
        si, sn = 0.7, 0.5
        f_i = tree.drift(x, si)
        res = heun_step(tree, x, si, sn, f_i)
        np.testing.assert_allclose(res.pair.dx, (si - sn) / 2 * (f_i - res.pair.f_low), atol=1e-15)

    def test_zero_drift_pair_states_equal(self):
        x = np.array([0.3, -0.7])
        res = heun_step(ZERO, x, 1.0, 0.5)
        np.testing.assert_array_equal(res.x_next, x)
        np.testing.assert_array_equal(res.pair.x_low, res.pair.x_high)

    def test_final_step_is_euler(self, tree):
        x = np.array([0.2, 0.1])
        res = heun_step(tree, x, 0.002, 0.0)
        assert res.pair is None and res.evals_used == 1
        np.testing.assert_array_equal(res.x_next, euler_step(tree, x, 0.002, 0.0).x_next)

    def test_evals_counted(self, tree):
        counting = CountingField(tree)
        res = heun_step(counting, np.zeros(2), 1.0, 0.5)
        assert res.evals_used == counting.calls == 2


class TestDPM2S:
    def test_geometric_midpoint(self):
        res = dpm2s_step(IDENTITY, np.array([1.0]), 4.0, 1.0)
        assert res.pair.sigma == 2.0 and res.pair.sigma_low == 4.0 and res.pair.mixed_sigma

    def test_linear_midpoint_update(self):
        # x_mid = x (1 - (si - sm)), x_next = x - h x_mid
        res = dpm2s_step(IDENTITY, np.array([1.0]), 4.0, 1.0)
        np.testing.assert_allclose(res.pair.x_high, [1.0 - 2.0])
        np.testing.assert_allclose(res.x_next, [1.0 - 3.0 * (1.0 - 2.0)])
        assert res.evals_used == 2

    def test_zero_drift(self):
        x = np.array([0.3, -0.7])
        res = dpm2s_step(ZERO, x, 1.0, 0.5)
        np.testing.assert_array_equal(res.x_next, x)
        np.testing.assert_array_equal(res.pair.x_high, x)

    def test_final_step_is_euler(self):
        res = dpm2s_step(IDENTITY, np.array([1.0]), 0.5, 0.0)
        assert res.pair is None
        np.testing.assert_allclose(res.x_next, [0.5])


class TestDEIS:
    def test_bootstrap_is_heun(self, tree):
        x = np.array([0.3, 0.2])
        np.testing.assert_array_equal(deis_ab2_step(tree, x, 1.0, 0.5).x_next, heun_step(tree, x, 1.0, 0.5).x_next)

    def test_constant_drift_reduces_to_euler(self):
        c = np.array([2.0, -1.0])

        class Constant:
            dim = 2

            def drift(self, x, sigma):
                return np.broadcast_to(c, np.shape(x)).copy()

        x = np.array([1.0, 1.0])
        prev = History(x + 0.1 * c, c, 1.1, 0.1)
        res = deis_ab2_step(Constant(), x, 1.0, 0.9, prev)
        np.testing.assert_allclose(res.x_next, x - 0.1 * c, rtol=1e-15)
        assert res.evals_used == 1

    def test_textbook_recursion(self):
        # equal steps on f = x: x_{n+1} = x_n - h (3/2 x_n - 1/2 x_{n-1})
        h = 0.05
        xs = [np.array([1.0]), np.array([1.0 - h])]
        prev = History(xs[0], xs[0].copy(), 1.0, h)
        for n in range(1, 6):
            s = 1.0 - n * h
            res = deis_ab2_step(IDENTITY, xs[n], s, s - h, prev)
            expected = xs[n] - h * (1.5 * xs[n] - 0.5 * xs[n - 1])
            np.testing.assert_allclose(res.x_next, expected, rtol=1e-15)
            prev = History(xs[n], xs[n].copy(), s, h)
            xs.append(res.x_next)

    def test_pair_uses_history(self):
        prev = History(np.array([2.0]), np.array([2.0]), 1.5, 0.5)
        res = deis_ab2_step(IDENTITY, np.array([1.0]), 1.0, 0.5, prev)
        assert res.pair.sigma == 1.0 and res.pair.sigma_low == 1.5
        np.testing.assert_array_equal(res.pair.x_low, [2.0])


class TestReferenceSolve:
    def test_single_substep_is_heun(self, tree):
        x = np.array([0.4, -0.3])
        np.testing.assert_array_equal(reference_solve(tree, x, 0.8, 0.6, 1), heun_step(tree, x, 0.8, 0.6).x_next)

    def test_linear_closed_form(self):
        out = reference_solve(IDENTITY, np.array([1.0]), 2.0, 1.0, 4000)
        np.testing.assert_allclose(out, [math.exp(-1.0)], atol=1e-8)

    def test_single_gaussian_closed_form(self, gauss):
        x0 = np.array([[1.5, -0.5], [3.0, 2.0]])
        out = reference_solve(gauss, x0, 2.0, 0.5, 2000)
        np.testing.assert_allclose(out, single_gaussian_flow(x0, 2.0, 0.5), atol=2e-7)

    def test_refinement_converges(self, tree):
        x = np.array([0.3, 0.4])
        a, b, c = (reference_solve(tree, x, 0.5, 0.3, n) for n in (25, 50, 100))
        assert np.linalg.norm(c - b) < np.linalg.norm(b - a) / 3

    def test_invalid_substeps(self, tree):
        with pytest.raises(ConfigurationError):
            reference_solve(tree, np.zeros(2), 1.0, 0.5, 0)
