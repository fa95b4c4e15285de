import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavnoma.config import ScenarioConfig
from uavnoma.phy import (Allocation, InfeasibleAllocation, achievable_rate, channel_gain,
                         channel_gains, check_constraints, distance, marginal_rates,
                         noise_power, rate_matrix, sic_order, sic_permutation, sum_rate,
                         sum_rates, synthesize_received)
from uavnoma.scenario import generate_uav_trajectory

# frozen from direct evaluation of log2(1 + 0.01 / 0.0011) and log2(11)
FIRST_DECODED = 3.3349842477
LAST_DECODED = 3.4594316186


class TestDistance:
    def test_overhead(self):
        assert distance((0.0, 0.0), 50.0) == 50.0

    def test_offset(self):
        assert np.isclose(distance((30.0, 40.0), 50.0), 70.71067811865476, rtol=1e-14)

    @given(st.floats(-500, 500), st.floats(-500, 500), st.floats(0, 2 * np.pi),
           st.floats(1, 200))
    def test_rotation_invariant(self, x, y, angle, h):
        c, s = np.cos(angle), np.sin(angle)
        r = distance((c * x - s * y, s * x + c * y), h)
        assert np.isclose(r, distance((x, y), h), rtol=1e-12)
        assert r >= h

    @pytest.mark.parametrize("q,h", [((np.nan, 0.0), 50.0), ((0.0, np.inf), 50.0),
                                     ((0.0, 0.0), np.nan), ((0.0, 0.0), 0.0)])
    def test_rejects(self, q, h):
        with pytest.raises(ValueError):
            distance(q, h)


class TestChannelGain:
    @pytest.mark.parametrize("alpha", [1.0, 2.0, 3.7])
    def test_unit_distance(self, alpha):
        assert channel_gain(1, 1, 1, 1.0, alpha) == 1.0

    def test_fspl_50m(self):
        assert np.isclose(channel_gain(1, 1, 1, 50.0, 2.0), 4.0e-4, rtol=1e-14)

    def test_doubling(self):
        g1, g2 = channel_gain(1, 1, 1, 37.0, 2.0), channel_gain(1, 1, 1, 74.0, 2.0)
        assert np.isclose(g1 / g2, 4.0, rtol=1e-14)

    @pytest.mark.parametrize("d", [0.0, -3.0])
    def test_rejects_nonpositive(self, d):
        with pytest.raises(ValueError):
            channel_gain(1, 1, 1, d, 2.0)

    def test_decreasing(self):
        d = np.linspace(1, 300, 50)
        assert np.all(np.diff(channel_gain(1, 1, 1, d, 2.0)) < 0)

    def test_gain_matrix_shape(self, rng):
        c = ScenarioConfig.desk()
        su = rng.random((c.num_sus, 3)) * 50
        g = channel_gains(su, np.zeros(2), c)
        assert g.shape == (c.num_subchannels, c.num_sus)
        assert np.all(g > 0) and np.all(np.isfinite(g))


class TestNoise:
    def test_zero_bandwidth(self):
        assert noise_power(-174.0, 0.0) == 0.0

    def test_one_hz(self):
        assert np.isclose(noise_power(-174.0, 1.0), 3.981e-21, rtol=1e-3)

    def test_subchannel(self):
        eta = noise_power(-174.0, 1.4e6 / 6)
        assert abs(10 * np.log10(eta / 9.29e-16)) < 0.1


class TestSicOrder:
    def test_strongest_first(self):
        assert sic_order([(0, 1e-3), (1, 1e-4)]) == (0, 1)

    def test_single(self):
        assert sic_order([(3, 0.5)]) == (3,)

    def test_ties_by_index(self):
        assert sic_order([(2, 1e-3), (1, 1e-3)]) == (1, 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            sic_order([])

    def test_permutation_matches(self, rng):
        g = rng.random((3, 5))
        g[0, 1] = g[0, 3]
        perm = sic_permutation(g)
        for k in range(3):
            assert tuple(perm[k]) == sic_order(enumerate(g[k]))


class TestRates:
    def test_single_user(self):
        a = Allocation.from_powers([[3.0]])
        assert achievable_rate(0, 0, a, np.array([[1.0]]), eta=1.0) == 2.0

    def test_two_users(self):
        a = Allocation.from_powers([[10.0, 10.0]])
        g = np.array([[1e-3, 1e-4]])
        r0 = achievable_rate(0, 0, a, g, eta=1e-4)
        r1 = achievable_rate(0, 1, a, g, eta=1e-4)
        assert np.isclose(r0, FIRST_DECODED, rtol=1e-9)
        assert np.isclose(r1, LAST_DECODED, rtol=1e-9)
        assert np.isclose(sum_rate(a, g, 1e-4), 6.794, atol=1e-3)

    def test_unassigned_zero(self):
        a = Allocation(np.array([[1, 0]]), np.array([[5.0, 0.0]]))
        assert achievable_rate(0, 1, a, np.array([[1e-3, 1e-3]]), eta=1e-4) == 0.0

    def test_empty_allocation(self):
        assert sum_rate(Allocation.idle(3, 4), np.ones((3, 4)), 1e-3) == 0.0

    def test_sic_denominators(self):
        p = np.array([[2.0, 3.0, 5.0]])
        g = np.array([[1e-2, 1e-3, 1e-1]])
        eta = 1e-3
        a = Allocation.from_powers(p)
        # user 2 decoded first, user 1 last
        assert np.isclose(achievable_rate(0, 1, a, g, eta=eta), np.log2(1 + 3e-3 / eta))
        assert np.isclose(achievable_rate(0, 2, a, g, eta=eta),
                          np.log2(1 + 0.5 / (2e-2 + 3e-3 + eta)))

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            K, N = rng.integers(1, 4), rng.integers(1, 5)
            p = rng.random((K, N)) * (rng.random((K, N)) < 0.6)
            g = rng.random((K, N)) * 1e-3
            eta = 1e-5
            a = Allocation.from_powers(p)
            brute = sum(achievable_rate(k, n, a, g, eta=eta)
                        for k, n in itertools.product(range(K), range(N)))
            assert np.isclose(sum_rate(a, g, eta), brute, rtol=1e-12)
            np.testing.assert_allclose(
                rate_matrix(p, g, eta),
                [[achievable_rate(k, n, a, g, eta=eta) for n in range(N)] for k in range(K)],
                rtol=1e-12)

    def test_subchannel_sum_is_capacity(self, rng):
        p = rng.random((2, 4)) * 5
        g = rng.random((2, 4)) * 1e-3
        eta = 1e-4
        per_k = rate_matrix(p, g, eta).sum(axis=1)
        np.testing.assert_allclose(per_k, np.log2(1 + (p * g).sum(axis=1) / eta), rtol=1e-12)

    def test_occupied_subchannel_yields_nothing(self):
        p = np.array([[1.0, 0.0], [0.0, 1.0]])
        r = rate_matrix(p, np.full((2, 2), 1e-3), 1e-4, occupied=np.array([True, False]))
        assert r[0].sum() == 0.0 and r[1, 1] > 0

    def test_batch(self, rng):
        P = rng.random((6, 2, 3))
        g = rng.random((2, 3))
        np.testing.assert_allclose(sum_rates(P, g, 0.1),
                                   [rate_matrix(p, g, 0.1).sum() for p in P], rtol=1e-12)

    def test_marginal_rates(self):
        p = np.array([[10.0, 10.0]])
        g = np.array([[1e-3, 1e-4]])
        m = marginal_rates(p, g, 1e-4)
        total = FIRST_DECODED + LAST_DECODED
        np.testing.assert_allclose(m, [total - np.log2(11), total - np.log2(1 + 1e-2 / 1e-4)],
                                   rtol=1e-9)

    @settings(max_examples=50)
    @given(st.floats(0.01, 10), st.floats(1e-6, 1e-2), st.floats(1e-8, 1e-4),
           st.floats(1.01, 3))
    def test_monotone(self, p, g, eta, f):
        def rate(p, g, eta):
            return achievable_rate(0, 0, Allocation.from_powers([[p]]), np.array([[g]]), eta=eta)
        r = rate(p, g, eta)
        assert rate(p * f, g, eta) > r
        assert rate(p, g * f, eta) > r
        assert rate(p, g, eta * f) < r


class TestAllocation:
    def test_validate(self):
        Allocation.from_powers([[1.0, 0.0]]).validate(p_max=1.0, max_multiplexed=1)
        with pytest.raises(InfeasibleAllocation):
            Allocation(np.array([[0]]), np.array([[1.0]])).validate()
        with pytest.raises(InfeasibleAllocation):
            Allocation.from_powers([[-1.0]]).validate()
        with pytest.raises(InfeasibleAllocation):
            Allocation.from_powers([[15.0], [10.0]]).validate(p_max=20.0)
        with pytest.raises(InfeasibleAllocation):
            Allocation.from_powers([[1.0, 1.0, 1.0]]).validate(max_multiplexed=2)

    def test_sum_rate_rejects_infeasible(self):
        with pytest.raises(InfeasibleAllocation):
            sum_rate(Allocation(np.array([[2]]), np.array([[1.0]])), np.ones((1, 1)), 1.0)


class TestConstraints:
    def test_power_budget_pass(self):
        c = ScenarioConfig(num_sus=1, num_subchannels=2, max_multiplexed=1)
        rep = check_constraints(Allocation.from_powers([[12.0], [7.0]]), None, c)
        assert rep.passed["C1"] and rep.feasible

    def test_power_budget_fail(self):
        c = ScenarioConfig(num_sus=1, num_subchannels=2, max_multiplexed=1)
        rep = check_constraints(Allocation.from_powers([[12.0], [9.0]]), None, c)
        assert rep.violations == ["C1"]

    def test_negative_power(self):
        c = ScenarioConfig(num_sus=1, num_subchannels=1, max_multiplexed=1)
        rep = check_constraints(Allocation(np.array([[1]]), np.array([[-1.0]])), None, c)
        assert "C2" in rep.violations

    def test_non_binary(self):
        c = ScenarioConfig(num_sus=1, num_subchannels=1, max_multiplexed=1)
        rep = check_constraints(Allocation(np.array([[2]]), np.array([[1.0]])), None, c)
        assert "C3" in rep.violations

    def test_too_many_users(self):
        c = ScenarioConfig(num_sus=3, num_subchannels=1, max_multiplexed=2)
        rep = check_constraints(Allocation.from_powers([[1.0, 1.0, 1.0]]), None, c)
        assert rep.violations == ["C4"]

    def test_allocation_ok(self):
        c = ScenarioConfig(num_sus=3, num_subchannels=1, max_multiplexed=2)
        assert check_constraints(Allocation.from_powers([[1.0, 1.0, 0.0]]), None, c).allocation_ok
        for p in ([[1.0, 1.0, 1.0]], [[25.0, 0.0, 0.0]]):
            assert not check_constraints(Allocation.from_powers(p), None, c).allocation_ok

    def test_trajectory_anchor(self, rng):
        c = ScenarioConfig(uav_start=(5.0, 5.0))
        traj = generate_uav_trajectory(c, rng)
        alloc = Allocation.idle(c.num_subchannels, c.num_sus)
        assert check_constraints(alloc, traj, c).passed["C5"]
        other = ScenarioConfig(uav_start=(0.0, 0.0))
        assert "C5" in check_constraints(alloc, traj, other).violations

    def test_sic_flag(self):
        c = ScenarioConfig(num_sus=2, num_subchannels=1, max_multiplexed=2)
        g = np.array([[1e-3, 1e-3]])
        rep = check_constraints(Allocation.from_powers([[5.0, 5.0]]), None, c, gains=g)
        assert rep.sic_unreliable == [0] and rep.feasible


class TestSynthesis:
    def _g(self, n=2):
        return np.full((1, n), 1e-2)

    def test_noise_only_variance(self, rng):
        eta = 2e-3
        y = synthesize_received(Allocation.idle(1, 2), self._g(), [False], eta, rng,
                                block_length=10_000)
        assert abs(np.mean(np.abs(y) ** 2) / eta - 1) < 0.05

    def test_single_user_constellation(self, rng):
        a = Allocation.from_powers([[4.0, 0.0]])
        y = synthesize_received(a, self._g(), [False], 0.0, rng, block_length=500)
        pts = np.unique(np.round(y[0], 12))
        assert pts.size == 4
        np.testing.assert_allclose(np.abs(pts), np.sqrt(4.0 * 1e-2), rtol=1e-9)

    def test_superposition(self):
        a = Allocation.from_powers([[4.0, 1.0]])
        solo0 = Allocation.from_powers([[4.0, 0.0]])
        solo1 = Allocation.from_powers([[0.0, 1.0]])
        out = [synthesize_received(x, self._g(), [False], 0.0, np.random.default_rng(9))
               for x in (a, solo0, solo1)]
        np.testing.assert_array_equal(out[0], out[1] + out[2])

    def test_distinct_rotations(self, rng):
        a0 = Allocation.from_powers([[1.0, 0.0]])
        a1 = Allocation.from_powers([[0.0, 1.0]])
        p0 = np.unique(np.round(synthesize_received(a0, self._g(), [False], 0.0, rng), 12))
        p1 = np.unique(np.round(synthesize_received(a1, self._g(), [False], 0.0, rng), 12))
        assert not set(p0) & set(p1)

    def test_primary_user_is_real(self, rng):
        y = synthesize_received(Allocation.idle(1, 1), self._g(1), [True], 0.0, rng,
                                pu_power=2.0)
        np.testing.assert_allclose(np.abs(y), np.sqrt(2.0))
        assert np.all(y.imag == 0)

    def test_rejects_infeasible(self, rng):
        with pytest.raises(InfeasibleAllocation):
            synthesize_received(Allocation.from_powers([[-1.0]]), self._g(1), [False], 1.0, rng)
