import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tree_power import oracle, sim
from tree_power.sim import DL, UL

from conftest import make_moments

SYM = dict(a=[1.0, 1.0], B=[[1.0, 0.5], [0.5, 1.0]], c=[1.0, 1.0])


def random_moments(side, K, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0.2, 2.0, K) * 1e-9
    B = r.uniform(0.0, 0.3, (K, K)) * 1e-9 + np.diag(a * r.uniform(1.0, 1.5, K))
    c = r.uniform(0.5, 2.0, K) * 1e-11
    return make_moments(side, a, B, c)


class TestFeasibility:
    def test_symmetric_hand_fixed_point(self):
        m = make_moments(UL, **SYM)
        ok, p = oracle.feasible_at_target(0.5, m, caps=[1.0, 1.0])
        assert ok
        np.testing.assert_allclose(p, [2 / 3, 2 / 3], rtol=1e-7)
        assert np.all(sim.sinr(UL, m, p) >= 0.5 * (1 - 1e-6))

    def test_tiny_target(self):
        m = make_moments(UL, **SYM)
        ok, p = oracle.feasible_at_target(1e-9, m, caps=[1.0, 1.0])
        assert ok and np.all(p < 1e-8)

    def test_interference_ceiling(self):
        m = make_moments(DL, a=[1.0, 1.0], B=[[1.0, 1.0], [1.0, 1.0]], c=[1.0, 1.0])
        ok, _ = oracle.feasible_at_target(10.0, m, budget=1e6)
        assert not ok

    def test_zero_gain_user(self):
        m = make_moments(UL, a=[0.0, 1.0], B=[[1.0, 0.0], [0.0, 1.0]], c=[1.0, 1.0])
        assert oracle.feasible_at_target(0.1, m, caps=[1.0, 1.0]) == (False, pytest.approx([0, 0]))

    def test_bad_arguments(self):
        m = make_moments(UL, **SYM)
        with pytest.raises(ValueError):
            oracle.feasible_at_target(0.0, m, caps=[1, 1])
        with pytest.raises(ValueError):
            oracle.feasible_at_target(1.0, m)
        with pytest.raises(ValueError):
            oracle.feasible_at_target(1.0, m, caps=[1, 1], budget=2.0)

    def test_disparate_power_scales(self):
        # one user needs four orders of magnitude less power than the other
        m = make_moments(DL, a=[1e-9, 1e-5], B=[[1.2e-9, 1e-13], [1e-10, 1.2e-5]], c=[4e-13, 4e-13])
        ok, p = oracle.feasible_at_target(1.0, m, budget=1.8)
        assert ok
        np.testing.assert_allclose(sim.sinr(DL, m, p), [1.0, 1.0], rtol=1e-6)

    @given(st.integers(0, 10_000), st.floats(0.01, 0.99))
    def test_monotone(self, seed, frac):
        m = random_moments(UL, 3, seed)
        caps = np.full(3, 0.1)
        hi = 5.0
        ok_hi, _ = oracle.feasible_at_target(hi, m, caps=caps)
        if ok_hi:
            assert oracle.feasible_at_target(frac * hi, m, caps=caps)[0]


class TestMaxMinUl:
    def test_symmetric_pair_at_caps(self):
        m = make_moments(UL, **SYM)
        sol = oracle.maxmin_ul(m, sim.NetworkConfig(P_ul_max=1.0))
        np.testing.assert_allclose(sol.p, [1.0, 1.0])
        s = sim.sinr(UL, m, sol.p)
        assert s[0] == pytest.approx(s[1])

    def test_single_user(self):
        cfg = sim.NetworkConfig()
        m = make_moments(UL, [2e-9], [[2.5e-9]], [1e-11])
        sol = oracle.maxmin_ul(m, cfg)
        np.testing.assert_allclose(sol.p, [cfg.P_ul_max])
        expected = 0.1 * 2e-9 / (0.5e-9 * 0.1 + 1e-11)
        np.testing.assert_allclose(sol.gamma_star, expected, rtol=1e-12)
        assert sol.converged

    def test_side_check(self):
        with pytest.raises(ValueError):
            oracle.maxmin_ul(make_moments(DL, **SYM), sim.NetworkConfig())

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_grid(self, seed):
        cfg = sim.NetworkConfig()
        m = random_moments(UL, 2, seed)
        sol = oracle.maxmin_ul(m, cfg)
        _, grid_se = oracle.grid_search_ul(m, cfg)
        assert sol.min_se >= grid_se * (1 - 1e-9)
        assert abs(sol.min_se - grid_se) / grid_se < 0.01

    @pytest.mark.parametrize("seed", range(10))
    def test_box_and_equal_sinr(self, seed):
        cfg = sim.NetworkConfig()
        m = random_moments(UL, 4, seed)
        sol = oracle.maxmin_ul(m, cfg)
        assert np.all(sol.p >= 0) and np.all(sol.p <= cfg.P_ul_max)
        s = sim.sinr(UL, m, sol.p)
        free = sol.p < cfg.P_ul_max * (1 - 1e-9)
        np.testing.assert_allclose(s[free], sol.gamma_star, rtol=1e-3)
        assert np.any(~free) or np.allclose(s, sol.gamma_star, rtol=1e-3)


class TestMaxMinDl:
    def test_symmetric_equal_split(self):
        cfg = sim.NetworkConfig(L=4)
        K = 4
        m = make_moments(DL, np.ones(K), np.full((K, K), 0.1) + 0.9 * np.eye(K), np.ones(K))
        sol = oracle.maxmin_dl(m, cfg)
        np.testing.assert_allclose(sol.p, cfg.total_dl_budget / K, rtol=1e-9)

    def test_single_user(self):
        cfg = sim.NetworkConfig(L=9)
        sol = oracle.maxmin_dl(make_moments(DL, [1e-9], [[1.2e-9]], [4e-13]), cfg)
        np.testing.assert_allclose(sol.p, [cfg.total_dl_budget])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_grid(self, seed):
        cfg = sim.NetworkConfig()
        m = random_moments(DL, 2, seed)
        sol = oracle.maxmin_dl(m, cfg)
        _, grid_se = oracle.grid_search_dl(m, cfg)
        assert abs(sol.min_se - grid_se) / grid_se < 0.01

    @pytest.mark.parametrize("seed", range(10))
    def test_budget_saturated_equal_sinr(self, seed):
        cfg = sim.NetworkConfig()
        m = random_moments(DL, 5, seed)
        sol = oracle.maxmin_dl(m, cfg)
        np.testing.assert_allclose(sol.p.sum(), cfg.total_dl_budget, rtol=1e-4)
        np.testing.assert_allclose(sim.sinr(DL, m, sol.p), sol.gamma_star, rtol=1e-3)

    def test_equal_sinr_near_self_interference_ceiling(self):
        # user 1 cannot exceed SINR 1 / 0.3 however much power it gets
        cfg = sim.NetworkConfig(L=9)
        m = make_moments(DL, a=[1.0, 1.0], B=[[1.05, 0.01], [0.01, 1.3]], c=[1e-3, 1e-3])
        sol = oracle.maxmin_dl(m, cfg)
        np.testing.assert_allclose(sim.sinr(DL, m, sol.p), sol.gamma_star, rtol=1e-9)
        np.testing.assert_allclose(sol.p.sum(), cfg.total_dl_budget, rtol=1e-12)
        assert sol.gamma_star < 1 / 0.3

    @given(st.integers(0, 10_000))
    def test_budget_scaling(self, seed):
        m = random_moments(DL, 3, seed)
        small = oracle.maxmin_dl(m, sim.NetworkConfig(L=4))
        big = oracle.maxmin_dl(m, sim.NetworkConfig(L=8))
        assert big.gamma_star >= small.gamma_star * (1 - 1e-4)


class TestSolveScenario:
    def test_constraints_and_determinism(self, small_cfg, small_stats):
        a = oracle.solve_scenario(small_stats, small_cfg, np.random.default_rng(0))
        b = oracle.solve_scenario(small_stats, small_cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(a.ul.p, b.ul.p)
        np.testing.assert_array_equal(a.dl.p, b.dl.p)
        assert np.all(a.ul.p <= small_cfg.P_ul_max)
        np.testing.assert_allclose(a.dl.p.sum(), small_cfg.total_dl_budget, rtol=1e-4)

    def test_alternation_bounds(self, small_cfg, small_stats):
        for n in (0, 6):
            with pytest.raises(ValueError):
                oracle.solve_scenario(small_stats, small_cfg, np.random.default_rng(0), alternations=n)

    def test_log_grid(self):
        cfg = sim.NetworkConfig()
        m = random_moments(UL, 2, 3)
        sol = oracle.maxmin_ul(m, cfg)
        p, se = oracle.grid_search_ul(m, cfg, spacing="log")
        assert sol.min_se >= se * (1 - 1e-9) and abs(sol.min_se - se) / se < 0.01
        assert np.all((p >= 0) & (p <= cfg.P_ul_max))
        with pytest.raises(ValueError, match="spacing"):
            oracle.grid_search_ul(m, cfg, spacing="cubic")

    def test_grid_rejects_other_sizes(self):
        with pytest.raises(ValueError):
            oracle.grid_search_ul(random_moments(UL, 3, 0), sim.NetworkConfig())
