import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrate import ratesolver as rs
from semrate.fbl import LinkParams
from semrate.oracles import link_terms, oracle_grid_tau, second_diff

CLOSED_FORM_TAU = 1 - math.log(9) / 10  # a=0.5, b=1, k=10, D=1, budget 0.05


def single(a=0.5, b=1.0, k=10.0, D=1.0):
    return [rs.LinkConstants(a, b, k, D)]


def random_instance(rng, max_m=5):
    """Physical instance plus the oracle's independently derived constants."""
    while True:
        M = int(rng.integers(1, max_m + 1))
        kappa = rng.uniform(0.1, 2.0, M)
        D = rng.integers(8, 257, M)
        snr = 10 ** rng.uniform(0, 2, M)
        L = int(rng.choice([64, 256, 1024]))
        links = rs.modality_links(kappa, D, snr, L, 8)
        a = sum(l.a for l in links)
        delta0 = float(rng.uniform(1e-3, 0.45) * a)
        if rs.feasibility_check(links, delta0).ok:
            return links, delta0, link_terms(kappa, D, snr, L, 8)


class TestConstants:
    def test_link_constants_match_independent_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            links, _, (a, b, k, D) = random_instance(rng)
            for l, ai, bi, ki, di in zip(links, a, b, k, D):
                assert (l.a, l.b, l.k, l.D) == pytest.approx((ai, bi, ki, di), rel=1e-13)

    def test_invalid_link(self):
        with pytest.raises(ValueError):
            rs.ModalityLink(0, 1.0, LinkParams.from_snr(1.0, 16), 8)
        with pytest.raises(ValueError):
            rs.ModalityLink(8, -1.0, LinkParams.from_snr(1.0, 16), 8)


class TestF:
    def test_midpoint(self):
        assert rs.f_tau(single(), 0.05, 1.0) == pytest.approx(0.25 - 0.05, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            rs.f_tau([], 0.1, 0.0)

    def test_domain(self):
        with pytest.raises(ValueError):
            rs.f_tau(single(), 0.0, 0.1)
        with pytest.raises(ValueError):
            rs.f_tau(single(), 0.1, -1.0)

    def test_large_exponent_no_overflow(self):
        assert rs.f_tau(single(k=1e6), 0.05, 0.0) == -0.05
        assert rs.f_tau(single(k=1e6), 0.05, 10.0) == pytest.approx(0.45)

    def test_zero_rate_residual_at_moderate_snr(self):
        links = rs.modality_links([1.0], [64], [3.0], 256, 8)
        assert abs(rs.f_tau(links, 1e-3, 0.0) + 1e-3) < 1e-6

    def test_monotone_on_grid(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            links, delta0, _ = random_instance(rng)
            taus = np.linspace(0, 1.2 * rs.tau_upper(links), 1000)
            f = [rs.f_tau(links, delta0, t) for t in taus]
            assert all(y >= x for x, y in zip(f, f[1:]))

    def test_matches_oracle_function(self):
        from semrate.oracles import oracle_f
        rng = np.random.default_rng(3)
        links, delta0, (a, b, k, D) = random_instance(rng)
        taus = np.linspace(0, rs.tau_upper(links), 50)
        ours = [rs.f_tau(links, delta0, t) for t in taus]
        assert np.allclose(ours, oracle_f(a, b, k, D, delta0, taus), atol=1e-12)


class TestFeasibility:
    def test_budget_too_large(self):
        r = rs.feasibility_check(single(), 0.26)
        assert not r.ok
        assert "0.26" in r.violations[0] and "0.25" in r.violations[0]

    def test_reference_budget_feasible(self):
        links = rs.modality_links([1.0, 0.9, 1.1], [16, 128, 64], [4.0, 4.0, 4.0], 256, 8)
        r = rs.feasibility_check(links, 1e-3)
        assert r.ok and r.bracket == (0.0, min(l.b / l.D for l in links))

    def test_boundary_budget(self):
        sol = rs.solve_bisection(single(), 0.25)
        assert sol.tau_star == 1.0 and sol.iterations == 0

    def test_budget_below_zero_rate_mass(self):
        r = rs.feasibility_check(single(k=0.5), 1e-4)
        assert not r.ok and "zero-rate" in r.violations[0]

    def test_infeasible_raises(self):
        with pytest.raises(rs.InfeasibleError) as e:
            rs.solve_bisection(single(), 0.3)
        assert not e.value.report.ok


class TestBisection:
    def test_closed_form(self):
        sol = rs.solve_bisection(single(), 0.05, tol=1e-6)
        assert abs(sol.tau_star - CLOSED_FORM_TAU) <= 1e-6
        assert sol.tau_star == pytest.approx(0.7802775, abs=1e-6)

    def test_closed_form_grid_oracle(self):
        a, b, k, D = (np.array([v]) for v in (0.5, 1.0, 10.0, 1.0))
        assert abs(oracle_grid_tau(a, b, k, D, 0.05, step=1e-8) - CLOSED_FORM_TAU) < 1e-8

    def test_bracket_upper_end_when_half_budget(self):
        links = rs.modality_links([1.0, 0.5], [16, 64], [3.0, 3.0], 256, 8)
        half = 0.5 * sum(l.a for l in links)
        sol = rs.solve_bisection(links, half)
        assert sol.tau_star == pytest.approx(rs.tau_upper(links), abs=1e-6)

    def test_random_instances_against_grid(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            links, delta0, (a, b, k, D) = random_instance(rng)
            sol = rs.solve_bisection(links, delta0, tol=1e-6)
            assert abs(sol.tau_star - oracle_grid_tau(a, b, k, D, delta0, step=1e-8)) <= 2e-6

    @pytest.mark.parametrize("tol", [1e-3, 1e-6, 1e-9])
    def test_iteration_count(self, tol):
        links = rs.modality_links([1.0, 0.5], [16, 64], [3.0, 8.0], 256, 8)
        sol = rs.solve_bisection(links, 1e-3, tol=tol)
        width = sol.bracket[1] - sol.bracket[0]
        assert width <= tol
        assert sol.iterations == rs.max_iterations(rs.tau_upper(links), tol)

    def test_max_iter_exhausted(self):
        with pytest.raises(rs.BisectionError) as e:
            rs.solve_bisection(single(), 0.05, tol=1e-12, max_iter=5)
        lo, hi = e.value.bracket
        assert lo < CLOSED_FORM_TAU < hi

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            rs.solve_bisection(single(), 0.05, tol=0)

    def test_solution_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            links, delta0, _ = random_instance(rng)
            sol = rs.solve_bisection(links, delta0)
            delays = [l.D / r for l, r in zip(links, sol.rates)]
            assert max(delays) - min(delays) <= 1e-9 * max(delays)
            assert all(r > 0 for r in sol.rates)
            if sol.constraint_active:
                kmax = max(l.k * l.D for l in links)
                assert abs(sol.gamma_pred - delta0) <= 10 * 1e-6 * kmax * sum(l.a for l in links)
            else:
                assert sol.gamma_pred <= delta0 and sol.tau_star == rs.tau_upper(links)
            assert sol.eps == pytest.approx(rs.predicted_eps(links, sol.rates), rel=1e-12)

    def test_kappa_zero_modality(self):
        links = rs.modality_links([1.0, 0.0], [16, 64], [3.0, 3.0], 256, 8)
        sol = rs.solve_bisection(links, 1e-3)
        # the idle modality adds nothing to f but still caps the bracket
        assert rs.f_tau(links, 1e-3, 0.01) == rs.f_tau(links[:1], 1e-3, 0.01)
        assert sol.tau_star == rs.tau_upper(links) and not sol.constraint_active
        assert sol.rates[1] == 64 * sol.tau_star

    def test_monotone_in_kappa_and_budget(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            links, delta0, _ = random_instance(rng)
            base = rs.solve_bisection(links, delta0, tol=1e-10).tau_star
            bumped = [rs.ModalityLink(l.D, l.kappa * (1.5 if i == 0 else 1.0), l.link, l.B) for i, l in enumerate(links)]
            if rs.feasibility_check(bumped, delta0).ok:
                assert rs.solve_bisection(bumped, delta0, tol=1e-10).tau_star <= base + 1e-10
            assert rs.solve_bisection(links, delta0 * 0.5, tol=1e-10).tau_star <= base + 1e-10

    def test_rates_non_decreasing_in_snr(self):
        prev = None
        for snr_db in range(0, 31, 3):
            snr = 10 ** (snr_db / 10)
            links = rs.modality_links([0.8, 0.5, 0.5], [16, 128, 64], [snr] * 3, 256, 8)
            rates = rs.solve_bisection(links, 1e-3).rates
            if prev is not None:
                assert all(r >= p for r, p in zip(rates, prev))
            prev = rates


class TestFixedRate:
    def test_example(self):
        assert rs.fixed_rate_baseline([10, 100], [1, 5]) == 5.0

    def test_equal_payloads(self):
        assert rs.fixed_rate_baseline([8, 8, 8], [3.0, 1.5, 2.0]) == 1.5

    def test_single(self):
        assert rs.fixed_rate_baseline([40], [0.7]) == 0.7

    def test_same_delay_as_adaptive(self):
        links = rs.modality_links([0.8, 0.5, 0.5], [16, 128, 64], [4.0] * 3, 256, 8)
        sol = rs.solve_bisection(links, 1e-3)
        R = rs.fixed_rate_baseline([l.D for l in links], sol.rates)
        assert max(l.D / R for l in links) == pytest.approx(sol.delay, rel=1e-12)

    @pytest.mark.parametrize("D,R", [([], []), ([1, 2], [1]), ([0], [1]), ([1], [0])])
    def test_invalid(self, D, R):
        with pytest.raises(ValueError):
            rs.fixed_rate_baseline(D, R)


class TestConvexity:
    def test_zero_curvature_at_midpoint(self):
        c = rs.LinkConstants(1.0, 1.0, 5.0, 1.0)
        assert rs.second_derivative(c, 1.0) == 0.0
        assert abs(second_diff(lambda r: rs.g_constraint([c], [r], 0.1), 1.0)) < 1e-6

    def test_positive_below(self):
        c = rs.LinkConstants(1.0, 1.0, 5.0, 1.0)
        s = 1.0 / (1.0 + math.exp(2.5))
        analytic = 25 * s * (1 - s) * (1 - 2 * s)
        assert rs.second_derivative(c, 0.5) == pytest.approx(analytic, rel=1e-12)
        assert second_diff(lambda r: rs.g_constraint([c], [r], 0.1), 0.5) == pytest.approx(analytic, rel=1e-5)
        assert analytic > 0

    def test_negative_above(self):
        c = rs.LinkConstants(1.0, 1.0, 5.0, 1.0)
        assert rs.second_derivative(c, 1.1) < 0
        assert second_diff(lambda r: rs.g_constraint([c], [r], 0.1), 1.1) < 0

    def test_audit_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            links, delta0, _ = random_instance(rng, max_m=3)
            rep = rs.convexity_audit(links, grid=1000, delta0=delta0)
            assert rep.convex, rep.to_dict()
            assert rep.points == 1000 * len(links)

    def test_audit_flags_outside_region(self):
        c = rs.LinkConstants(1.0, 1.0, 5.0, 1.0)
        rep = rs.convexity_audit([c], grid=np.linspace(0.0, 2.0, 201))
        assert rep.outside_points == 100 and rep.outside_negative == 100
        assert rep.convex

    @given(st.floats(0.1, 50), st.floats(0.05, 3), st.floats(0, 1))
    def test_analytic_sign_on_feasible_side(self, k, b, frac):
        c = rs.LinkConstants(1.0, b, k, 1.0)
        assert rs.second_derivative(c, frac * b) >= 0
