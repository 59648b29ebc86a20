import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitedge.allocator import (
    AllocationProblem,
    DinkelbachState,
    active_bandwidth,
    alternate_optimize,
    brute_force_allocate,
    evaluate_objective,
    gamma_power,
    kkt_residuals,
    lambda_ratio,
    newton_residual,
    solve_subproblem_a,
    solve_subproblem_b,
    trajectory_csv,
)
from splitedge.errors import DomainError, InfeasibleError
from splitedge.wireless import SystemParams, make_devices, per_round_costs, totals

from helpers import random_problem, reference_objective, scalar_rate

seeds = st.integers(0, 2**32 - 1)


def identical_problem(m, alpha=0.5, bandwidth=1e6):
    devices = make_devices([1e-11] * m)
    return AllocationProblem(devices, SystemParams(device_count=m, alpha=alpha,
                                                   total_bandwidth=bandwidth))


def tx_energy(prob, rho, b):
    return sum(rho[u] * prob.payload[u] / scalar_rate(b[u], rho[u], prob.gain[u],
                                                       prob.sys.noise_psd)
               for u in range(prob.m))


# --- objective -----------------------------------------------------------

def test_objective_alpha_one_is_energy():
    prob = random_problem(np.random.default_rng(0), 3, alpha=1.0)
    rho, b, phi = prob.pmax, np.full(3, prob.sys.total_bandwidth / 3), prob.fmax
    costs = [per_round_costs(d, prob.sys, rho[u], b[u], phi[u])
             for u, d in enumerate(prob.devices)]
    e, t = totals(costs, prob.sys.global_rounds)
    assert evaluate_objective(prob, rho, b, phi, 123.0) == pytest.approx(e, rel=1e-12)


def test_objective_alpha_zero_is_latency():
    prob = random_problem(np.random.default_rng(1), 2, alpha=0.0)
    rho, b, phi = prob.pmin, np.full(2, prob.sys.total_bandwidth / 2), prob.fmin
    assert evaluate_objective(prob, rho, b, phi, 7.5) == pytest.approx(
        prob.sys.global_rounds * 7.5, rel=1e-15)


def test_objective_matches_reference_at_half_weight():
    prob = random_problem(np.random.default_rng(2), 2, alpha=0.5)
    rho = np.array([0.004, 0.011])
    b = np.array([3e5, 5e5])
    phi = np.array([1e9, 1.5e9])
    assert evaluate_objective(prob, rho, b, phi, 2.0) == pytest.approx(
        reference_objective(prob, rho, b, phi, 2.0), rel=1e-12)


# --- Subproblem A --------------------------------------------------------

def test_subproblem_a_latency_only():
    prob = random_problem(np.random.default_rng(3), 4, alpha=0.0)
    rates = np.array([1e5, 2e5, 3e5, 4e5])
    res = solve_subproblem_a(prob, rates)
    np.testing.assert_array_equal(res.freqs, prob.fmax)
    assert res.latency_cap == pytest.approx(np.max(prob.cycles / prob.fmax + prob.payload / rates))


def test_subproblem_a_single_device_grid():
    prob = random_problem(np.random.default_rng(4), 1, alpha=0.5)
    rate = np.array([2e5])
    res = solve_subproblem_a(prob, rate)
    s = prob.sys
    a, g, xi = s.alpha, s.global_rounds, s.capacitance

    def cost(phi):
        cap = prob.cycles[0] / phi + prob.payload[0] / rate[0]
        return a * g * xi * prob.cycles[0] * phi ** 2 + (1 - a) * g * cap

    grid = np.linspace(prob.fmin[0], prob.fmax[0], 2000)
    best = np.min(cost(grid))
    got = cost(res.freqs[0])
    assert got <= best * 1.005
    assert got >= best * (1 - 1e-3)  # the grid is fine enough to be close from above


@given(seed=seeds, m=st.integers(1, 6))
def test_subproblem_a_multipliers_match_clip_form(seed, m):
    prob = random_problem(np.random.default_rng(seed), m)
    rates = np.random.default_rng(seed + 1).uniform(1e4, 1e6, m)
    res = solve_subproblem_a(prob, rates)
    s = prob.sys
    pos = res.multipliers > 0
    clip = np.clip(np.cbrt(res.multipliers / (2 * s.alpha * s.global_rounds * s.capacitance)),
                   prob.fmin, prob.fmax)
    interior = pos & (res.freqs > prob.fmin) & (res.freqs < prob.fmax)
    np.testing.assert_allclose(clip[interior], res.freqs[interior], rtol=1e-9)
    assert np.all(res.multipliers >= 0)
    # every device meets the cap
    assert np.all(prob.cycles / res.freqs + prob.payload / rates <= res.latency_cap * (1 + 1e-9))


def test_clip_form_identity():
    s = SystemParams()
    ell = 2 * s.alpha * s.global_rounds * s.capacitance * (1e9) ** 3
    assert np.cbrt(ell / (2 * s.alpha * s.global_rounds * s.capacitance)) == pytest.approx(1e9)


def test_subproblem_a_rejects_zero_rate():
    prob = random_problem(np.random.default_rng(5), 2)
    with pytest.raises(InfeasibleError) as exc:
        solve_subproblem_a(prob, np.array([1e5, 0.0]))
    assert list(exc.value.devices) == [1]


# --- Subproblem B closed forms -------------------------------------------

def test_lambda_identity_point():
    gain, n0, payload = 1e-10, 4e-21, 2.81e4
    ups, theta = 2.0, 0.0
    # choose zeta so that Lambda = 1
    zeta = n0 * payload * ups * math.log(2) / (gain * ups)
    lam = lambda_ratio(ups, zeta, theta, gain, n0, payload)
    assert lam == pytest.approx(1.0, rel=1e-14)
    assert active_bandwidth(5e5, lam) == pytest.approx(5e5, rel=1e-14)
    assert gamma_power(3e5, lam, gain, n0) == pytest.approx(0.0, abs=1e-20)
    # the clipped power is then the lower bound
    assert max(1e-3, gamma_power(3e5, lam, gain, n0)) == 1e-3


def _binding_cap(prob, factor=1.3):
    b = np.full(prob.m, prob.sys.total_bandwidth / prob.m)
    rate = prob.rate(prob.pmax, b)
    return factor * float(np.max(prob.cycles / prob.fmax + prob.payload / rate))


def test_subproblem_b_symmetry():
    prob = identical_problem(2)
    rho, b, _ = solve_subproblem_b(prob, prob.fmax, _binding_cap(prob))
    assert b[0] == pytest.approx(b[1], rel=1e-9)
    assert rho[0] == pytest.approx(rho[1], rel=1e-9)


def test_subproblem_b_two_device_grid():
    rng = np.random.default_rng(11)
    prob = random_problem(rng, 2, alpha=0.5, bandwidth=1e6)
    cap = _binding_cap(prob)
    rho, b, st_ = solve_subproblem_b(prob, prob.fmax, cap)
    floors = prob.payload / (cap - prob.cycles / prob.fmax)
    assert np.sum(b) <= prob.sys.total_bandwidth * (1 + 1e-9)
    assert np.all(prob.rate(rho, b) >= floors * (1 - 1e-9))
    got = tx_energy(prob, rho, b)

    n = 100
    bbar = prob.sys.total_bandwidth
    r1 = np.linspace(prob.pmin[0], prob.pmax[0], n)[:, None, None]
    r2 = np.linspace(prob.pmin[1], prob.pmax[1], n)[None, :, None]
    b1 = np.linspace(0, bbar, n + 2)[1:-1][None, None, :]
    b2 = bbar - b1
    n0 = prob.sys.noise_psd
    rate1 = b1 * np.log2(1 + r1 * prob.gain[0] / (n0 * b1))
    rate2 = b2 * np.log2(1 + r2 * prob.gain[1] / (n0 * b2))
    e = r1 * prob.payload[0] / rate1 + r2 * prob.payload[1] / rate2
    e = np.where((rate1 >= floors[0]) & (rate2 >= floors[1]), e, np.inf)
    best = float(np.min(e))
    assert np.isfinite(best)
    assert (got - best) / best <= 0.02


def test_subproblem_b_certificate():
    prob = random_problem(np.random.default_rng(12), 5, bandwidth=2e6)
    rho, b, state = solve_subproblem_b(prob, prob.fmax, _binding_cap(prob))
    res, _ = newton_residual(state, rho, b, prob)
    assert np.linalg.norm(res) < 1e-4
    assert state.residual_norm < 1e-4


def test_subproblem_b_methods_agree():
    prob = random_problem(np.random.default_rng(13), 3, bandwidth=1e6, payload=3e5)
    cap = _binding_cap(prob, 1.1)
    rho_w, b_w, _ = solve_subproblem_b(prob, prob.fmax, cap)
    rho_d, b_d, _ = solve_subproblem_b(prob, prob.fmax, cap, method="dinkelbach")
    e_w, e_d = tx_energy(prob, rho_w, b_w), tx_energy(prob, rho_d, b_d)
    assert e_w <= e_d * (1 + 1e-6)


def test_subproblem_b_infeasible():
    prob = random_problem(np.random.default_rng(14), 2, bandwidth=1e3, payload=1e7)
    cap = float(np.max(prob.cycles / prob.fmax)) + 1e-3
    with pytest.raises(InfeasibleError):
        solve_subproblem_b(prob, prob.fmax, cap)


def test_subproblem_b_unknown_method():
    prob = identical_problem(1)
    with pytest.raises(DomainError):
        solve_subproblem_b(prob, prob.fmax, 10.0, method="newton")


# --- Newton residual -----------------------------------------------------

def _state(m, ups, zeta):
    return DinkelbachState(upsilon=ups, zeta=zeta, theta=np.zeros(m), mu=0.0,
                           omega=np.zeros(m))


def test_newton_residual_fixed_point():
    prob = random_problem(np.random.default_rng(15), 3)
    rho = np.array([0.002, 0.005, 0.01])
    b = np.array([1e5, 2e5, 3e5])
    rate = prob.rate(rho, b)
    s = prob.sys
    st_ = _state(3, s.alpha * s.global_rounds / rate, rho * prob.payload / rate)
    res, jac = newton_residual(st_, rho, b, prob)
    scale = np.concatenate([rho * prob.payload, np.full(3, s.alpha * s.global_rounds)])
    assert np.all(np.abs(res) <= 4 * np.finfo(float).eps * scale)
    np.testing.assert_array_equal(jac, np.concatenate([rate, rate]))


def test_newton_residual_zero_upsilon():
    prob = random_problem(np.random.default_rng(16), 2)
    rho, b = prob.pmax, np.full(2, 5e5)
    res, _ = newton_residual(_state(2, np.zeros(2), np.ones(2)), rho, b, prob)
    s = prob.sys
    np.testing.assert_array_equal(res[2:], -s.alpha * s.global_rounds)


def test_newton_residual_matches_reference():
    rng = np.random.default_rng(17)
    prob = random_problem(rng, 3)
    rho = rng.uniform(1e-3, 0.0158, 3)
    b = rng.uniform(1e5, 5e5, 3)
    ups, zeta = rng.uniform(0.1, 10, 3), rng.uniform(1e-6, 1e-3, 3)
    res, _ = newton_residual(_state(3, ups, zeta), rho, b, prob)
    s = prob.sys
    ref = []
    for u in range(3):
        r = scalar_rate(b[u], rho[u], prob.gain[u], s.noise_psd)
        ref.append(-rho[u] * prob.payload[u] + zeta[u] * r)
    for u in range(3):
        r = scalar_rate(b[u], rho[u], prob.gain[u], s.noise_psd)
        ref.append(-s.alpha * s.global_rounds + ups[u] * r)
    np.testing.assert_allclose(res, ref, rtol=1e-12)


# --- alternating optimisation --------------------------------------------

def test_identical_devices_share_bandwidth_equally():
    prob = identical_problem(4)
    sol = alternate_optimize(prob)
    np.testing.assert_allclose(sol.bandwidths, prob.sys.total_bandwidth / 4, rtol=1e-6)


def test_energy_only_goes_to_lower_bounds():
    prob = random_problem(np.random.default_rng(20), 3, alpha=1.0)
    sol = alternate_optimize(prob)
    np.testing.assert_allclose(sol.powers, prob.pmin, rtol=1e-9)
    np.testing.assert_allclose(sol.freqs, prob.fmin, rtol=1e-9)


def test_energy_only_agrees_with_grid_oracle():
    prob = random_problem(np.random.default_rng(21), 2, alpha=1.0)
    grid = brute_force_allocate(prob, 41)
    np.testing.assert_allclose(grid.powers, prob.pmin)
    np.testing.assert_allclose(grid.freqs, prob.fmin)
    assert alternate_optimize(prob).objective <= grid.objective * (1 + 1e-9)


def test_latency_only_goes_to_upper_bounds():
    prob = random_problem(np.random.default_rng(22), 3, alpha=0.0)
    sol = alternate_optimize(prob)
    np.testing.assert_allclose(sol.powers, prob.pmax, rtol=1e-9)
    np.testing.assert_allclose(sol.freqs, prob.fmax, rtol=1e-9)


def test_latency_only_agrees_with_grid_oracle():
    prob = random_problem(np.random.default_rng(23), 2, alpha=0.0)
    grid = brute_force_allocate(prob, 41)
    np.testing.assert_allclose(grid.freqs, prob.fmax)
    sol = alternate_optimize(prob)
    assert sol.objective <= grid.objective * (1 + 1e-9)


def test_two_device_oracle():
    prob = random_problem(np.random.default_rng(24), 2)
    sol = alternate_optimize(prob)
    grid = brute_force_allocate(prob, 61)
    assert abs(sol.objective - grid.objective) / grid.objective <= 0.02


@given(seed=seeds, m=st.integers(1, 6))
def test_descent_and_feasibility(seed, m):
    prob = random_problem(np.random.default_rng(seed), m)
    sol = alternate_optimize(prob)
    obj = [r["objective"] for r in sol.trajectory]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(obj, obj[1:]))
    assert np.sum(sol.bandwidths) <= prob.sys.total_bandwidth * (1 + 1e-9)
    assert np.all(sol.powers >= prob.pmin * (1 - 1e-12))
    assert np.all(sol.powers <= prob.pmax * (1 + 1e-12))
    assert np.all(sol.freqs >= prob.fmin * (1 - 1e-12))
    assert np.all(sol.freqs <= prob.fmax * (1 + 1e-12))
    t = prob.cycles / sol.freqs + prob.payload / prob.rate(sol.powers, sol.bandwidths)
    assert np.all(t <= sol.latency_cap * (1 + 1e-9))
    assert sol.objective == pytest.approx(
        reference_objective(prob, sol.powers, sol.bandwidths, sol.freqs, sol.latency_cap),
        rel=1e-9)


@given(seed=seeds, m=st.integers(1, 4),
       which=st.sampled_from(["power_max", "freq_max", "bandwidth"]),
       factor=st.floats(1.05, 3.0))
def test_feasible_set_monotonicity(seed, m, which, factor):
    rng = np.random.default_rng(seed)
    base = random_problem(rng, m)
    if which == "bandwidth":
        sys = SystemParams(device_count=m, alpha=base.sys.alpha,
                           total_bandwidth=base.sys.total_bandwidth * factor)
        bigger = AllocationProblem(base.devices, sys)
    else:
        import dataclasses
        devs = [dataclasses.replace(d, **{which: getattr(d, which) * factor})
                for d in base.devices]
        bigger = AllocationProblem(devs, base.sys)
    small = alternate_optimize(base).objective
    large = alternate_optimize(bigger).objective
    assert large <= small * (1 + 1e-4)


@given(seed=seeds, m=st.integers(1, 4), c=st.floats(1.1, 5.0))
def test_payload_scaling(seed, m, c):
    import dataclasses
    base = random_problem(np.random.default_rng(seed), m)
    scaled = AllocationProblem([dataclasses.replace(d, payload_bits=d.payload_bits * c)
                                for d in base.devices], base.sys)
    assert alternate_optimize(scaled).objective >= alternate_optimize(base).objective * (1 - 1e-4)


def test_kkt_residuals_small():
    prob = random_problem(np.random.default_rng(25), 6, payload=2e5)
    sol = alternate_optimize(prob)
    k = kkt_residuals(prob, sol)
    assert k["rate_slackness"] < 1e-6
    assert k["bandwidth_slackness"] < 1e-6
    assert k["newton_residual"] < 1e-4


def test_non_convergence_reported():
    prob = random_problem(np.random.default_rng(26), 4, payload=3e5)
    sol = alternate_optimize(prob, outer_tol=0.0, max_outer=2)
    assert not sol.converged
    assert sol.iterations == 2


def test_trajectory_csv_schema():
    sol = alternate_optimize(identical_problem(2))
    text = trajectory_csv(sol)
    lines = text.split("\n")
    assert lines[0] == "iter,objective,E,T,max_constraint_violation"
    assert text.endswith("\n") and "\r" not in text
    assert len(lines) == len(sol.trajectory) + 2


# --- grid oracle ---------------------------------------------------------

def test_brute_force_two_points_enumerates_all():
    prob = random_problem(np.random.default_rng(27), 1)
    sol = brute_force_allocate(prob, 2)
    best = math.inf
    b = prob.sys.total_bandwidth  # the only non-zero bandwidth point
    for rho in (prob.pmin[0], prob.pmax[0]):
        for phi in (prob.fmin[0], prob.fmax[0]):
            t = prob.cycles[0] / phi + prob.payload[0] / scalar_rate(
                b, rho, prob.gain[0], prob.sys.noise_psd)
            best = min(best, reference_objective(prob, [rho], [b], [phi], t))
    assert sol.objective == pytest.approx(best, rel=1e-12)


@given(seed=seeds, m=st.integers(1, 2), n=st.integers(3, 9))
def test_brute_force_refinement_improves(seed, m, n):
    prob = random_problem(np.random.default_rng(seed), m)
    coarse = brute_force_allocate(prob, n).objective
    fine = brute_force_allocate(prob, 2 * n - 1).objective
    assert fine <= coarse * (1 + 1e-12)


def test_brute_force_refuses_large():
    with pytest.raises(DomainError):
        brute_force_allocate(random_problem(np.random.default_rng(28), 4), 3)
