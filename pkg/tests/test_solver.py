from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_panel
from oracles import project_by_grid
from stagsynth import DonorRule, Panel, SolverConfig, WeightMatrix, lambda_schedule, objective, project_simplex, solve_weights
from stagsynth.errors import DidNotConverge, EmptyDonorPool, NonFiniteInput
from stagsynth.solver import pilot_eta, select_lambda, solve_auto

rngs = st.integers(0, 2**32 - 1).map(np.random.default_rng)


def test_projection_two_point():
    got = project_simplex([0.6, 0.9])
    np.testing.assert_allclose(got, project_by_grid(np.array([0.6, 0.9])), atol=1e-6)
    np.testing.assert_allclose(got, [0.35, 0.65], atol=1e-12)


def test_projection_boundary():
    np.testing.assert_array_equal(project_simplex([2.0, -1.0]), [1.0, 0.0])


def test_projection_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        project_simplex([np.nan, 1.0])


@settings(max_examples=50, deadline=None)
@given(rngs, st.integers(1, 8))
def test_projection_idempotent_and_optimal(rng, m):
    x = rng.dirichlet(np.ones(m))
    np.testing.assert_allclose(project_simplex(x), x, atol=1e-15)
    v = rng.normal(scale=3, size=m)
    p = project_simplex(v)
    assert p.min() >= 0 and abs(p.sum() - 1) < 1e-12
    # no random simplex point is closer
    others = rng.dirichlet(np.ones(m), size=200)
    assert np.sum((p - v) ** 2) <= np.min(np.sum((others - v) ** 2, axis=1)) + 1e-12


def test_exact_match_donor_gets_weight():
    rng = np.random.default_rng(11)
    pre = rng.normal(size=11)
    y = np.vstack([pre, pre, pre + rng.normal(size=11)])
    p = Panel(y, [11, None, None])
    sol = solve_weights(p, config=SolverConfig(lam=1e-8))
    # oracle: 1-D grid over w on donor 1
    ws = np.linspace(0, 1, 100_001)
    base = sol.gamma
    vals = np.array([objective(p, base.with_weights(np.array([[0, w, 1 - w]])), 0.5, 1e-8) for w in ws[::50]])
    best = ws[::50][int(np.argmin(vals))]
    assert best >= 1 - 1e-3
    assert sol.gamma.weights[0, 1] >= 1 - 1e-3


def test_identical_paths_give_uniform():
    p = Panel(np.tile(np.arange(8.0), (5, 1)), [6, None, None, None, None])
    sol = solve_weights(p, config=SolverConfig(lam=0.1))
    np.testing.assert_allclose(sol.gamma.weights[0, 1:], 0.25, atol=1e-12)


def test_empty_pool():
    p = Panel(np.zeros((2, 5)), [3, 3])
    with pytest.raises(EmptyDonorPool):
        solve_weights(p)


def test_nonconvergence_returns_best_iterate(rng):
    p = random_panel(rng, J=3, N0=6, T=30)
    sol = solve_weights(p, config=SolverConfig(max_iters=2, rel_tol=1e-15, lam=1e-8))
    assert not sol.converged and sol.iterations == 2
    assert sol.trace[-1] <= sol.trace[0]
    with pytest.raises(DidNotConverge):
        solve_weights(p, config=SolverConfig(max_iters=2, rel_tol=1e-15, lam=1e-8), raise_on_nonconvergence=True)


@settings(max_examples=25, deadline=None)
@given(rngs, st.sampled_from(["max_horizon", "per_event_time", "adoption_only"]))
def test_trace_monotone_and_feasible(rng, mode):
    p = random_panel(rng, J=3, N0=3, T=10)
    rule = DonorRule(mode, 0)
    sol = solve_weights(p, rule, SolverConfig(lam=float(rng.uniform(0, 0.1))), k=0)
    t = np.array(sol.trace)
    assert np.all(np.diff(t) <= 1e-12)
    W = sol.gamma.weights
    assert np.all(W >= 0)
    np.testing.assert_allclose(W.sum(axis=1), 1, atol=1e-10)
    assert sol.gamma.supports == WeightMatrix.uniform(p, rule, 0).supports


def test_fixed_step_rule_reaches_same_optimum(rng):
    p = random_panel(rng, J=2, N0=4, T=12)
    a = solve_weights(p, config=SolverConfig(lam=0.01))
    b = solve_weights(p, config=SolverConfig(lam=0.01, step_rule="fixed_lipschitz"))
    assert a.report.objective == pytest.approx(b.report.objective, rel=1e-6)


def test_determinism(rng):
    p = random_panel(rng, J=3, N0=5, T=15)
    a = solve_weights(p, config=SolverConfig(lam=1e-4))
    b = solve_weights(p, config=SolverConfig(lam=1e-4))
    assert np.array_equal(a.gamma.weights, b.gamma.weights)
    assert a.trace == b.trace


@settings(max_examples=10, deadline=None)
@given(rngs)
def test_dispersion_nonincreasing_in_lambda(rng):
    p = random_panel(rng, J=2, N0=5, T=12)
    cfg = SolverConfig(rel_tol=1e-14, max_iters=50_000)
    disp = []
    for lam in (1e-4, 1e-3, 1e-2, 1e-1, 1.0):
        W = solve_weights(p, config=replace(cfg, lam=lam)).gamma.weights
        disp.append(float(np.max(np.sum(W**2, axis=1))))
    assert all(b <= a + 1e-6 for a, b in zip(disp, disp[1:]))


def test_lambda_schedule():
    assert lambda_schedule(0.0) == 1e-12
    assert lambda_schedule(0.1, 1.0) == pytest.approx(0.01)
    assert lambda_schedule(0.1, 4.0) == pytest.approx(0.04)


def test_pilot_and_auto(rng):
    p = random_panel(rng, J=3, N0=5, T=15)
    eta = pilot_eta(p)
    sol, eta2 = solve_auto(p)
    assert eta == eta2 and eta > 0
    assert sol.report.lam == pytest.approx(max(eta**2, 1e-12))


def test_select_lambda_picks_grid_minimizer(rng):
    from stagsynth.diagnostics import placebo_cv_score

    p = random_panel(rng, J=3, N0=6, T=20, staggered=False)
    res = select_lambda(p)
    scores = [placebo_cv_score(p, DonorRule(), SolverConfig(lam=lam)) for lam in res["grid"]]
    assert res["scores"] == pytest.approx(scores)
    assert res["selected"] == res["grid"][int(np.argmin(scores))]


def test_solution_json():
    p = Panel(np.arange(30.0).reshape(3, 10) ** 1.1, [8, None, None])
    d = solve_weights(p).to_dict(p)
    assert set(d) >= {"weights", "objective_trace", "converged", "iterations"}
    assert sum(d["weights"]["0"].values()) == pytest.approx(1)
