import warnings

import numpy as np
import pytest

from deepsolve import WarmStart, check_feasibility, solve_opf, solve_pf
from deepsolve.opfref import _OpfProblem, recover, solution_equalities_residual

from conftest import reference_indep


def test_case30_objective_near_published_mean(opf30):
    assert opf30.objective == pytest.approx(789.8, rel=0.05)


def test_case118_objective_near_published_mean(opf118):
    assert opf118.objective == pytest.approx(81382.9, rel=0.05)


@pytest.mark.parametrize("which", ["case30", "case118"])
def test_converged_solution_is_feasible_and_balanced(which, request):
    case = request.getfixturevalue(which)
    adm = request.getfixturevalue("adm" + which.removeprefix("case"))
    sol = request.getfixturevalue("opf" + which.removeprefix("case"))
    assert solution_equalities_residual(case, adm, sol) < 1e-6
    indep = reference_indep(case, sol)
    pf = solve_pf(case, adm, indep, case.default_p_load, case.default_q_load, tol=1e-10)
    assert pf.converged
    assert check_feasibility(case, pf, 1e-6).feasible


def test_warm_start_at_optimum_beats_cold(case30, adm30, opf30):
    ws = WarmStart(
        v_mag=opf30.v_mag, v_ang=opf30.v_ang, p_gen=opf30.p_gen, q_gen=opf30.q_gen
    )
    warm = recover(case30, None, ws, adm=adm30)
    assert warm.converged
    assert warm.iterations < opf30.iterations
    assert warm.objective == pytest.approx(opf30.objective, rel=1e-5)


def test_degenerate_warm_start_is_safeguarded(case30, adm30):
    ng = len(case30.generators)
    n = case30.n_bus
    ws = WarmStart(
        v_mag=np.zeros(n), v_ang=np.zeros(n), p_gen=np.zeros(ng), q_gen=np.zeros(ng)
    )
    sol = recover(case30, None, ws, adm=adm30)
    assert sol.converged  # voltages clipped into [v_min, v_max] before use


def test_deterministic_iterate_sequence(case30, adm30):
    a = solve_opf(case30, adm=adm30)
    b = solve_opf(case30, adm=adm30)
    assert a.history == b.history
    assert np.array_equal(a.p_gen, b.p_gen)


def test_bad_loads_shape_rejected(case30):
    from deepsolve import OpfError

    with pytest.raises(OpfError, match="shape"):
        solve_opf(case30, loads=np.ones(7))


def test_load_scaling_monotonicity_logged(case30, adm30, opf30):
    """Scaling all loads down by 5% should not increase the objective.

    Local-solver caveat: violations indicate convergence to a worse local
    point and are reported as warnings, not failures.
    """
    rng = np.random.default_rng(7)
    base = np.concatenate([case30.default_p_load, case30.default_q_load])
    bumps = 0
    for _ in range(20):
        f = rng.uniform(0.95, 1.05, size=base.size)
        hi = solve_opf(case30, loads=base * f, adm=adm30)
        lo = solve_opf(case30, loads=base * f * 0.95, adm=adm30)
        if not (hi.converged and lo.converged):
            bumps += 1
            continue
        if lo.objective > hi.objective + 1e-6:
            warnings.warn(
                f"objective rose when shedding load: {hi.objective:.2f} -> {lo.objective:.2f}"
            )
            bumps += 1
    assert bumps <= 20  # never fatal


# -- derivative oracles ------------------------------------------------------


def _problem_point(case30, adm30):
    prob = _OpfProblem(case30, adm30, case30.default_p_load, case30.default_q_load)
    rng = np.random.default_rng(3)
    n, ng = prob.n, prob.ng
    x = np.concatenate(
        [
            rng.uniform(-0.2, 0.2, n),
            rng.uniform(0.96, 1.05, n),
            prob.pmin + rng.uniform(0.2, 0.8, ng) * (prob.pmax - prob.pmin),
            prob.qmin + rng.uniform(0.2, 0.8, ng) * (prob.qmax - prob.qmin),
        ]
    )
    x[prob.slack] = 0.0
    return prob, x


def _fd_jacobian(fun, x, h=1e-7):
    f0 = fun(x)
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        jac[:, j] = (fun(xp) - fun(xm)) / (2 * h)
    return jac


def test_equality_jacobian_matches_finite_differences(case30, adm30):
    prob, x = _problem_point(case30, adm30)

    def g_of(xv):
        va, vm = xv[: prob.n], xv[prob.n : 2 * prob.n]
        return prob.equalities(xv, vm * np.exp(1j * va))

    va, vm = x[: prob.n], x[prob.n : 2 * prob.n]
    jg = prob.eq_jacobian(vm * np.exp(1j * va))
    fd = _fd_jacobian(g_of, x)
    assert np.max(np.abs(jg - fd)) < 1e-6


def test_inequality_jacobian_matches_finite_differences(case30, adm30):
    prob, x = _problem_point(case30, adm30)

    def h_of(xv):
        va, vm = xv[: prob.n], xv[prob.n : 2 * prob.n]
        return prob.inequalities(xv, vm * np.exp(1j * va))

    va, vm = x[: prob.n], x[prob.n : 2 * prob.n]
    h_of(x)  # populate cached branch flows
    jh = prob.ineq_jacobian(vm * np.exp(1j * va))
    fd = _fd_jacobian(h_of, x)
    assert np.max(np.abs(jh - fd)) < 1e-6


def test_lagrangian_hessian_matches_finite_differences(case30, adm30):
    prob, x = _problem_point(case30, adm30)
    rng = np.random.default_rng(5)
    lam = rng.normal(size=prob.neq)
    mu = rng.uniform(0.1, 1.0, size=prob.niq)

    def lagrangian_grad(xv):
        va, vm = xv[: prob.n], xv[prob.n : 2 * prob.n]
        v = vm * np.exp(1j * va)
        prob.inequalities(xv, v)
        return (
            prob.d_objective(xv)
            + prob.eq_jacobian(v).T @ lam
            + prob.ineq_jacobian(v).T @ mu
        )

    va, vm = x[: prob.n], x[prob.n : 2 * prob.n]
    v = vm * np.exp(1j * va)
    prob.inequalities(x, v)
    lxx = prob.lagrangian_hessian(x, v, vm, lam, mu)
    fd = _fd_jacobian(lagrangian_grad, x, h=1e-6)
    scale = 1.0 + np.max(np.abs(fd))
    assert np.max(np.abs(lxx - fd)) / scale < 1e-5
