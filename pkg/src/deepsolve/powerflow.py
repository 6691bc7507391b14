"""Newton-Raphson AC power flow, branch flows and feasibility checking.

The solver takes the independent operating variables (slack voltage
magnitude, PV-bus active injections and voltage magnitudes) plus the bus
loads, and solves the nonlinear balance equations for the remaining
voltage angles and PQ-bus magnitudes.  Everything is dense: the shipped
networks top out at a few hundred buses, where a dense factorization beats
sparse bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import AdmittanceMatrix, NetworkCase

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


class PowerFlowError(Exception):
    pass


class SingularJacobianError(PowerFlowError):
    """Jacobian factorization failed; distinct from plain non-convergence."""


@dataclass(frozen=True)
class IndependentVars:
    """Operating variables the pipeline predicts (slack angle fixed at 0)."""

    v_slack: float
    pv_p_gen: np.ndarray  # p.u., one entry per PV bus, bus order
    pv_v_mag: np.ndarray
    theta_slack: float = 0.0

    def validate(self, case: NetworkCase):
        n_pv = len(case.pv_indices)
        if len(self.pv_p_gen) != n_pv or len(self.pv_v_mag) != n_pv:
            raise PowerFlowError(
                f"independent variables sized for {len(self.pv_p_gen)} PV buses, "
                f"case has {n_pv}"
            )


@dataclass(frozen=True)
class PfInit:
    """Initial guess: angles for all buses, magnitudes used at PQ buses."""

    v_ang: np.ndarray
    v_mag: np.ndarray


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    slack_p_gen: float
    slack_q_gen: float
    pv_q_gen: np.ndarray
    branch_s: np.ndarray
    iterations: int
    converged: bool
    max_residual: float
    residual_history: list[float] = field(default_factory=list)

    @property
    def v_complex(self):
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True)
class Violation:
    kind: str  # SlackP | SlackQ | PvQ | PqVmag | BranchFlow
    element: int  # bus id, generator bus id or branch position
    magnitude: float  # p.u. amount outside the limit


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple[Violation, ...]


def dsbus_dv(y: np.ndarray, v: np.ndarray):
    """Partial derivatives of the complex bus injections S = V (Y V)*.

    Returns (dS/dVa, dS/dVm) as dense complex matrices.
    """
    i_bus = y @ v
    v_norm = v / np.abs(v)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(i_bus) - y * v[None, :])
    ds_dvm = v[:, None] * np.conj(y * v_norm[None, :]) + np.diag(
        np.conj(i_bus) * v_norm
    )
    return ds_dva, ds_dvm


def solve_pf(
    case: NetworkCase,
    adm: AdmittanceMatrix,
    indep: IndependentVars,
    p_load: np.ndarray,
    q_load: np.ndarray,
    init: PfInit | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Newton-Raphson solve of the balance equations in polar coordinates.

    Mismatch ordering is P at PV+PQ buses then Q at PQ buses.  On
    non-convergence the last iterate is returned with ``converged=False``;
    a singular Jacobian raises :class:`SingularJacobianError` instead.
    """
    indep.validate(case)
    n = case.n_bus
    slack = case.slack_index
    pv = case.pv_indices
    pq = case.pq_indices
    pvpq = np.concatenate([pv, pq])
    npv, npq = len(pv), len(pq)

    vm = np.ones(n)
    va = np.zeros(n)
    if init is not None:
        va = np.asarray(init.v_ang, dtype=float).copy()
        vm = np.asarray(init.v_mag, dtype=float).copy()
    vm[slack] = indep.v_slack
    vm[pv] = indep.pv_v_mag
    va[slack] = indep.theta_slack

    # net scheduled complex injection at non-slack buses
    p_spec = -np.asarray(p_load, dtype=float).copy()
    q_spec = -np.asarray(q_load, dtype=float).copy()
    p_spec[pv] += indep.pv_p_gen

    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s = v * np.conj(adm.y @ v)
        mis_p = s.real - p_spec
        mis_q = s.imag - q_spec
        f = np.concatenate([mis_p[pvpq], mis_q[pq]])
        norm_f = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm_f)
        if norm_f < tol:
            converged = True
            break
        if iterations == max_iter:
            break
        ds_dva, ds_dvm = dsbus_dv(adm.y, v)
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(
                f"singular Jacobian at iteration {iterations}"
            ) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(
                f"non-finite Newton step at iteration {iterations}"
            )
        va[pvpq] += dx[: npv + npq]
        vm[pq] += dx[npv + npq :]

    v = vm * np.exp(1j * va)
    s = v * np.conj(adm.y @ v)
    return PowerFlowSolution(
        v_mag=vm,
        v_ang=va,
        p_inj=s.real,
        q_inj=s.imag,
        slack_p_gen=float(s.real[slack] + p_load[slack]),
        slack_q_gen=float(s.imag[slack] + q_load[slack]),
        pv_q_gen=s.imag[pv] + np.asarray(q_load)[pv],
        branch_s=branch_flows(case, adm, v),
        iterations=iterations,
        converged=converged,
        max_residual=history[-1],
        residual_history=history,
    )


def branch_flows(case: NetworkCase, adm: AdmittanceMatrix, v: np.ndarray) -> np.ndarray:
    """Apparent power per branch, the larger of the two ends (p.u.)."""
    s_from = v[adm.f] * np.conj(adm.yf @ v)
    s_to = v[adm.t] * np.conj(adm.yt @ v)
    return np.maximum(np.abs(s_from), np.abs(s_to))


def check_feasibility(
    case: NetworkCase,
    solution: PowerFlowSolution,
    tolerance: float = 1e-6,
) -> FeasibilityReport:
    """Check the operating limits of all reconstructed (dependent) quantities.

    Covers slack P/Q, PV-bus reactive output, PQ-bus voltage magnitudes and
    branch apparent-power limits, each with an additive tolerance.  Calling
    this on a non-converged solution is an error: a diverged reconstruction
    is never feasible.
    """
    if not solution.converged:
        raise PowerFlowError("feasibility check requires a converged power flow")
    violations: list[Violation] = []
    gen_at = case.gen_lookup()

    slack = case.slack_index
    slack_gen = case.generators[gen_at[slack]]
    for kind, value, lo, hi in (
        ("SlackP", solution.slack_p_gen, slack_gen.p_min, slack_gen.p_max),
        ("SlackQ", solution.slack_q_gen, slack_gen.q_min, slack_gen.q_max),
    ):
        excess = max(value - hi, lo - value)
        if excess > tolerance:
            violations.append(Violation(kind, case.buses[slack].id, float(excess)))

    for j, i in enumerate(case.pv_indices):
        gen = case.generators[gen_at[i]]
        q = solution.pv_q_gen[j]
        excess = max(q - gen.q_max, gen.q_min - q)
        if excess > tolerance:
            violations.append(Violation("PvQ", case.buses[i].id, float(excess)))

    for i in case.pq_indices:
        bus = case.buses[i]
        vm = solution.v_mag[i]
        excess = max(vm - bus.v_max, bus.v_min - vm)
        if excess > tolerance:
            violations.append(Violation("PqVmag", bus.id, float(excess)))

    for e, br in enumerate(case.branches):
        if br.s_max <= 0:  # unlimited
            continue
        excess = solution.branch_s[e] - br.s_max
        if excess > tolerance:
            violations.append(Violation("BranchFlow", e, float(excess)))

    return FeasibilityReport(feasible=not violations, violations=tuple(violations))
