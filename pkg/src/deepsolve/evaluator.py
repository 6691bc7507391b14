"""Evaluation protocol: feasibility rate, cost gap, timing, and recovery.

One code path decides feasibility (the shared constraint checker at 1e-6),
for both the learned pipeline and the reference solver.  Timing runs are
strictly sequential with one discarded warm-up solve per phase; the model
path measures forward + decode + power-flow reconstruction, the reference
path a cold interior-point solve.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dataio, mlp
from .netmodel import AdmittanceMatrix, NetworkCase, build_admittance
from .opfref import WarmStart, generation_cost, recover, solve_opf
from .powerflow import IndependentVars, check_feasibility, solve_pf

FEAS_TOL = 1e-6


class EvalError(Exception):
    pass


@dataclass
class InstanceResult:
    index: int
    pf_converged: bool
    feasible: bool
    n_violations: int
    cost_model: float
    cost_ref: float
    time_model: float = np.nan
    time_ref: float = np.nan
    ref_iterations: int = 0
    recovered: bool | None = None
    recovery_time: float = 0.0
    recovery_iterations: int = 0


@dataclass
class EvalReport:
    case_id: str
    n_instances: int
    feasibility_rate: float  # percent
    avg_cost_model: float
    avg_cost_ref: float
    cost_diff_pct: float
    avg_time_model: float
    std_time_model: float
    avg_time_ref: float
    std_time_ref: float
    speedup: float
    n_recovered: int = 0
    n_recovery_failed: int = 0
    avg_recovery_time: float = 0.0
    avg_warm_iterations: float = 0.0
    avg_cold_iterations: float = 0.0
    instances: list[InstanceResult] = field(default_factory=list)


@dataclass
class ModelBundle:
    """Trained network plus the artifacts needed to run the pipeline."""

    model: mlp.MlpModel
    spec: dataio.ScalingSpec
    normalizer: dataio.Normalizer
    pf_init: object
    case_id: str

    @classmethod
    def from_checkpoint(cls, path):
        model, meta = mlp.load_model(path)
        spec = dataio.ScalingSpec(
            entries=tuple(
                dataio.ScalingEntry(e["id"], float(e["min"]), float(e["max"]))
                for e in meta["scaling_spec"]
            )
        )
        normalizer = dataio.Normalizer(
            mean=np.array(meta["normalizer"]["mean"]),
            std=np.array(meta["normalizer"]["std"]),
        )
        return cls(
            model=model,
            spec=spec,
            normalizer=normalizer,
            pf_init=np.array(meta["pf_init_dependent_mean"]),
            case_id=meta["case_id"],
        )

    def checkpoint_meta(self):
        return {
            "case_id": self.case_id,
            "scaling_spec": [
                {"id": e.var_id, "min": e.x_min, "max": e.x_max} for e in self.spec.entries
            ],
            "normalizer": {
                "mean": np.asarray(self.normalizer.mean).tolist(),
                "std": np.asarray(self.normalizer.std).tolist(),
            },
            "pf_init_dependent_mean": np.asarray(self.pf_init).tolist(),
        }


def _pipeline_once(bundle: ModelBundle, case, adm, init, loads):
    """One model-path pass: normalize, forward, decode, reconstruct."""
    n = case.n_bus
    x = bundle.normalizer.transform(loads[None, :])
    s, _ = mlp.forward(bundle.model, x)
    phys = dataio.decode(bundle.spec, s[0])
    npv = len(case.pv_indices)
    indep = IndependentVars(
        v_slack=phys[0], pv_p_gen=phys[1 : 1 + 2 * npv : 2], pv_v_mag=phys[2 : 2 + 2 * npv : 2]
    )
    sol = solve_pf(case, adm, indep, loads[:n], loads[n:], init=init)
    return indep, sol


def _gen_vectors(case, indep, sol):
    """Per-generator dispatch implied by a reconstruction."""
    ng = len(case.generators)
    pg = np.empty(ng)
    qg = np.empty(ng)
    pv = case.pv_indices
    slack = case.slack_index
    for k, g in enumerate(case.generators):
        b = case.bus_index(g.bus)
        if b == slack:
            pg[k], qg[k] = sol.slack_p_gen, sol.slack_q_gen
        else:
            j = int(np.where(pv == b)[0][0])
            pg[k], qg[k] = indep.pv_p_gen[j], sol.pv_q_gen[j]
    return pg, qg


def evaluate(
    bundle: ModelBundle,
    dataset: dataio.Dataset,
    case: NetworkCase,
    adm: AdmittanceMatrix | None = None,
    timed: bool = True,
) -> EvalReport:
    """Run the full test protocol over a dataset split."""
    if bundle.case_id != case.name or dataset.case_id != case.name:
        raise EvalError("model, dataset and case identifiers do not agree")
    if adm is None:
        adm = build_admittance(case)
    init = dataio.pf_init_from_dependent(case, np.asarray(bundle.pf_init))

    instances: list[InstanceResult] = []
    for idx, sample in enumerate(dataset.samples):
        indep, sol = _pipeline_once(bundle, case, adm, init, sample.loads)
        feasible = False
        n_viol = 0
        cost_model = np.nan
        if sol.converged:
            report = check_feasibility(case, sol, FEAS_TOL)
            feasible = report.feasible
            n_viol = len(report.violations)
            pg, _ = _gen_vectors(case, indep, sol)
            cost_model = generation_cost(case, pg)
        instances.append(
            InstanceResult(
                index=idx,
                pf_converged=sol.converged,
                feasible=feasible,
                n_violations=n_viol,
                cost_model=cost_model,
                cost_ref=sample.objective_true,
            )
        )

    if timed and dataset.samples:
        # warm-up solves are discarded so cache effects hit both paths alike
        _pipeline_once(bundle, case, adm, init, dataset.samples[0].loads)
        for inst, sample in zip(instances, dataset.samples):
            t0 = time.perf_counter()
            _pipeline_once(bundle, case, adm, init, sample.loads)
            inst.time_model = time.perf_counter() - t0
        solve_opf(case, loads=dataset.samples[0].loads, adm=adm)
        for inst, sample in zip(instances, dataset.samples):
            t0 = time.perf_counter()
            ref = solve_opf(case, loads=sample.loads, adm=adm)
            inst.time_ref = time.perf_counter() - t0
            inst.ref_iterations = ref.iterations

    return _summarize(case.name, instances)


def _summarize(case_id, instances) -> EvalReport:
    n = len(instances)
    feas = np.array([i.feasible for i in instances], dtype=bool)
    both = np.array(
        [i.feasible and np.isfinite(i.cost_ref) for i in instances], dtype=bool
    )
    cost_model = np.array([i.cost_model for i in instances])
    cost_ref = np.array([i.cost_ref for i in instances])
    t_model = np.array([i.time_model for i in instances], dtype=float)
    t_ref = np.array([i.time_ref for i in instances], dtype=float)
    timed = np.isfinite(t_model).all() and np.isfinite(t_ref).all() and n > 0

    avg_cost_model = float(np.mean(cost_model[both])) if both.any() else np.nan
    avg_cost_ref = float(np.mean(cost_ref[both])) if both.any() else np.nan
    cost_diff = (
        (avg_cost_model - avg_cost_ref) / avg_cost_ref * 100.0 if both.any() else np.nan
    )
    rec = [i for i in instances if i.recovered is not None]
    warm = [i.recovery_iterations for i in rec if i.recovered]
    cold = [i.ref_iterations for i in rec if i.recovered]
    return EvalReport(
        case_id=case_id,
        n_instances=n,
        feasibility_rate=float(100.0 * feas.mean()) if n else 0.0,
        avg_cost_model=avg_cost_model,
        avg_cost_ref=avg_cost_ref,
        cost_diff_pct=float(cost_diff) if both.any() else np.nan,
        avg_time_model=float(np.mean(t_model)) if timed else np.nan,
        std_time_model=float(np.std(t_model)) if timed else np.nan,
        avg_time_ref=float(np.mean(t_ref)) if timed else np.nan,
        std_time_ref=float(np.std(t_ref)) if timed else np.nan,
        speedup=float(np.mean(t_ref) / np.mean(t_model)) if timed else np.nan,
        n_recovered=sum(bool(i.recovered) for i in rec),
        n_recovery_failed=sum(not i.recovered for i in rec),
        avg_recovery_time=float(np.mean([i.recovery_time for i in rec])) if rec else 0.0,
        avg_warm_iterations=float(np.mean(warm)) if warm else 0.0,
        avg_cold_iterations=float(np.mean(cold)) if cold else 0.0,
        instances=instances,
    )


def recover_infeasible(
    report: EvalReport,
    bundle: ModelBundle,
    dataset: dataio.Dataset,
    case: NetworkCase,
    adm: AdmittanceMatrix | None = None,
) -> EvalReport:
    """Re-solve every infeasible instance from its prediction as warm start.

    Recovery time is added to the instance's model-path time; warm/cold
    iteration counts are kept for comparison.  Instances whose reference

    iteration count is unknown (untimed evaluate) get a cold solve here.
    """
    if adm is None:
        adm = build_admittance(case)
    init = dataio.pf_init_from_dependent(case, np.asarray(bundle.pf_init))
    for inst in report.instances:
        if inst.feasible:
            continue
        sample = dataset.samples[inst.index]
        indep, sol = _pipeline_once(bundle, case, adm, init, sample.loads)
        pg, qg = _gen_vectors(case, indep, sol)
        ws = WarmStart(v_mag=sol.v_mag, v_ang=sol.v_ang, p_gen=pg, q_gen=qg)
        t0 = time.perf_counter()
        fixed = recover(case, sample.loads, ws, adm=adm)
        inst.recovery_time = time.perf_counter() - t0
        inst.recovered = bool(fixed.converged)
        inst.recovery_iterations = fixed.iterations
        if inst.recovered:
            inst.feasible = True
            inst.cost_model = fixed.objective
            if np.isfinite(inst.time_model):
                inst.time_model += inst.recovery_time
        if inst.ref_iterations == 0:
            cold = solve_opf(case, loads=sample.loads, adm=adm)
            inst.ref_iterations = cold.iterations
    return _summarize(report.case_id, report.instances)


def dump_comparison(
    bundle: ModelBundle,
    dataset: dataio.Dataset,
    case: NetworkCase,
    instance: int = 0,
    adm: AdmittanceMatrix | None = None,
) -> str:
    """Predicted-vs-reference comparison rows for one test instance.

    Comma-separated: variable id, predicted, reference — active power per
    generator bus, then voltage magnitude per PV bus and the slack.
    """
    if adm is None:
        adm = build_admittance(case)
    init = dataio.pf_init_from_dependent(case, np.asarray(bundle.pf_init))
    sample = dataset.samples[instance]
    x = bundle.normalizer.transform(sample.loads[None, :])
    s_pred, _ = mlp.forward(bundle.model, x)
    pred = dataio.decode(bundle.spec, s_pred[0])
    ref = dataio.decode(bundle.spec, sample.s_true)
    lines = ["variable,predicted,reference"]
    for entry, p, r in zip(bundle.spec.entries, pred, ref):
        lines.append(f"{entry.var_id},{p:.10g},{r:.10g}")
    # slack active power comes from the reconstruction on both sides
    _, sol_pred = _pipeline_once(bundle, case, adm, init, sample.loads)
    npv = len(case.pv_indices)
    ref_indep = IndependentVars(
        v_slack=ref[0], pv_p_gen=ref[1 : 1 + 2 * npv : 2], pv_v_mag=ref[2 : 2 + 2 * npv : 2]
    )
    n = case.n_bus
    sol_ref = solve_pf(case, adm, ref_indep, sample.loads[:n], sample.loads[n:], init=init)
    slack_id = case.buses[case.slack_index].id
    lines.append(
        f"pg:{slack_id},{sol_pred.slack_p_gen:.10g},{sol_ref.slack_p_gen:.10g}"
    )
    return "\n".join(lines) + "\n"


def report_text(report: EvalReport) -> str:
    """Human-readable summary table."""
    def money(v):
        return f"{v:.1f} $/hr" if np.isfinite(v) else "n/a"

    rows = [
        ("instances", f"{report.n_instances}"),
        ("feasibility rate", f"{report.feasibility_rate:.1f} %"),
        ("avg cost (model)", money(report.avg_cost_model)),
        ("avg cost (reference)", money(report.avg_cost_ref)),
        ("cost difference",
         f"{report.cost_diff_pct:+.3f} %" if np.isfinite(report.cost_diff_pct) else "n/a"),
        ("avg time (model)", _ms(report.avg_time_model, report.std_time_model)),
        ("avg time (reference)", _ms(report.avg_time_ref, report.std_time_ref)),
        ("speedup", f"x{report.speedup:.1f}" if np.isfinite(report.speedup) else "n/a"),
    ]
    if report.n_recovered or report.n_recovery_failed:
        rows += [
            ("recovered instances", f"{report.n_recovered}"),
            ("failed recoveries", f"{report.n_recovery_failed}"),
            ("avg recovery time", _ms(report.avg_recovery_time, None)),
            ("warm vs cold iterations",
             f"{report.avg_warm_iterations:.1f} vs {report.avg_cold_iterations:.1f}"),
        ]
    width = max(len(k) for k, _ in rows)
    header = f"evaluation: {report.case_id}"
    lines = [header, "-" * len(header)]
    lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
    return "\n".join(lines) + "\n"


def _ms(mean, std):
    if mean is None or not np.isfinite(mean):
        return "n/a"
    if std is None or not np.isfinite(std):
        return f"{mean * 1e3:.2f} ms"
    return f"{mean * 1e3:.2f} +- {std * 1e3:.2f} ms"


def report_csv(report: EvalReport) -> str:
    """Machine-readable report: summary record plus per-instance records."""
    lines = [
        "record,case_id,n_instances,feasibility_rate,avg_cost_model,avg_cost_ref,"
        "cost_diff_pct,avg_time_model,avg_time_ref,speedup,n_recovered,"
        "avg_warm_iterations,avg_cold_iterations"
    ]
    r = report
    lines.append(
        f"summary,{r.case_id},{r.n_instances},{r.feasibility_rate:.6g},"
        f"{r.avg_cost_model:.10g},{r.avg_cost_ref:.10g},{r.cost_diff_pct:.6g},"
        f"{r.avg_time_model:.6g},{r.avg_time_ref:.6g},{r.speedup:.6g},"
        f"{r.n_recovered},{r.avg_warm_iterations:.6g},{r.avg_cold_iterations:.6g}"
    )
    lines.append(
        "record,index,pf_converged,feasible,n_violations,cost_model,cost_ref,"
        "time_model,time_ref,ref_iterations,recovered,recovery_iterations"
    )
    for i in report.instances:
        lines.append(
            f"instance,{i.index},{int(i.pf_converged)},{int(i.feasible)},"
            f"{i.n_violations},{i.cost_model:.10g},{i.cost_ref:.10g},"
            f"{i.time_model:.6g},{i.time_ref:.6g},{i.ref_iterations},"
            f"{'' if i.recovered is None else int(i.recovered)},{i.recovery_iterations}"
        )
    return "\n".join(lines) + "\n"
