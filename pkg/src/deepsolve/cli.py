"""Command-line entry point.

Subcommands: gen-data, train, eval, solve-pf, solve-opf, predict, report.
Every run writes a manifest (resolved options, seeds, input digests, tool
version) next to its outputs; all randomness flows from explicit --seed
flags so reruns reproduce outputs bit-exactly.

Exit status: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio, evaluator, mlp, trainer
from .estimator import OpfPredictor
from .netmodel import CaseError, NetworkCase, build_admittance, load_case
from .opfref import OpfError, WarmStart, solve_opf
from .powerflow import IndependentVars, PowerFlowError, check_feasibility, solve_pf

log = logging.getLogger(__name__)

DOMAIN_ERRORS = (
    CaseError,
    PowerFlowError,
    OpfError,
    dataio.DataError,
    trainer.TrainingError,
    evaluator.EvalError,
    mlp.MlpError,
    FileNotFoundError,
    ValueError,
)


def default_workers():
    env = os.environ.get("DEEPSOLVE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring bad DEEPSOLVE_WORKERS=%r", env)
    return os.cpu_count() or 1


def _digest(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(args, out_dir, inputs, extra=None):
    """Record the resolved run configuration next to its outputs."""
    manifest = {
        "tool": "deepsolve",
        "version": __version__,
        "subcommand": args.command,
        "options": {
            k: v for k, v in sorted(vars(args).items()) if k not in ("command", "func")
        },
        "input_digests": {str(p): _digest(p) for p in inputs if Path(p).exists()},
    }
    if extra:
        manifest.update(extra)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"manifest-{args.command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def _resolve_case(spec_arg) -> tuple[NetworkCase, list]:
    case = load_case(spec_arg)
    inputs = [spec_arg] if Path(spec_arg).exists() else []
    return case, inputs


def read_loads_file(case, path) -> np.ndarray:
    """Per-bus loads file: 'bus_id,p_pu,q_pu' rows (header and blanks ok)."""
    p = np.array([b.p_load for b in case.buses])
    q = np.array([b.q_load for b in case.buses])
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.lower().startswith("bus"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise dataio.DataError(f"{path}:{lineno}: expected 'bus_id,p_pu,q_pu'")
        bus_id = int(parts[0])
        idx = case.bus_index(bus_id)
        p[idx], q[idx] = float(parts[1]), float(parts[2])
        seen.add(bus_id)
    return np.concatenate([p, q])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    case, inputs = _resolve_case(args.case)
    lo, hi = (float(v) for v in args.range.split(":"))
    train_ds, test_ds = dataio.build_dataset(
        case,
        args.train_count,
        args.test_count,
        seed=args.seed,
        load_range=(lo, hi),
        workers=args.workers,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(train_ds, out / "train.ds")
    dataio.save_dataset(test_ds, out / "test.ds")
    write_manifest(args, out, inputs, {"seeds": [args.seed]})
    print(
        f"wrote {len(train_ds)} training and {len(test_ds)} test samples to {out}"
    )
    return 0


def cmd_train(args):
    case, inputs = _resolve_case(args.case)
    data_path = Path(args.data_dir) / "train.ds"
    dataset = dataio.load_dataset(data_path)
    hidden = tuple(int(v) for v in args.hidden.split("/")) if args.hidden else None
    if hidden is None:
        hidden = {30: (64, 32), 118: (256, 128), 300: (1024, 512)}.get(
            case.n_bus, (64, 32)
        )
    predictor = OpfPredictor(
        case=case,
        hidden_layer_sizes=hidden,
        w1=args.w1,
        w2=args.w2,
        delta=args.delta,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        zo_draws=args.zo_draws,
    )
    predictor.fit(dataset)

    bundle = evaluator.ModelBundle(
        model=predictor.model_,
        spec=dataset.spec,
        normalizer=dataset.normalizer,
        pf_init=dataset.dependent_mean,
        case_id=case.name,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = bundle.checkpoint_meta()
    meta["seed"] = args.seed
    mlp.save_model(predictor.model_, out, meta=meta)

    metrics_path = out.with_suffix(out.suffix + ".metrics.csv")
    lines = ["epoch,pred,pen,total,wall_time"]
    for st in predictor.history_:
        lines.append(
            f"{st.epoch},{st.pred:.17g},{st.pen:.17g},{st.total:.17g},{st.wall_time:.6g}"
        )
    metrics_path.write_text("\n".join(lines) + "\n")
    write_manifest(args, out.parent, inputs + [data_path], {"seeds": [args.seed]})
    print(f"model written to {out}; metrics to {metrics_path}")
    return 0


def cmd_eval(args):
    case, inputs = _resolve_case(args.case)
    bundle = evaluator.ModelBundle.from_checkpoint(args.model)
    dataset = dataio.load_dataset(Path(args.data_dir) / "test.ds")
    adm = build_admittance(case)
    report = evaluator.evaluate(
        bundle, dataset, case, adm=adm, timed=not args.no_timing
    )
    if args.recover:
        report = evaluator.recover_infeasible(report, bundle, dataset, case, adm=adm)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(evaluator.report_csv(report))
    if args.dump_comparison:
        Path(args.dump_comparison).write_text(
            evaluator.dump_comparison(bundle, dataset, case, instance=args.instance, adm=adm)
        )
    write_manifest(
        args,
        out.parent,
        inputs + [args.model, Path(args.data_dir) / "test.ds"],
    )
    print(evaluator.report_text(report), end="")
    return 0


def _default_indep(case):
    gen_at = case.gen_lookup()
    pv = case.pv_indices
    pg = np.array(
        [
            0.5 * (case.generators[gen_at[i]].p_min + case.generators[gen_at[i]].p_max)
            for i in pv
        ]
    )
    vm = np.array([case.generators[gen_at[i]].v_setpoint for i in pv])
    slack_gen = case.generators[gen_at[case.slack_index]]
    return IndependentVars(v_slack=slack_gen.v_setpoint, pv_p_gen=pg, pv_v_mag=vm)


def _read_indep(case, path):
    spec = dataio.ScalingSpec.from_case(case)
    values = dict.fromkeys(e.var_id for e in spec.entries)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.lower().startswith("variable"):
            continue
        key, _, val = line.partition(",")
        if key not in values:
            raise dataio.DataError(f"{path}:{lineno}: unknown variable {key!r}")
        values[key] = float(val)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise dataio.DataError(f"{path}: missing values for {missing}")
    x = np.array([values[e.var_id] for e in spec.entries])
    npv = len(case.pv_indices)
    return IndependentVars(
        v_slack=x[0], pv_p_gen=x[1 : 1 + 2 * npv : 2], pv_v_mag=x[2 : 2 + 2 * npv : 2]
    )


def cmd_solve_pf(args):
    case, inputs = _resolve_case(args.case)
    adm = build_admittance(case)
    loads = (
        read_loads_file(case, args.loads)
        if args.loads
        else np.concatenate([case.default_p_load, case.default_q_load])
    )
    indep = _read_indep(case, args.indep) if args.indep else _default_indep(case)
    n = case.n_bus
    sol = solve_pf(case, adm, indep, loads[:n], loads[n:])
    doc = {
        "case_id": case.name,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "max_residual": sol.max_residual,
        "v_mag": sol.v_mag.tolist(),
        "v_ang": sol.v_ang.tolist(),
        "slack_p_gen": sol.slack_p_gen,
        "slack_q_gen": sol.slack_q_gen,
        "pv_q_gen": sol.pv_q_gen.tolist(),
        "branch_s": sol.branch_s.tolist(),
    }
    if sol.converged:
        doc["feasible"] = check_feasibility(case, sol, 1e-6).feasible
    text = json.dumps(doc, indent=1)
    if args.output:
        Path(args.output).write_text(text + "\n")
        write_manifest(args, Path(args.output).parent, inputs + _existing(args.loads, args.indep))
    print(text if not args.output else f"solution written to {args.output}")
    return 0 if sol.converged else 1


def _existing(*paths):
    return [p for p in paths if p and Path(p).exists()]


def cmd_solve_opf(args):
    case, inputs = _resolve_case(args.case)
    loads = (
        read_loads_file(case, args.loads)
        if args.loads
        else np.concatenate([case.default_p_load, case.default_q_load])
    )
    start = None
    if args.warm_start:
        doc = json.loads(Path(args.warm_start).read_text())
        start = WarmStart(
            v_mag=np.array(doc["v_mag"]),
            v_ang=np.array(doc["v_ang"]),
            p_gen=np.array(doc["p_gen"]),
            q_gen=np.array(doc["q_gen"]),
        )
    sol = solve_opf(case, loads=loads, start=start)
    doc = {
        "case_id": case.name,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "wall_time": sol.wall_time,
        "p_gen": sol.p_gen.tolist(),
        "q_gen": sol.q_gen.tolist(),
        "v_mag": sol.v_mag.tolist(),
        "v_ang": sol.v_ang.tolist(),
    }
    text = json.dumps(doc, indent=1)
    if args.output:
        Path(args.output).write_text(text + "\n")
        write_manifest(args, Path(args.output).parent, inputs + _existing(args.loads, args.warm_start))
    print(text if not args.output else f"solution written to {args.output}")
    return 0 if sol.converged else 1


def cmd_predict(args):
    bundle = evaluator.ModelBundle.from_checkpoint(args.model)
    case, inputs = _resolve_case(args.case) if args.case else (load_case(bundle.case_id), [])
    loads = (
        read_loads_file(case, args.loads)
        if args.loads
        else np.concatenate([case.default_p_load, case.default_q_load])
    )
    x = bundle.normalizer.transform(loads[None, :])
    s, _ = mlp.forward(bundle.model, x)
    phys = dataio.decode(bundle.spec, s[0])
    lines = ["variable,scaling_factor,physical"]
    for entry, sv, xv in zip(bundle.spec.entries, s[0], phys):
        lines.append(f"{entry.var_id},{sv:.10g},{xv:.10g}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        write_manifest(args, Path(args.output).parent, inputs + _existing(args.model, args.loads))
        print(f"prediction written to {args.output}")
    else:
        print(text, end="")
    return 0


def cmd_report(args):
    text = Path(args.input).read_text().splitlines()
    header = text[0].split(",")
    summary = dict(zip(header, text[1].split(",")))
    rows = [
        ("case", summary["case_id"]),
        ("instances", summary["n_instances"]),
        ("feasibility rate", f"{float(summary['feasibility_rate']):.1f} %"),
        ("avg cost (model)", f"{float(summary['avg_cost_model']):.1f} $/hr"),
        ("avg cost (reference)", f"{float(summary['avg_cost_ref']):.1f} $/hr"),
        ("cost difference", f"{float(summary['cost_diff_pct']):+.3f} %"),
        ("speedup", f"x{float(summary['speedup']):.1f}"),
    ]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k.ljust(width)}  {v}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deepsolve",
        description="Learned predict-and-reconstruct AC optimal power flow toolkit",
    )
    parser.add_argument("--version", action="version", version=f"deepsolve {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument(
        "--config",
        default=None,
        help="JSON file of option defaults; explicit flags still win",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample loads and label them with the reference solver")
    p.add_argument("--case", required=True, help="case file path or bundled name (case30)")
    p.add_argument("--train-count", type=int, required=True)
    p.add_argument("--test-count", type=int, required=True)
    p.add_argument("--range", default="0.9:1.1", help="load scaling range lo:hi")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=default_workers())
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the scaling-factor predictor")
    p.add_argument("--case", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--hidden", default=None, help="hidden layer sizes, e.g. 64/32")
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--zo-draws", type=int, default=1,
                   help="two-point estimates averaged per sample")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--workers", type=int, default=default_workers())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--recover", action="store_true", help="warm-start re-solve of infeasible instances")
    p.add_argument("--no-timing", action="store_true", help="skip the timing phase")
    p.add_argument("--report", required=True, help="report output path (csv)")
    p.add_argument("--dump-comparison", default=None, help="prediction-vs-reference csv path")
    p.add_argument("--instance", type=int, default=0, help="instance for --dump-comparison")
    p.add_argument("--workers", type=int, default=default_workers())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve-pf", help="solve one power flow (debugging)")
    p.add_argument("--case", required=True)
    p.add_argument("--loads", default=None, help="per-bus loads csv (bus_id,p_pu,q_pu)")
    p.add_argument("--indep", default=None, help="independent variables csv (variable,value)")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_solve_pf)

    p = sub.add_parser("solve-opf", help="solve one AC-OPF with the reference solver")
    p.add_argument("--case", required=True)
    p.add_argument("--loads", default=None)
    p.add_argument("--warm-start", default=None, help="warm-start file (solve-opf output)")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_solve_opf)

    p = sub.add_parser("predict", help="run the trained predictor on a load vector")
    p.add_argument("--model", required=True)
    p.add_argument("--case", default=None, help="defaults to the model's case")
    p.add_argument("--loads", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render an eval report csv as a table")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def _apply_config_file(parser, argv):
    """Config precedence: flags > config file > built-in defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    doc = json.loads(Path(known.config).read_text())
    if not isinstance(doc, dict):
        raise dataio.DataError(f"{known.config}: config must be a JSON object")
    overrides = {k.replace("-", "_"): v for k, v in doc.items()}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            for sub_action in sub._actions:
                if sub_action.dest in overrides:
                    sub_action.default = overrides[sub_action.dest]
                    sub_action.required = False


def main(argv=None):
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
