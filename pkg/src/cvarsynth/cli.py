"""Command-line front end for synthesis, analysis, certification, comparison.

Four batch subcommands operate on JSON problem/result files and write
JSON metrics plus CSV series into an output directory::

    cvarsynth synth   --problem p.json --mode cvar --seed 7 --out run/
    cvarsynth analyze --problem p.json --result run/result.json --out run/
    cvarsynth certify --gamma 1e-4 --eps 1e-3
    cvarsynth compare --problem p.json --result det.json sto.json

Every structured output carries the ``config_hash`` of the run that
produced its design, so artifacts can be tied back to their inputs.
Worker count (``--workers`` or the ``CVARSYNTH_WORKERS`` environment
variable) changes wall time only, never any number in any file.

Exit codes: 0 success (synthesis converged), 1 malformed input or
missing file, 2 synthesis stopped without convergence (stalled or
iteration limit), 3 no stabilizing controller found.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .cvar import batch_eval, save_histogram
from .errors import CvarSynthError, SpecError
from .losses import EvalOptions
from .sampling import CertifyConfig, draw_samples, sample_bound
from .synth import (
    batch_record,
    compare,
    load_result,
    options_from_dict,
    problem_from_dict,
    save_result,
    solve_cvar,
    solve_minmax,
    write_iteration_log,
)

__all__ = ["main"]

_METRICS_TAG = "cvarsynth-metrics-v1"
_COMPARE_TAG = "cvarsynth-compare-v1"
_CERTIFICATE_TAG = "cvarsynth-certificate-v1"

# evaluation tolerances for all post-synthesis analysis (matches compare)
_EVAL_OPTIONS = EvalOptions(hinf_tol=1e-8)

_EXIT_STATUS = {
    "converged": 0,
    "stalled": 2,
    "iter_limit": 2,
    "infeasible_stabilization": 3,
}


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(what, f"invalid JSON in {path}: {exc}")


def _load_problem_file(path, args):
    """Problem + solver options from a file, with CLI overrides applied."""
    doc = _read_json(path, "problem_file")
    problem = problem_from_dict(doc)
    opts = options_from_dict(doc)
    if args.seed is not None:
        problem = dataclasses.replace(
            problem, scenario=dataclasses.replace(problem.scenario, seed=args.seed))
    if getattr(args, "samples", None) is not None and args.cmd == "synth":
        problem = dataclasses.replace(
            problem,
            scenario=dataclasses.replace(problem.scenario,
                                         schedule=(args.samples,)))
    if args.beta is not None:
        problem = dataclasses.replace(
            problem,
            requirements=tuple(dataclasses.replace(r, beta=args.beta)
                               for r in problem.requirements))
    return problem, opts


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("CVARSYNTH_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SpecError("CVARSYNTH_WORKERS", f"not an integer: {env!r}")
    return 1


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _design_from_result(doc, problem, what="result_file"):
    k = np.asarray(doc["k_star"], dtype=float).ravel()
    if k.size != problem.template.dim_k:
        raise SpecError(
            what,
            f"design vector has {k.size} entries but the problem template "
            f"has {problem.template.dim_k} free parameters",
        )
    return k


def _dump(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    problem, opts = _load_problem_file(args.problem, args)
    opts = dataclasses.replace(opts, workers=_workers(args))
    mode = args.mode or problem.mode
    solver = solve_cvar if mode == "cvar" else solve_minmax
    res = solver(problem, opts=opts)
    out = _outdir(args)
    save_result(os.path.join(out, "result.json"), res)
    write_iteration_log(os.path.join(out, "iterations.csv"), res.log_rows)
    print(f"status: {res.status}")
    print(f"iterations: {res.iterations}  evaluations: {res.evaluations}  "
          f"wall: {res.wall_time_s:.1f}s")
    for name, est in res.estimates.items():
        line = f"{name}: mean={est.mean:.6g}"
        if est.cvar is not None:
            line += f"  cvar[{est.beta:g}]={est.cvar:.6g}  worst={est.worst:.6g}"
        print(line)
    print(f"wrote {os.path.join(out, 'result.json')}")
    return _EXIT_STATUS.get(res.status, 2)


def cmd_analyze(args) -> int:
    problem, _ = _load_problem_file(args.problem, args)
    doc = load_result(args.result)
    k = _design_from_result(doc, problem)
    n = args.samples if args.samples is not None else 10000
    # fresh set: never reuse the synthesis stream unless forced via --seed
    seed = args.seed if args.seed is not None else problem.scenario.seed + 90001
    scen = draw_samples(problem.scenario.dists, n, seed,
                        problem.scenario.constraint)
    specs = [r.loss for r in problem.requirements]
    nominal = np.zeros(problem.scenario.dists.nparams)
    nom = batch_eval(problem.model, problem.template, k, nominal[None, :],
                     specs, options=_EVAL_OPTIONS)
    batches = batch_eval(problem.model, problem.template, k, scen, specs,
                         options=_EVAL_OPTIONS, workers=_workers(args))
    out = _outdir(args)
    records = []
    for req, nb, batch in zip(problem.requirements, nom, batches):
        nom_val = float(nb.values[0]) if np.isfinite(nb.values[0]) else None
        rec = batch_record(req.name, req.beta, batch.values, seed,
                           nominal=nom_val)
        rec["role"] = req.role
        rec["bound"] = req.bound
        records.append(rec)
        finite = batch.values[np.isfinite(batch.values)]
        if finite.size:
            save_histogram(os.path.join(out, f"hist_{req.name}.csv"),
                           batch.values)
    unstable = int(max(r["unstable_count"] for r in records))
    metrics = {
        "format": _METRICS_TAG,
        "config_hash": doc["config_hash"],
        "mode": doc["mode"],
        "status": doc["status"],
        "n_samples": n,
        "seed": seed,
        "unstable_count": unstable,
        "requirements": records,
    }
    _dump(os.path.join(out, "metrics.json"), metrics)
    def show(v):
        return "n/a" if v is None else f"{v:.6g}"

    for r in records:
        print(f"{r['requirement']}: mean={show(r['mean'])}  "
              f"cvar[{r['beta']:g}]={show(r['cvar'])}  "
              f"worst={show(r['worst_in_sample'])}")
    if unstable:
        print(f"warning: {unstable} of {n} samples not stabilized")
    print(f"wrote {os.path.join(out, 'metrics.json')}")
    return 0


def _coverage_statement(cfg: CertifyConfig) -> str:
    conf = f"{(1.0 - cfg.gamma) * 100:.10g}"
    mass = f"{(1.0 - cfg.epsilon) * 100:.10g}"
    return (f"with probability at least {conf}%, the design satisfies the "
            f"requirement on at least {mass}% of parameter draws")


def cmd_certify(args) -> int:
    if args.gamma is None or args.eps is None:
        raise SpecError("certify", "--gamma and --eps are required")
    cfg = CertifyConfig(epsilon=args.eps, gamma=args.gamma)
    n_req = sample_bound(cfg)
    print(f"required sample count: {n_req}")
    print(f"if all {n_req} sampled closed loops satisfy a requirement, then "
          + _coverage_statement(cfg))
    if args.result is None or args.problem is None:
        return 0

    problem, _ = _load_problem_file(args.problem, args)
    doc = load_result(args.result)
    k = _design_from_result(doc, problem)
    n = args.samples if args.samples is not None else n_req
    seed = args.seed if args.seed is not None else problem.scenario.seed + 90001
    scen = draw_samples(problem.scenario.dists, n, seed,
                        problem.scenario.constraint)
    hard = [r for r in problem.requirements if r.role == "hard"]
    batches = batch_eval(problem.model, problem.template, k, scen,
                         [r.loss for r in hard], options=_EVAL_OPTIONS,
                         workers=_workers(args))
    rows = []
    for req, batch in zip(hard, batches):
        worst = float(np.max(batch.values))
        violations = int(np.count_nonzero(~(batch.values <= req.bound)))
        ok = violations == 0 and n >= n_req
        rows.append({"requirement": req.name, "bound": req.bound,
                     "worst_in_sample": worst if np.isfinite(worst) else None,
                     "violations": violations, "certified": ok})
        verdict = "certified" if ok else "NOT certified"
        print(f"{req.name}: worst over {n} samples = "
              f"{worst:.6g} (bound {req.bound:g}) -> {verdict}")
    certificate = {
        "format": _CERTIFICATE_TAG,
        "config_hash": doc["config_hash"],
        "gamma": cfg.gamma,
        "epsilon": cfg.epsilon,
        "required_n": n_req,
        "n_evaluated": n,
        "seed": seed,
        "statement": _coverage_statement(cfg),
        "requirements": rows,
    }
    out = _outdir(args)
    _dump(os.path.join(out, "certificate.json"), certificate)
    print(f"wrote {os.path.join(out, 'certificate.json')}")
    return 0


def cmd_compare(args) -> int:
    problem, _ = _load_problem_file(args.problem, args)
    docs = [load_result(p) for p in args.result]
    labels = [d["mode"] for d in docs]
    if labels[0] == labels[1]:
        labels = [f"{labels[0]}#1", f"{labels[1]}#2"]
    designs = {
        label: _design_from_result(doc, problem)
        for label, doc in zip(labels, docs)
    }
    n = args.samples if args.samples is not None else 10000
    report = compare(problem, designs, n_eval=n, seed=args.seed,
                     workers=_workers(args), options=_EVAL_OPTIONS)
    print(report.to_text())
    out = _outdir(args)
    doc = {
        "format": _COMPARE_TAG,
        "config_hash": {label: d["config_hash"]
                        for label, d in zip(labels, docs)},
        "n_samples": report.n,
        "seed": report.seed,
        "rows": report.rows,
    }
    _dump(os.path.join(out, "compare.json"), doc)
    print(f"wrote {os.path.join(out, 'compare.json')}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(sub, *, result_nargs=None):
    sub.add_argument("--problem", help="problem JSON file")
    if result_nargs:
        sub.add_argument("--result", nargs=result_nargs,
                         help="result JSON file(s)")
    else:
        sub.add_argument("--result", help="result JSON file")
    sub.add_argument("--seed", type=int, help="override the sampling seed")
    sub.add_argument("--samples", type=int, help="override the sample count")
    sub.add_argument("--beta", type=float,
                     help="override the risk level of every requirement")
    sub.add_argument("--gamma", type=float,
                     help="certification confidence parameter")
    sub.add_argument("--eps", type=float,
                     help="certification violation level")
    sub.add_argument("--workers", type=int,
                     help="process count for batch evaluation "
                          "(default: CVARSYNTH_WORKERS or 1)")
    sub.add_argument("--out", help="output directory (default: .)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvarsynth",
        description="Risk-averse robust controller synthesis over sampled "
                    "parametric uncertainty.",
    )
    subs = parser.add_subparsers(dest="cmd", required=True)

    p = subs.add_parser("synth", help="run synthesis on a problem file")
    p.add_argument("--mode", choices=("cvar", "minmax"),
                   help="solver (default: the problem file's mode field)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("analyze",
                        help="Monte-Carlo metrics and histograms for a result")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = subs.add_parser("certify",
                        help="scenario sample bound and empirical certificate")
    _add_common(p)
    p.set_defaults(func=cmd_certify)

    p = subs.add_parser("compare",
                        help="evaluate two results on one fresh sample set")
    _add_common(p, result_nargs=2)
    p.set_defaults(func=cmd_compare)
    return parser


def _require(args, *fields):
    for f in fields:
        if getattr(args, f, None) is None:
            raise SpecError(args.cmd, f"--{f} is required")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "synth":
            _require(args, "problem")
        elif args.cmd in ("analyze", "compare"):
            _require(args, "problem", "result")
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 1
    except (CvarSynthError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
