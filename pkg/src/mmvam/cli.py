"""Command-line front end: ``mmvam fit`` and ``mmvam simulate``.

Exit codes: 0 success, 1 input or configuration error (nothing written),
2 EM did not converge (artifacts still written), 3 numerical failure during
the fit (nothing written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .design import ModelVariant, build_design
from .emcore import EMConfig, FitResult, ParamLayout, ParamState, run_em
from .errors import MMVAMError, ConfigError, DesignError, DimensionError, ParseError, ValidationError
from .infer import InferenceResult, eblup_table, format_table, infer
from .ingest import Schema, build_dataset, pattern_years, parse_records
from .simgen import SimSpec, simulate_dataset, write_simulation

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 1, 2, 3
INPUT_ERRORS = (ParseError, ConfigError, ValidationError, DimensionError, DesignError, OSError, ValueError)

log = logging.getLogger("mmvam")


def _clean(x):
    """JSON-safe: NaN/inf become null, numpy types become Python types."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def params_document(fit: FitResult, inference: InferenceResult | None, tol: float) -> dict:
    """Fitted parameters with standard errors as a JSON-ready dict."""
    design, params = fit.design, fit.params
    layout = ParamLayout(design)
    est = layout.pack(params)
    se = inference.param_se if inference is not None else np.full(len(est), np.nan)
    se_of = dict(zip(layout.names, se))

    gammas = []
    for b in design.teacher_blocks:
        G = np.atleast_2d(params.gammas[b.grade - 1])
        S = np.full_like(G, np.nan)
        for a in range(b.size):
            for c in range(a + 1):
                S[a, c] = S[c, a] = se_of[f"Gamma{b.grade}[{a + 1},{c + 1}]"]
        gammas.append({"grade": b.grade, "estimate": G, "se": S})

    if design.variant is ModelVariant.GP_G:
        residual = {
            "type": "yearly",
            "sigma2": params.sigma2,
            "sigma2_se": [se_of[f"sigma2[{g}]"] for g in range(1, design.T + 1)],
            "gamma_stu": params.gamma_stu,
            "gamma_stu_se": se_of["Gamma_stu"],
        }
    else:
        S = np.full((design.T, design.T), np.nan)
        for k, l in design.sigma_pairs:
            S[k - 1, l - 1] = S[l - 1, k - 1] = se_of[f"sigma[{k},{l}]"]
        residual = {"type": "unstructured", "sigma": params.sigma, "sigma_se": S}

    doc = {
        "model": design.variant.value,
        "converged": fit.converged,
        "iterations": fit.trace.iterations,
        "loglik": fit.loglik,
        "rel_tol": tol,
        "score_norm": fit.trace.score_norm,
        "n_students": design.data.n,
        "n_obs": design.n_obs,
        "T": design.T,
        "teachers_per_year": list(design.data.m),
        "beta": [{"name": n, "estimate": b, "se": se_of[f"beta[{n}]"]} for n, b in zip(design.x_names, params.beta)],
        "gammas": gammas,
        "residual": residual,
        "alpha": [
            {"g": g, "t": t, "estimate": a, "se": se_of.get(f"alpha[{g},{t}]"), "fixed": not design.alpha_free}
            for (g, t), a in zip(design.alpha_pairs, params.alpha if design.alpha_pairs else [])
        ],
        "parameters": [{"name": n, "estimate": e, "se": s} for n, e, s in zip(layout.names, est, se)],
        "information_pd": None if inference is None else inference.information.is_pd,
        "state": params.to_dict(),
    }
    return _clean(doc)


def summary_text(fit: FitResult) -> str:
    data, design, tr = fit.design.data, fit.design, fit.trace
    lines = [
        f"model: {design.variant.value}",
        f"students (n): {data.n}",
        f"scored observations: {data.n_obs}",
        f"years (T): {data.T}",
        "teachers per year: " + ", ".join(f"m_{g}={m}" for g, m in enumerate(data.m, 1)),
        f"random effects (q): {design.q}",
        "",
        "OTS patterns:",
        f"  {'pattern':>7}  {'years':<{2 * data.T + 1}}  students",
    ]
    for p, count in data.pattern_counts.items():
        yrs = ",".join(map(str, pattern_years(p, data.T)))
        lines.append(f"  {p:>7}  {yrs:<{2 * data.T + 1}}  {count}")
    lines += [
        "",
        f"converged: {'yes' if tr.converged else 'no'}",
        f"iterations: {tr.iterations}",
        f"final log-likelihood: {fit.loglik!r}",
        f"final relative change: {tr.rel_change[-1]!r}",
        f"final score norm: {tr.score_norm!r}",
    ]
    return "\n".join(lines) + "\n"


def _load_init(path: str) -> ParamState:
    with open(path) as fh:
        doc = json.load(fh)
    return ParamState.from_dict(doc.get("state", doc))


def cmd_fit(args) -> int:
    schema = Schema(args.col_student, args.col_year, args.col_teacher, args.col_score, tuple(args.covariates))
    try:
        with open(args.data, newline="") as fh:
            records = parse_records(fh, schema, delimiter=args.delimiter)
        data = build_dataset(records, T=args.T, covariate_names=schema.covariates or None)
        design = build_design(data, args.model, list(schema.covariates), fixed_alpha=args.fix_alpha)
        init = _load_init(args.init) if args.init else None
        config = EMConfig(rel_tol=args.tol, max_iter=args.max_iter)
    except (*INPUT_ERRORS, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    def stream(k, params, moments):
        if args.stream_trace:
            print(json.dumps({"iteration": k, "loglik": moments.loglik}), file=sys.stderr)

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = run_em(design, init, config, callback=stream)
            inference = None if args.no_se else infer(fit, config)
    except (ValueError, MMVAMError) as exc:
        print(f"error: fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "params.json", "w") as fh:
        json.dump(params_document(fit, inference, args.tol), fh, indent=2)
        fh.write("\n")
    rows = eblup_table(fit, inference)
    (out / "eblups.csv").write_text(format_table(rows))
    (out / "trace.csv").write_text(format_table(list(fit.trace.rows())))
    (out / "summary.txt").write_text(summary_text(fit))
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    m = tuple(args.m) if len(args.m) > 1 else args.m[0]
    spec = SimSpec(
        n=args.n,
        T=args.T,
        m=m,
        variant=args.model,
        missing_rate=args.missing_rate,
        seed=args.seed,
        mixing=args.mixing,
        n_schools=args.n_schools,
        move_prob=args.move_prob,
    )
    try:
        data, truth = simulate_dataset(spec)
    except (MMVAMError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    write_simulation(data, truth, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvam", description="Multiple-membership value-added models fitted by sparse EM.")
    sub = parser.add_subparsers(dest="command", required=True)
    models = [v.value for v in ModelVariant]

    fit = sub.add_parser("fit", help="fit a model to a long-format CSV")
    fit.add_argument("--model", required=True, choices=models)
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--tol", type=float, default=1e-7, help="relative log-likelihood change to stop at")
    fit.add_argument("--max-iter", type=int, default=5000)
    fit.add_argument("--seed", type=int, default=0, help="accepted for symmetry; the fit is deterministic")
    fit.add_argument("--col-student", default="student")
    fit.add_argument("--col-year", default="year")
    fit.add_argument("--col-teacher", default="teacher")
    fit.add_argument("--col-score", default="score")
    fit.add_argument("--covariates", type=lambda s: [c for c in s.split(",") if c], default=[])
    fit.add_argument("--fix-alpha", type=float, default=None, help="freeze every VP persistence parameter")
    fit.add_argument("--init", default=None, help="params.json to start from")
    fit.add_argument("--T", type=int, default=None, help="number of years (default: largest year seen)")
    fit.add_argument("--delimiter", default=",")
    fit.add_argument("--no-se", action="store_true", help="skip the observed-information standard errors")
    fit.add_argument("--stream-trace", action="store_true", help="write one JSON line per iteration to stderr")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="simulate a dataset")
    sim.add_argument("--model", default="gp.r", choices=models)
    sim.add_argument("--out", required=True)
    sim.add_argument("--n", type=int, default=300)
    sim.add_argument("--T", type=int, default=3)
    sim.add_argument("--m", type=int, nargs="+", default=[10], help="teachers per year (one value or T values)")
    sim.add_argument("--missing-rate", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--mixing", choices=["random", "school", "cohort"], default="random")
    sim.add_argument("--n-schools", type=int, default=1)
    sim.add_argument("--move-prob", type=float, default=0.05)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fit" and args.fix_alpha is not None and args.model != "vp":
        print("error: --fix-alpha only applies to --model vp", file=sys.stderr)
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
