"""Command-line interface: ``mqiv {estimate,simulate,mc-study,probe}``.

Exit codes: 0 success, 1 usage, 2 data/validation, 3 estimation failure.
Options may also come from an INI file (``--config``) with one section per
command plus an optional ``[learner]`` section of hyperparameters; flags given
on the command line override file values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from mqiv.data import ColumnMapping, load_csv, save_csv, split_folds, validate
from mqiv.errors import DataError, MqivError, NuisanceError
from mqiv.estimators import ESTIMATORS, PROBE_MODES, robustness_probe, run_estimators
from mqiv.learners import KINDS, LearnerError, LearnerSpec
from mqiv.nuisance import fit_raw_nuisances, oracle_spec
from mqiv.simulation import LATENT_COLUMNS, DgpConfig, generate, oracle_att
from mqiv.study import McConfig, preset, run_study

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3

DEFAULTS_HELP = (
    "defaults: K=5 folds, CI level 0.95, learner=cv_ensemble, "
    "denominator floor |p1-p0| >= 0.01, probability clip [0.01, 0.99]"
)

MECHANISM_FLAGS = {"direct": "direct_multiplicative", "and-gate": "and_gate"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list:
    return [int(t) for t in _csv_list(text)]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mqiv", description="Multiplicative quasi-IV estimation of the ATT.",
                     epilog=DEFAULTS_HELP)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI file with defaults for this command")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output", help="output path (default: standard output)")

    def learner_flags(p, default):
        p.add_argument("--learner", default=default, choices=KINDS,
                       help="nuisance learner (oracle = true simulation nuisances)")
        p.add_argument("--k-folds", dest="k_folds", type=int, default=5)
        p.add_argument("--level", type=float, default=0.95)

    est = sub.add_parser("estimate", help="estimate the ATT from a CSV file", epilog=DEFAULTS_HELP)
    common(est)
    learner_flags(est, "cv_ensemble")
    est.add_argument("--input", help="CSV file with a header row")
    est.add_argument("--outcome", default="y")
    est.add_argument("--treatment", default="a")
    est.add_argument("--instrument", default="z")
    est.add_argument("--covariates", type=_csv_list, help="comma-separated covariate columns")
    est.add_argument("--estimator", type=_csv_list, default=["if1"],
                     help="comma list from {w1,if1,w2,w3,phi}")
    est.add_argument("--er", choices=("violated", "satisfied"), default="violated",
                     help="design regime used by --learner oracle")
    est.add_argument("--format", choices=("json", "table"), default="json")

    sim = sub.add_parser("simulate", help="draw a sample from the simulation design")
    common(sim)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--er", choices=("violated", "satisfied"), default="violated")
    sim.add_argument("--mechanism", choices=tuple(MECHANISM_FLAGS), default="direct")
    sim.add_argument("--latents", action="store_true", help="append latent columns " + ",".join(LATENT_COLUMNS))
    sim.add_argument("--oracle-att", dest="oracle_att", action="store_true",
                     help="print the true ATT (quadrature)")

    mc = sub.add_parser("mc-study", help="Monte Carlo study (bias / ASE / ESE / coverage)",
                        epilog=DEFAULTS_HELP)
    common(mc)
    learner_flags(mc, "oracle")
    mc.add_argument("--preset", choices=("table2-desk", "table2"))
    mc.add_argument("--reps", type=int)
    mc.add_argument("--sizes", type=_int_list)
    mc.add_argument("--estimator", type=_csv_list)
    mc.add_argument("--er", choices=("violated", "satisfied"), default="violated")
    mc.add_argument("--mechanism", choices=tuple(MECHANISM_FLAGS), default="direct")
    mc.add_argument("--jobs", type=int, default=1)
    mc.add_argument("--progress", action="store_true")
    mc.add_argument("--max-failure-fraction", dest="max_failure_fraction", type=float, default=0.05)
    mc.add_argument("--format", choices=("json", "table"), default="table")

    pr = sub.add_parser("probe", help="multiple-robustness probe of the EIF moment")
    common(pr)
    pr.add_argument("--mode", required=False, type=str.lower,
                    choices=("m1", "m2", "m3", "all-wrong"))
    pr.add_argument("--n", type=int, default=200000)
    pr.add_argument("--shift", type=float, default=0.3)
    pr.add_argument("--er", choices=("violated", "satisfied"), default="violated")
    return parser


def _apply_config(parser, argv):
    """Re-parse with INI values installed as defaults so explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.command or not getattr(args, "config", None):
        return args, {}
    cp = configparser.ConfigParser()
    if not cp.read(args.config):
        raise UsageError(f"cannot read config file {args.config}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    learner_hp = {k: _parse_value(v) for k, v in cp["learner"].items()} if cp.has_section("learner") else {}
    if cp.has_section(args.command):
        defaults = {}
        for key, value in cp[args.command].items():
            dest = key.replace("-", "_")
            action = next((a for a in sub._actions if a.dest == dest), None)
            if action is None:
                raise UsageError(f"config [{args.command}]: unknown key {key!r}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = cp[args.command].getboolean(key)
            else:
                defaults[dest] = action.type(value) if action.type else value
                if action.choices is not None and defaults[dest] not in action.choices:
                    raise UsageError(f"config [{args.command}]: {key}={value!r} not in {list(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args, learner_hp


def _learner(args, hyper, er_mode="violated") -> LearnerSpec:
    if args.learner == "oracle":
        return oracle_spec(er_mode)
    try:
        return LearnerSpec(args.learner, hyper)
    except LearnerError as exc:
        raise UsageError(str(exc)) from exc


def _write(text: str, path):
    if path:
        Path(path).write_text(text + ("" if text.endswith("\n") else "\n"), encoding="utf-8")
    else:
        sys.stdout.write(text + ("" if text.endswith("\n") else "\n"))


def _estimates_table(results) -> str:
    lines = [f"{'estimator':<10}{'point':>12}{'se':>12}{'ci_low':>12}{'ci_high':>12}"]
    for r in results:
        def f(v):
            return "-" if v is None else f"{v:.4f}"
        lines.append(f"{r.estimator:<10}{f(r.point):>12}{f(r.se):>12}{f(r.ci_low):>12}{f(r.ci_high):>12}")
    return "\n".join(lines)


def cmd_estimate(args, hyper) -> int:
    if not args.input:
        raise UsageError("estimate: --input is required")
    if not args.covariates:
        raise UsageError("estimate: --covariates is required")
    names = [e.upper() for e in args.estimator]
    bad = [e for e in names if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"estimate: unknown estimator(s) {bad}; expected {[e.lower() for e in ESTIMATORS]}")
    spec = _learner(args, hyper, args.er)
    mapping = ColumnMapping(args.outcome, args.treatment, args.instrument, tuple(args.covariates))
    ds = load_csv(args.input, mapping)
    report = validate(ds)
    fatal = [w for w in report.warnings if w.startswith(("degenerate", "empty cell"))]
    if fatal:
        raise DataError("; ".join(fatal))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not 2 <= args.k_folds <= ds.n:
        raise UsageError(f"--k-folds must lie in [2, {ds.n}]")
    folds = split_folds(ds.n, args.k_folds, args.seed)
    raw = fit_raw_nuisances(ds, folds, spec, need_single_arm="W3" in names)
    results = run_estimators(names, ds, folds, raw, args.level)
    if args.format == "table":
        _write(_estimates_table(results), args.output)
    else:
        _write(json.dumps([r.to_dict() for r in results], indent=2), args.output)
    return EXIT_OK


def cmd_simulate(args, hyper) -> int:
    if args.n < 1:
        raise UsageError("simulate: --n must be >= 1")
    cfg = DgpConfig(n=args.n, er_mode=args.er, mechanism=MECHANISM_FLAGS[args.mechanism],
                    seed=args.seed, keep_latents=args.latents)
    psi = oracle_att("quadrature") if args.oracle_att else None
    if args.output or not args.oracle_att:
        sample = generate(cfg)
        try:
            save_csv(sample.ds, args.output or sys.stdout, sample.latents)
        except OSError as exc:
            raise DataError(f"cannot write {args.output}: {exc}") from exc
    if psi is not None:
        print(json.dumps({"oracle_att": psi}))
    return EXIT_OK


def cmd_mc_study(args, hyper) -> int:
    base = preset(args.preset) if args.preset else McConfig()
    spec = None if args.learner == "oracle" else _learner(args, hyper)
    try:
        cfg = McConfig(
            sample_sizes=tuple(args.sizes) if args.sizes else base.sample_sizes,
            replications=args.reps if args.reps is not None else base.replications,
            estimators=tuple(args.estimator) if args.estimator else base.estimators,
            learner_spec=spec,
            k_folds=args.k_folds,
            er_mode=args.er,
            mechanism=MECHANISM_FLAGS[args.mechanism],
            base_seed=args.seed,
            ci_level=args.level,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = run_study(cfg, jobs=max(1, args.jobs), progress=args.progress)
    table = report.to_table()
    if args.output:
        out = Path(args.output)
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    sys.stdout.write((table if args.format == "table" else report.to_json()) + "\n")
    total = len(cfg.sample_sizes) * cfg.replications
    if report.failure_count > args.max_failure_fraction * total:
        _error("EstimationError", f"{report.failure_count} of {total} replications failed")
        return EXIT_ESTIMATION
    return EXIT_OK


def cmd_probe(args, hyper) -> int:
    if not args.mode:
        raise UsageError("probe: --mode is required (m1, m2, m3, all-wrong)")
    mode = args.mode.upper().replace("-", "_")
    assert mode in PROBE_MODES
    sample = generate(DgpConfig(n=args.n, er_mode=args.er, seed=args.seed))
    res = robustness_probe(sample.ds, mode, args.shift, args.er)
    verdict = "PASS" if res.passes else "FAIL"
    expected = "FAIL" if mode == "ALL_WRONG" else "PASS"
    lines = [
        f"mode: {mode}  n: {res.n}  shift: {res.shift}",
        f"mean EIF: {res.mean_eif:.6f}",
        f"standard error: {res.se:.6f}",
        f"z: {res.z_score:.2f}",
        f"verdict: {verdict} (|mean| {'<=' if res.passes else '>'} 3 SE; expected {expected})",
    ]
    _write("\n".join(lines), args.output)
    return EXIT_OK if verdict == expected else EXIT_ESTIMATION


COMMANDS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "mc-study": cmd_mc_study,
    "probe": cmd_probe,
}


def _error(kind: str, message: str, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, hyper = _apply_config(parser, argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args, hyper)
    except UsageError as exc:
        _error("UsageError", str(exc))
        return EXIT_USAGE
    except DataError as exc:
        _error("DataError", str(exc), row=exc.row, column=exc.column)
        return EXIT_DATA
    except NuisanceError as exc:
        _error("NuisanceError", str(exc), cell=exc.cell, fold=exc.fold)
        return EXIT_ESTIMATION
    except (MqivError, ValueError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
