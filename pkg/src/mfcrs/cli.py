"""
Command-line entry point.

Exit status is 0 when every check passes, 2 when a check fails and 1 on
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import suites
from .control import FeedbackControl
from .experiments import ConfigError, ExperimentConfig, load_config, meanfield_control, nagent_control, run_poc, run_value_convergence
from .measure_metric import DiscreteMeasure, build_basis, dhat, make_weights, metric_d
from .model import validate_assumptions
from .simulate import simulate_nagent

log = logging.getLogger("mfcrs")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="config path or shipped config name")
    p.add_argument("--seed", type=_u64, help="override the config seed")
    p.add_argument("--out", help="output directory (default: the config's)")
    p.add_argument("--threads", type=_positive, help="worker threads")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfcrs", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="assumption report for the configured model")
    _common(p)
    p.add_argument("--samples", type=_positive, default=2000)

    p = sub.add_parser("simulate", help="dump one N-agent trajectory")
    _common(p)
    p.add_argument("--N", type=_positive, help="particle count (default: first of the sweep)")
    p.add_argument("--control", help="control JSON file (default: zero control)")

    p = sub.add_parser("metric", help="d and d-hat between two measure files")
    p.add_argument("--a", required=True, help="measure JSON file")
    p.add_argument("--b", required=True, help="measure JSON file")
    p.add_argument("--degree", type=_positive, default=6)
    p.add_argument("--bound", type=float, default=10.0, help="radius b of the measure class")
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("hjb-check", help="HJB residual, Ito, projection-derivative and remainder suites")
    _common(p)

    p = sub.add_parser("optimize", help="search the configured control class")
    _common(p)
    p.add_argument("--N", type=_positive, help="particle count (default: first of the sweep)")
    p.add_argument("--meanfield", action="store_true", help="optimise the mean-field proxy instead")

    for name, text in (("convergence", "value-gap convergence sweep"), ("poc", "propagation-of-chaos sweep")):
        p = sub.add_parser(name, help=text)
        _common(p)

    p = sub.add_parser("all", help="full acceptance run")
    _common(p, config=False)
    p.add_argument("--reduced", action="store_true", help="smaller experiment budgets (not the acceptance setting)")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        kw["threads"] = args.threads
    if args.out is not None:
        kw["out"] = args.out
    return replace(cfg, **kw) if kw else cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _line(report) -> str:
    return f"{report.check_name}: {'PASS' if report.passed else 'FAIL'} (statistic {report.statistic:.6g}, tolerance {report.tolerance:.6g})"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = _load(args)
    report = validate_assumptions(cfg.spec(), n_samples=args.samples, seed=cfg.seed)
    _write_json(Path(cfg.out) / "validate.json", report.to_dict())
    print(json.dumps(report.to_dict(), indent=2, default=_jsonable))
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg = _load(args)
    spec = cfg.spec()
    N = args.N or cfg.N_sweep[0]
    control = FeedbackControl.from_json(Path(args.control).read_text()) if args.control else cfg.template(spec)
    sim = cfg.sim(N=min(N, cfg.n_mf), mc_reps=1)
    rec = simulate_nagent(cfg.t0, cfg.initial_law(), cfg.i0, control, spec, sim, Q=cfg.generator())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rec.to_csv(out / "trajectory.csv", rep=0)
    print(f"cost {rec.cost[0]:.10g}; trajectory written to {out / 'trajectory.csv'}")
    return EXIT_OK


def cmd_metric(args) -> int:
    try:
        a = DiscreteMeasure.from_dict(json.loads(Path(args.a).read_text()))
        b = DiscreteMeasure.from_dict(json.loads(Path(args.b).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read measure: {exc}") from None
    basis = build_basis(args.degree, [0.0] * args.degree)
    w = make_weights(basis, args.bound, args.delta)
    print(f"d={metric_d(a, b, basis, w):.17g}")
    print(f"dhat={dhat(a, b, basis, w):.17g}")
    return EXIT_OK


def _hjb_reports(cfg: ExperimentConfig) -> list:
    h = cfg.hjb
    reports = [suites.calculus_suite(seed=cfg.seed)]
    params = cfg.model.get("params", {})
    linear = cfg.model["name"] == "constant" and float(params.get("h_linear", 0.0)) == 1.0 and not any(
        params.get(k) for k in ("sigma", "lam", "f", "h", "control_gain")
    )
    if linear:
        b = params.get("b", 0.0)
        b = list(b) if isinstance(b, list) else [b] * cfg.n_regimes
        reports.append(suites.hjb_residual_suite(b, cfg.Q, float(params.get("T", 1.0)), seed=cfg.seed, n_points=int(h.get("points", 100)), eps=float(h.get("eps", 1e-3))))
    else:
        log.warning("HJB residual suite needs the control-free linear model; skipped")
    reports.append(suites.ito_suite(seed=cfg.seed, reps=int(h.get("ito_reps", 10_000)), dt=float(h.get("ito_dt", 1e-3))))
    reports.append(suites.remainder_suite(seed=cfg.seed))
    return reports


def cmd_hjb_check(args) -> int:
    cfg = _load(args)
    reports = _hjb_reports(cfg)
    _write_json(Path(cfg.out) / "hjb_checks.json", [r.to_dict() for r in reports])
    for r in reports:
        print(_line(r))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_optimize(args) -> int:
    cfg = _load(args)
    spec = cfg.spec()
    if args.meanfield:
        control, name = meanfield_control(cfg, spec, log.info), "meanfield"
    else:
        N = args.N or cfg.N_sweep[0]
        if N > cfg.n_mf:
            raise ConfigError("N exceeds n_mf")
        control, name = nagent_control(cfg, spec, N, log.info).control, f"nagent_{N}"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"control_{name}.json").write_text(control.to_json() + "\n")
    print(control.to_json())
    return EXIT_OK


def _experiment(args, runner) -> int:
    cfg = _load(args)
    res = runner(cfg, log.info)
    csv_path, json_path = res.write(cfg.out)
    for f in res.fits:
        d = f.to_dict()
        slope = "n/a" if d["slope"] is None else f"{d['slope']:.4f} +- {d['half_width']:.4f}"
        print(f"{d['experiment']}/{d['statistic']}: slope {slope}, interval {d['interval']}: {'PASS' if d['pass'] else 'FAIL'}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_convergence(args) -> int:
    return _experiment(args, run_value_convergence)


def cmd_poc(args) -> int:
    return _experiment(args, run_poc)


def acceptance_reports(seed: int = 0, threads: int = 2, reduced: bool = False, log_fn=None):
    """Yield ``(criterion, report)`` for the full acceptance run."""
    yield 1, suites.metric_suite(seed=seed)
    yield 2, suites.weight_suite()
    yield 3, suites.ctmc_suite(seed=seed)
    yield 4, suites.calculus_suite(seed=seed)
    lin = load_config("linear")
    p = lin.model["params"]
    yield 5, suites.hjb_residual_suite(p["b"], lin.Q, p["T"], seed=seed)
    yield 6, suites.ito_suite(seed=seed)
    yield 7, suites.remainder_suite(seed=seed)
    yield 8, suites.dpp_suite(seed=seed)
    lq = replace(load_config("lq_regime"), seed=seed)
    mr = replace(load_config("linear_mean_reverting"), seed=seed)
    if reduced:
        lq, mr = suites.reduced(lq, reps=400, n_mf=2560), suites.reduced(mr, reps=200, n_mf=2560)
    yield 9, suites.convergence_suite(lq, log_fn)[0]
    yield 10, suites.poc_suite(mr, log_fn)[0]
    yield 11, suites.determinism_suite([suites.reduced(lq), suites.reduced(mr)], threads=threads)


def cmd_all(args) -> int:
    out = Path(args.out or "results/acceptance")
    seed = args.seed if args.seed is not None else 0
    results = []
    for k, report in acceptance_reports(seed, args.threads or 2, args.reduced, log.info):
        print(f"criterion {k:2d} {_line(report)}", flush=True)
        results.append({"criterion": k, **report.to_dict()})
    _write_json(out / "acceptance.json", results)
    return EXIT_OK if all(r["pass"] for r in results) else EXIT_FAIL


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "metric": cmd_metric,
    "hjb-check": cmd_hjb_check,
    "optimize": cmd_optimize,
    "convergence": cmd_convergence,
    "poc": cmd_poc,
    "all": cmd_all,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"mfcrs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
