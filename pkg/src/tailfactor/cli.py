"""Command-line front end.

Subcommands: simulate, evt, fit, validate, select, eot, bench.  Results go
to the output path (atomically, temp file + rename) or stdout; diagnostics
go to stderr.  Exit codes: 0 success, 2 argument/config errors, 3 data
errors, 4 numerical infeasibility, 1 internal errors.

Option values resolve as: command-line flag, then a ``--config`` JSON file
of per-flag defaults (unknown keys rejected), then built-in defaults.  The
``bench`` subcommand instead takes the full experiment definition as its
``--config`` file.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile

from . import __version__
from .bench import ExperimentConfig, run_experiment
from .dgp import DgpSpec, generate
from .eot import ThresholdModelKind, load_covariates, run_eot
from .evt import evt_report, hill_plot_data
from .exceptions import ArgumentError, DataError, InfeasibleError, TailFactorError
from .ftvm import FitOptions, fit_ftvm
from .panel import PanelData, TailConfig, load_panel, save_panel, save_result
from .selection import ALPHA_LEVELS, ic_select, ks_report

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4

_THRESHOLD_ALIASES = {"constant": "constant", "qfm": "qfm", "qr": "per_unit_qr"}


def _atomic_write(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tailfactor-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(payload: str, output: str | None) -> None:
    if output is None or output == "-":
        sys.stdout.write(payload)
    else:
        _atomic_write(output, payload)


def _emit_json(doc: dict, output: str | None) -> None:
    _emit(json.dumps(doc, indent=2) + "\n", output)


def _load_config_defaults(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ArgumentError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ArgumentError(f"config file {path} must hold a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ArgumentError(
            f"unknown config keys in {path}: {sorted(unknown)} (allowed: {sorted(allowed)})"
        )
    return doc


def _resolve(args, config: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _resolve_k(args, config: dict, n_cells: int) -> int:
    k = _resolve(args, config, "k", None)
    k_frac = _resolve(args, config, "k_frac", None)
    if k is not None and k_frac is not None:
        raise ArgumentError("give either --k or --k-frac, not both")
    if k is not None:
        return int(k)
    if k_frac is not None:
        return max(2, round(float(k_frac) * n_cells))
    return max(2, round(0.1 * n_cells))


def _read_panel(path: str, fmt: str) -> PanelData:
    if fmt == "auto":
        fmt = "json" if path.endswith(".json") else "wide-csv"
    try:
        with open(path, "rb") as handle:
            return load_panel(handle, fmt)
    except OSError as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from exc


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, int(args.threads))
    env = os.environ.get("TAILFACTOR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ArgumentError(f"TAILFACTOR_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _add_panel_arg(sub):
    sub.add_argument("panel", help="panel file (wide-csv by default, .json for JSON)")
    sub.add_argument("--format", default="auto", choices=["auto", "wide-csv", "long-csv", "json"],
                     help="panel file format (default: by extension)")


def _add_common(sub, keys):
    sub.add_argument("--config", default=None, help="JSON file of default option values")
    if "k" in keys:
        sub.add_argument("--k", type=int, default=None, help="intermediate order k")
        sub.add_argument("--k-frac", dest="k_frac", type=float, default=None,
                         help="k as a fraction of N*T (default 0.1 when --k absent)")
    if "bounds" in keys:
        sub.add_argument("--m", type=float, default=None, help="lower volatility bound (default 0.1)")
        sub.add_argument("--M", type=float, default=None, help="upper volatility bound (default 1.6)")
    if "p" in keys:
        sub.add_argument("--p", type=float, default=None, help="extreme tail level")
    if "fitopts" in keys:
        sub.add_argument("--seed", type=int, default=None, help="optimizer seed (default 0)")
        sub.add_argument("--restarts", type=int, default=None, help="restart count (default 5)")
        sub.add_argument("--max-iters", dest="max_iters", type=int, default=None,
                         help="max outer iterations (default 100)")
        sub.add_argument("--tol", type=float, default=None,
                         help="relative objective tolerance (default 1e-6)")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: TAILFACTOR_THREADS or available cores)")


_CONFIG_KEYS = {
    "simulate": {"dgp", "N", "T", "lam", "seed", "format"},
    "evt": {"k", "k_frac", "p", "format"},
    "fit": {"r", "k", "k_frac", "m", "M", "p", "seed", "restarts", "max_iters", "tol", "format"},
    "validate": {"k", "k_frac", "alpha", "format"},
    "select": {"k", "k_frac", "rmax", "c", "m", "M", "seed", "restarts", "format"},
    "eot": {"threshold", "tau_star", "k", "k_frac", "p", "alpha", "m", "M",
            "r_thr", "rmax", "c", "seed", "restarts", "format"},
    "bench": set(),
}


def _fit_options(args, config) -> FitOptions:
    return FitOptions(
        max_outer_iters=int(_resolve(args, config, "max_iters", 100)),
        loss_rel_tol=float(_resolve(args, config, "tol", 1e-6)),
        seed=int(_resolve(args, config, "seed", 0)),
        n_restarts=int(_resolve(args, config, "restarts", 5)),
    )


def _cmd_simulate(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["simulate"])
    spec = DgpSpec(
        dgp=int(_resolve(args, config, "dgp", 1)),
        N=int(_resolve(args, config, "N", 50)),
        T=int(_resolve(args, config, "T", 50)),
        lam=float(_resolve(args, config, "lam", 2.0)),
        seed=int(_resolve(args, config, "seed", 0)),
    )
    sample = generate(spec)
    fmt = _resolve(args, config, "format", None) or (
        "json" if args.output and args.output.endswith(".json") else "wide-csv"
    )
    buffer = io.StringIO()
    save_panel(sample.panel, buffer, fmt if fmt != "auto" else "wide-csv")
    _emit(buffer.getvalue(), args.output)
    if args.truth:
        doc = {
            "schema_version": 1,
            "kind": "dgp_truth",
            "dgp": spec.dgp, "N": spec.N, "T": spec.T, "lambda": spec.lam, "seed": spec.seed,
            "true_loadings": [list(r) for r in sample.true_loadings.tolist()],
            "true_factors": [list(r) for r in sample.true_factors.tolist()],
            "c_ref_sample": sample.c_ref,
        }
        if sample.true_threshold is not None:
            doc["true_threshold"] = [list(r) for r in sample.true_threshold.tolist()]
        if sample.covariates is not None:
            doc["covariates"] = sample.covariates.tolist()
        _emit_json(doc, args.truth)
    return EXIT_OK


def _cmd_evt(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["evt"])
    panel = _read_panel(args.panel, _resolve(args, config, "format", "auto"))
    k = _resolve_k(args, config, panel.n_cells)
    cfg = TailConfig(k=k, p=_resolve(args, config, "p", None))
    doc = evt_report(panel, cfg)
    if args.hill_plot:
        rows = hill_plot_data(panel.values.reshape(-1))
        payload = "k,gamma_hat\n" + "".join(f"{int(k_)},{g!r}\n" for k_, g in rows)
        _atomic_write(args.hill_plot, payload)
        print(f"wrote Hill plot data to {args.hill_plot}", file=sys.stderr)
    _emit_json(doc, args.output)
    return EXIT_OK


def _cmd_fit(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["fit"])
    panel = _read_panel(args.panel, _resolve(args, config, "format", "auto"))
    cfg = TailConfig(
        k=_resolve_k(args, config, panel.n_cells),
        m=float(_resolve(args, config, "m", 0.1)),
        M=float(_resolve(args, config, "M", 1.6)),
        p=_resolve(args, config, "p", None),
    )
    result = fit_ftvm(panel, int(_resolve(args, config, "r", 1)), cfg, _fit_options(args, config))
    buffer = io.StringIO()
    save_result(result, buffer)
    _emit(buffer.getvalue(), args.output)
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["validate"])
    panel = _read_panel(args.panel, _resolve(args, config, "format", "auto"))
    alpha = float(_resolve(args, config, "alpha", 0.05))
    if alpha not in ALPHA_LEVELS:
        raise ArgumentError(f"alpha must be one of {ALPHA_LEVELS}, got {alpha}")
    report = ks_report(panel, _resolve_k(args, config, panel.n_cells))
    doc = report.to_json_dict()
    doc["alpha"] = alpha
    doc["degenerate_model_rejected"] = bool(report.reject_at[alpha])
    _emit_json(doc, args.output)
    return EXIT_OK


def _cmd_select(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["select"])
    panel = _read_panel(args.panel, _resolve(args, config, "format", "auto"))
    cfg = TailConfig(
        k=_resolve_k(args, config, panel.n_cells),
        m=float(_resolve(args, config, "m", 0.1)),
        M=float(_resolve(args, config, "M", 1.6)),
        c_ic=float(_resolve(args, config, "c", 10.0)),
        r_max=int(_resolve(args, config, "rmax", 3)),
    )
    report = ic_select(panel, cfg, _fit_options(args, config))
    _emit_json(report.to_json_dict(), args.output)
    return EXIT_OK


def _cmd_eot(args) -> int:
    config = _load_config_defaults(args.config, _CONFIG_KEYS["eot"])
    panel = _read_panel(args.panel, _resolve(args, config, "format", "auto"))
    threshold = _resolve(args, config, "threshold", "constant")
    if threshold not in _THRESHOLD_ALIASES:
        raise ArgumentError(
            f"--threshold must be one of {sorted(_THRESHOLD_ALIASES)}, got {threshold!r}"
        )
    p = _resolve(args, config, "p", None)
    if p is None:
        raise ArgumentError("eot requires an extreme level --p")
    cfg = TailConfig(
        k=_resolve_k(args, config, panel.n_cells),
        m=float(_resolve(args, config, "m", 0.1)),
        M=float(_resolve(args, config, "M", 1.6)),
        p=float(p),
        tau_star=float(_resolve(args, config, "tau_star", 0.5)),
        c_ic=float(_resolve(args, config, "c", 10.0)),
        r_max=int(_resolve(args, config, "rmax", 3)),
    )
    covariates = None
    if args.covariates:
        try:
            with open(args.covariates, "rb") as handle:
                covariates = load_covariates(handle, panel)
        except OSError as exc:
            raise DataError(f"cannot read covariates {args.covariates}: {exc}") from exc
    result = run_eot(
        panel,
        covariates,
        ThresholdModelKind(_THRESHOLD_ALIASES[threshold], int(_resolve(args, config, "r_thr", 1))),
        cfg,
        alpha=float(_resolve(args, config, "alpha", 0.05)),
        opts=_fit_options(args, config),
        force_degenerate=bool(args.force_degenerate),
        force_r=args.force_r,
    )
    buffer = io.StringIO()
    save_result(result, buffer)
    _emit(buffer.getvalue(), args.output)
    return EXIT_OK


def _cmd_bench(args) -> int:
    try:
        with open(args.exp_config, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ArgumentError(f"cannot read experiment config {args.exp_config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"experiment config is not valid JSON: {exc}") from exc
    config = ExperimentConfig.from_json_dict(doc)
    report = run_experiment(config, threads=_threads(args))
    _emit_json(report.to_json_dict(), args.output)
    if args.table:
        _atomic_write(args.table, report.format_table())
        print(f"wrote table to {args.table}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailfactor",
        description="Tail quantile factor models for heavy-tailed panels",
    )
    parser.add_argument("--version", action="version", version=f"tailfactor {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="draw a panel from DGP 1-5")
    sim.add_argument("--dgp", type=int, default=None, choices=[1, 2, 3, 4, 5], help="generator (default 1)")
    sim.add_argument("--N", type=int, default=None, help="units (default 50)")
    sim.add_argument("--T", type=int, default=None, help="periods (default 50)")
    sim.add_argument("--lambda", dest="lam", type=float, default=None,
                     help="tail shape lambda, gamma = 1/lambda (default 2)")
    sim.add_argument("--seed", type=int, default=None, help="generator seed (default 0)")
    sim.add_argument("-o", "--output", default=None, help="panel output path (default stdout)")
    sim.add_argument("--truth", default=None, help="also write ground truth JSON here")
    sim.add_argument("--out-format", dest="format", default=None,
                     choices=["wide-csv", "long-csv", "json"], help="panel output format")
    sim.add_argument("--config", default=None, help="JSON file of default option values")
    sim.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    sim.set_defaults(func=_cmd_simulate)

    evt = commands.add_parser("evt", help="pooled tail estimates (order statistic, Hill, Weissman)")
    _add_panel_arg(evt)
    _add_common(evt, {"k", "p"})
    evt.add_argument("--hill-plot", default=None, help="write Hill plot data (k,gamma) CSV here")
    evt.add_argument("-o", "--output", default=None, help="output path (default stdout)")
    evt.set_defaults(func=_cmd_evt)

    fit = commands.add_parser("fit", help="fit the constrained tail volatility factorization")
    _add_panel_arg(fit)
    fit.add_argument("--r", type=int, default=None, help="factor count (default 1)")
    _add_common(fit, {"k", "bounds", "p", "fitopts"})
    fit.add_argument("-o", "--output", default=None, help="result JSON path (default stdout)")
    fit.set_defaults(func=_cmd_fit)

    val = commands.add_parser("validate", help="KS test of the degenerate model")
    _add_panel_arg(val)
    _add_common(val, {"k"})
    val.add_argument("--alpha", type=float, default=None, choices=list(ALPHA_LEVELS),
                     help="test level (default 0.05)")
    val.add_argument("-o", "--output", default=None, help="output path (default stdout)")
    val.set_defaults(func=_cmd_validate)

    sel = commands.add_parser("select", help="information-criterion factor count selection")
    _add_panel_arg(sel)
    _add_common(sel, {"k", "bounds", "fitopts"})
    sel.add_argument("--rmax", type=int, default=None, help="largest candidate r (default 3)")
    sel.add_argument("--c", type=float, default=None, help="penalty constant (default 10)")
    sel.add_argument("-o", "--output", default=None, help="output path (default stdout)")
    sel.set_defaults(func=_cmd_select)

    eot = commands.add_parser("eot", help="excess-over-threshold pipeline")
    _add_panel_arg(eot)
    eot.add_argument("--threshold", default=None, choices=sorted(_THRESHOLD_ALIASES),
                     help="central threshold model (default constant)")
    eot.add_argument("--tau-star", dest="tau_star", type=float, default=None,
                     help="central tail level (default 0.5)")
    _add_common(eot, {"k", "bounds", "p", "fitopts"})
    eot.add_argument("--alpha", type=float, default=None, choices=list(ALPHA_LEVELS),
                     help="validation level (default 0.05)")
    eot.add_argument("--r-thr", dest="r_thr", type=int, default=None,
                     help="qfm threshold factor count (default 1)")
    eot.add_argument("--rmax", type=int, default=None, help="largest candidate r (default 3)")
    eot.add_argument("--c", type=float, default=None, help="penalty constant (default 10)")
    eot.add_argument("--covariates", default=None, help="covariate CSV for the qr threshold")
    force = eot.add_mutually_exclusive_group()
    force.add_argument("--force-degenerate", action="store_true",
                       help="skip validation and use the degenerate excess model")
    force.add_argument("--force-r", type=int, default=None,
                       help="skip validation and fix the excess factor count")
    eot.add_argument("-o", "--output", default=None, help="result JSON path (default stdout)")
    eot.set_defaults(func=_cmd_eot)

    bench = commands.add_parser("bench", help="run a replication experiment grid")
    bench.add_argument("--config", dest="exp_config", required=True,
                       help="experiment definition JSON")
    bench.add_argument("-o", "--output", default=None, help="report JSON path (default stdout)")
    bench.add_argument("--table", default=None, help="also write an aligned text table here")
    bench.add_argument("--threads", type=int, default=None,
                       help="parallel replications (default: TAILFACTOR_THREADS or cores)")
    bench.set_defaults(func=_cmd_bench)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    """Parse arguments and run the selected subcommand, mapping errors to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"tailfactor: argument error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except DataError as exc:
        print(f"tailfactor: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleError as exc:
        print(f"tailfactor: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TailFactorError as exc:
        print(f"tailfactor: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"tailfactor: i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # last resort: keep the exit-code contract
        print(f"tailfactor: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
