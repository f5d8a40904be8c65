"""Replication harness: run model grids over seeded replications and
aggregate mean squared relative errors, rejection frequencies, and factor
selection statistics into machine- and human-readable reports.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_key
from .dgp import DgpSpec, generate, reference_constant
from .eot import ThresholdModelKind, _irls_quantile_regression, fit_additive_qfm, run_eot
from .evt import tail_estimates, weissman_extrapolate
from .exceptions import ArgumentError, TailFactorError
from .ftvm import FitOptions, fit_ftvm, predict_quantiles
from .metrics import TruthBundle, msre_surface
from .panel import TailConfig
from .selection import ic_select, ks_report

MODEL_KINDS = ("degenerate", "ftvm", "qfm", "qrife", "eotm0", "eotm1")

__all__ = ["ModelSpec", "ExperimentConfig", "ExperimentReport", "run_experiment"]


@dataclass(frozen=True)
class ModelSpec:
    """One entry of the model grid.

    ``r`` is the factor count for ftvm/qfm (and the forced excess factor
    count for eotm1); ``threshold`` overrides the excess-over-threshold
    central model ("constant", "qfm", "per_unit_qr"), which otherwise
    defaults by generator (qfm for DGP4, per-unit regression for DGP5,
    pooled constant elsewhere).
    """

    kind: str
    r: int = 1
    threshold: str | None = None
    r_thr: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ArgumentError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.r < 1 or self.r_thr < 1:
            raise ArgumentError(f"model factor counts must be >= 1, got r={self.r}, r_thr={self.r_thr}")

    @property
    def label(self) -> str:
        if self.kind in ("ftvm", "qfm"):
            return f"{self.kind}(r={self.r})"
        return self.kind

    @classmethod
    def parse(cls, raw) -> "ModelSpec":
        if isinstance(raw, ModelSpec):
            return raw
        if isinstance(raw, str):
            return cls(kind=raw)
        if isinstance(raw, dict):
            known = {"kind", "r", "threshold", "r_thr"}
            unknown = set(raw) - known
            if unknown:
                raise ArgumentError(f"unknown model spec keys: {sorted(unknown)}")
            return cls(**raw)
        raise ArgumentError(f"cannot parse model spec from {raw!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid definition: generator, tail constants, models, levels, replications."""

    dgp_spec: DgpSpec
    cfg: TailConfig
    model_grid: tuple
    reps: int
    quantile_levels: tuple = ("intermediate",)
    validate: bool = False
    select: bool = False
    alpha: float = 0.05
    c_ref_reps: int = 200
    opts: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.reps < 1:
            raise ArgumentError(f"reps must be >= 1, got {self.reps}")
        grid = tuple(ModelSpec.parse(m) for m in self.model_grid)
        if not grid:
            raise ArgumentError("model_grid must not be empty")
        object.__setattr__(self, "model_grid", grid)
        levels = []
        for level in self.quantile_levels:
            if level == "intermediate":
                levels.append("intermediate")
            else:
                p = float(level)
                if not p > 0:
                    raise ArgumentError(f"extreme level must be positive, got {level!r}")
                levels.append(p)
        object.__setattr__(self, "quantile_levels", tuple(levels))

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {
            "dgp_spec", "cfg", "model_grid", "reps", "quantile_levels",
            "validate", "select", "alpha", "c_ref_reps", "opts",
        }
        unknown = set(doc) - known
        if unknown:
            raise ArgumentError(f"unknown experiment config keys: {sorted(unknown)}")
        dgp_doc = dict(doc["dgp_spec"])
        if "lambda" in dgp_doc:
            dgp_doc["lam"] = dgp_doc.pop("lambda")
        return cls(
            dgp_spec=DgpSpec(**dgp_doc),
            cfg=TailConfig(**doc["cfg"]),
            model_grid=tuple(doc["model_grid"]),
            reps=int(doc["reps"]),
            quantile_levels=tuple(doc.get("quantile_levels", ("intermediate",))),
            validate=bool(doc.get("validate", False)),
            select=bool(doc.get("select", False)),
            alpha=float(doc.get("alpha", 0.05)),
            c_ref_reps=int(doc.get("c_ref_reps", 200)),
            opts=FitOptions(**doc.get("opts", {})),
        )

    def to_json_dict(self) -> dict:
        return {
            "dgp_spec": {
                "dgp": self.dgp_spec.dgp,
                "N": self.dgp_spec.N,
                "T": self.dgp_spec.T,
                "lambda": self.dgp_spec.lam,
                "seed": self.dgp_spec.seed,
            },
            "cfg": {
                "k": self.cfg.k, "m": self.cfg.m, "M": self.cfg.M, "p": self.cfg.p,
                "tau_star": self.cfg.tau_star, "c_ic": self.cfg.c_ic, "r_max": self.cfg.r_max,
            },
            "model_grid": [
                {"kind": m.kind, "r": m.r, "threshold": m.threshold, "r_thr": m.r_thr}
                for m in self.model_grid
            ],
            "reps": self.reps,
            "quantile_levels": list(self.quantile_levels),
            "validate": self.validate,
            "select": self.select,
            "alpha": self.alpha,
            "c_ref_reps": self.c_ref_reps,
            "opts": {
                "max_outer_iters": self.opts.max_outer_iters,
                "loss_rel_tol": self.opts.loss_rel_tol,
                "inner_grid": self.opts.inner_grid,
                "seed": self.opts.seed,
                "n_restarts": self.opts.n_restarts,
            },
        }


def _level_label(level) -> str:
    return "intermediate" if level == "intermediate" else f"extreme@{level:g}"


def _default_threshold(dgp: int) -> ThresholdModelKind:
    if dgp == 4:
        return ThresholdModelKind("qfm", r_thr=1)
    if dgp == 5:
        return ThresholdModelKind("per_unit_qr")
    return ThresholdModelKind("constant")


def _eot_surfaces(result, level, tau_grid_p):
    """Intermediate/extreme surfaces of an EoT result at the requested level."""
    if level == "intermediate":
        return result.intermediate_surface
    factor = (result.k / (tau_grid_p * result.intermediate_surface.size)) ** result.gamma_adj
    return result.threshold_surface + (
        result.intermediate_surface - result.threshold_surface
    ) * factor


def _evaluate_model(model: ModelSpec, sample, truth, config: ExperimentConfig):
    """Surfaces for every requested level, keyed by level label."""
    panel = sample.panel
    cfg = config.cfg
    opts = config.opts
    n_cells = panel.n_cells
    tau_int = cfg.intermediate_tau(n_cells)
    surfaces = {}

    if model.kind == "degenerate":
        tail = tail_estimates(panel, cfg.k)
        for level in config.quantile_levels:
            if level == "intermediate":
                value = tail.u_intermediate
            else:
                value = weissman_extrapolate(tail.u_intermediate, tail.gamma_hat, cfg.k, n_cells, level)
            surfaces[_level_label(level)] = np.full(panel.values.shape, value)
    elif model.kind == "ftvm":
        fit = fit_ftvm(panel, model.r, cfg, opts)
        for level in config.quantile_levels:
            if level == "intermediate":
                surfaces["intermediate"] = predict_quantiles(fit, "intermediate")
            else:
                surfaces[_level_label(level)] = predict_quantiles(fit, "extreme", p=level)
    elif model.kind == "qfm":
        for level in config.quantile_levels:
            tau = tau_int if level == "intermediate" else level
            L, F = fit_additive_qfm(panel.values, model.r, tau, opts)
            surfaces[_level_label(level)] = L.T @ F
    elif model.kind == "qrife":
        if sample.covariates is None:
            raise ArgumentError("qrife benchmark requires a generator with covariates (DGP5)")
        for level in config.quantile_levels:
            tau = tau_int if level == "intermediate" else level
            est = np.empty(panel.values.shape)
            for i in range(panel.n_units):
                b = _irls_quantile_regression(panel.values[i], sample.covariates[i], tau)
                est[i] = sample.covariates[i] @ b
            surfaces[_level_label(level)] = est
    else:  # eotm0 / eotm1
        kind = (
            ThresholdModelKind(model.threshold, model.r_thr)
            if model.threshold is not None
            else _default_threshold(sample.spec.dgp)
        )
        eot_cfg = cfg if cfg.p is not None else replace(cfg, p=tau_int / 100.0)
        result = run_eot(
            panel,
            sample.covariates,
            kind,
            eot_cfg,
            alpha=config.alpha,
            opts=opts,
            force_degenerate=model.kind == "eotm0",
            force_r=model.r if model.kind == "eotm1" else None,
        )
        for level in config.quantile_levels:
            if level == "intermediate":
                surfaces["intermediate"] = result.intermediate_surface
            else:
                surfaces[_level_label(level)] = _eot_surfaces(result, level, level)
    return surfaces


def _run_replication(config: ExperimentConfig, rep: int, c_ref: float) -> dict:
    spec = replace(config.dgp_spec, seed=derive_key(config.dgp_spec.seed, "rep", rep) % 2**63)
    sample = generate(spec)
    truth = TruthBundle.from_sample(sample, c_ref=c_ref)
    n_cells = sample.panel.n_cells
    tau_int = config.cfg.intermediate_tau(n_cells)
    out = {"rep": rep, "msre": {}, "runtime": {}, "failures": [], "reject": None, "r_hat": None}
    for model in config.model_grid:
        start = time.perf_counter()
        try:
            surfaces = _evaluate_model(model, sample, truth, config)
            scores = {}
            for level in config.quantile_levels:
                tau = tau_int if level == "intermediate" else level
                scores[_level_label(level)] = msre_surface(
                    surfaces[_level_label(level)], truth, tau
                )
            out["msre"][model.label] = scores
        except TailFactorError as exc:
            out["failures"].append((model.label, str(exc)))
        out["runtime"][model.label] = time.perf_counter() - start
    if config.validate:
        out["reject"] = bool(ks_report(sample.panel, config.cfg.k).reject_at[config.alpha])
    if config.select:
        out["r_hat"] = ic_select(sample.panel, config.cfg, config.opts).r_hat
    return out


@dataclass
class ExperimentReport:
    """Aggregated results of one experiment grid."""

    config: ExperimentConfig
    c_ref: float
    c_ref_se: float
    msre: dict
    rejection_frequency: float | None
    mean_r_hat: float | None
    selection_frequency: float | None
    runtime: dict
    failures: list
    reps_completed: int

    def to_json_dict(self) -> dict:
        return {
            "kind": "experiment_report",
            "config": self.config.to_json_dict(),
            "c_ref": self.c_ref,
            "c_ref_se": self.c_ref_se,
            "msre": self.msre,
            "rejection_frequency": self.rejection_frequency,
            "mean_r_hat": self.mean_r_hat,
            "selection_frequency": self.selection_frequency,
            "runtime_seconds": self.runtime,
            "failures": [
                {"rep": rep, "model": label, "error": msg} for rep, label, msg in self.failures
            ],
            "reps_completed": self.reps_completed,
        }

    def format_table(self) -> str:
        """Aligned text table of mean MSREs (x 1e3) per model and level."""
        levels = [_level_label(level) for level in self.config.quantile_levels]
        width = max(18, *(len(m.label) for m in self.config.model_grid)) + 2
        header = "model".ljust(width) + "".join(f"{lvl:>24}" for lvl in levels)
        lines = [
            f"DGP{self.config.dgp_spec.dgp}  lambda={self.config.dgp_spec.lam:g}  "
            f"(N,T)=({self.config.dgp_spec.N},{self.config.dgp_spec.T})  "
            f"k={self.config.cfg.k}  reps={self.reps_completed}  c={self.c_ref:.4f}",
            "mean MSRE x 1e-3 (MC standard error)",
            header,
            "-" * len(header),
        ]
        for model in self.config.model_grid:
            row = model.label.ljust(width)
            stats = self.msre.get(model.label, {})
            for lvl in levels:
                cell = stats.get(lvl)
                if cell is None or cell["n"] == 0:
                    row += f"{'-':>24}"
                else:
                    row += f"{1e3 * cell['mean']:>15.2f} ({1e3 * cell['se']:.2f})"
            lines.append(row)
        if self.rejection_frequency is not None:
            lines.append(f"KS rejection frequency (alpha={self.config.alpha}): "
                         f"{100 * self.rejection_frequency:.1f}%")
        if self.mean_r_hat is not None:
            lines.append(
                f"mean r_hat: {self.mean_r_hat:.2f}   "
                f"P(r_hat = {self.config.dgp_spec.r_true}): "
                f"{100 * self.selection_frequency:.1f}%"
            )
        if self.failures:
            lines.append(f"failed model runs: {len(self.failures)} (see report JSON)")
        return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Run every replication of the grid and aggregate.

    Replications use seeds derived from (seed, replication index), so runs
    with more replications reproduce shorter runs as a prefix, and parallel
    execution (``threads > 1``) is bit-identical to serial.
    """
    ref = reference_constant(config.dgp_spec, config.c_ref_reps)
    reps = list(range(config.reps))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_replication, [config] * len(reps), reps, [ref.value] * len(reps)))
    else:
        rows = [_run_replication(config, rep, ref.value) for rep in reps]

    msre_stats: dict = {}
    runtime: dict = {}
    failures: list = []
    for row in rows:
        for label, scores in row["msre"].items():
            for lvl, value in scores.items():
                msre_stats.setdefault(label, {}).setdefault(lvl, []).append(value)
        for label, seconds in row["runtime"].items():
            runtime[label] = runtime.get(label, 0.0) + seconds
        for label, msg in row["failures"]:
            failures.append((row["rep"], label, msg))

    msre_out = {}
    for label, by_level in msre_stats.items():
        msre_out[label] = {}
        for lvl, values in by_level.items():
            arr = np.asarray(values)
            se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
            msre_out[label][lvl] = {"mean": float(arr.mean()), "se": se, "n": int(arr.size)}

    rejection = None
    if config.validate:
        flags = [row["reject"] for row in rows if row["reject"] is not None]
        rejection = float(np.mean(flags)) if flags else None
    mean_r_hat = None
    pe = None
    if config.select:
        r_hats = [row["r_hat"] for row in rows if row["r_hat"] is not None]
        if r_hats:
            mean_r_hat = float(np.mean(r_hats))
            pe = float(np.mean([r == config.dgp_spec.r_true for r in r_hats]))

    return ExperimentReport(
        config=config,
        c_ref=ref.value,
        c_ref_se=ref.standard_error,
        msre=msre_out,
        rejection_frequency=rejection,
        mean_r_hat=mean_r_hat,
        selection_frequency=pe,
        runtime={label: round(seconds, 3) for label, seconds in runtime.items()},
        failures=failures,
        reps_completed=len(rows),
    )
