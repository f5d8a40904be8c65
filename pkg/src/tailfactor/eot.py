"""Excess-over-threshold pipeline: central threshold model, adjusted tail
estimation on the excesses, validation, factor selection, and combined
quantile surfaces.

Three threshold models are supported at the central level ``tau_star``:

* ``constant``: the pooled empirical quantile, one number for every cell.
* ``qfm``: an additive (unconstrained) check-loss factorization.
* ``per_unit_qr``: a linear quantile regression per unit on supplied
  covariates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._qr_solvers import line_min, loss_sum
from .evt import hill, order_statistic_quantile, weissman_extrapolate
from .exceptions import ArgumentError, DataError, InfeasibleError, RankError
from .ftvm import FitOptions, _alternate, fit_ftvm
from .panel import PanelData, TailConfig
from .selection import ALPHA_LEVELS, KsReport, ic_select, ks_report

THRESHOLD_KINDS = ("constant", "qfm", "per_unit_qr")

__all__ = [
    "THRESHOLD_KINDS",
    "ThresholdModelKind",
    "EoTResult",
    "TailThresholdEot",
    "fit_threshold",
    "run_eot",
    "load_covariates",
]


@dataclass(frozen=True)
class ThresholdModelKind:
    """Choice of central-quantile model; qfm carries its factor count."""

    kind: str
    r_thr: int = 1

    def __post_init__(self):
        if self.kind not in THRESHOLD_KINDS:
            raise ArgumentError(f"threshold kind must be one of {THRESHOLD_KINDS}, got {self.kind!r}")
        if self.kind == "qfm" and self.r_thr < 1:
            raise ArgumentError(f"qfm threshold needs r_thr >= 1, got {self.r_thr}")


@dataclass(frozen=True)
class EoTResult:
    """Everything the pipeline produces, from threshold surface to extreme surface."""

    threshold_surface: np.ndarray
    excess_panel: np.ndarray
    u_adj: float
    gamma_adj: float
    ks_adj: KsReport
    r_selected: int
    intermediate_surface: np.ndarray
    extreme_surface: np.ndarray
    p: float
    k: int

    def to_json_dict(self) -> dict:
        as_rows = lambda m: [list(r) for r in np.asarray(m).tolist()]
        return {
            "kind": "eot_result",
            "threshold_surface": as_rows(self.threshold_surface),
            "excess_panel": as_rows(self.excess_panel),
            "u_adj": self.u_adj,
            "gamma_adj": self.gamma_adj,
            "ks_adj": self.ks_adj.to_json_dict(),
            "r_selected": self.r_selected,
            "intermediate_surface": as_rows(self.intermediate_surface),
            "extreme_surface": as_rows(self.extreme_surface),
            "p": self.p,
            "k": self.k,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EoTResult":
        arr = lambda key: np.asarray(doc[key], dtype=float)
        return cls(
            threshold_surface=arr("threshold_surface"),
            excess_panel=arr("excess_panel"),
            u_adj=float(doc["u_adj"]),
            gamma_adj=float(doc["gamma_adj"]),
            ks_adj=KsReport.from_json_dict(doc["ks_adj"]),
            r_selected=int(doc["r_selected"]),
            intermediate_surface=arr("intermediate_surface"),
            extreme_surface=arr("extreme_surface"),
            p=float(doc["p"]),
            k=int(doc["k"]),
        )


def fit_additive_qfm(
    values: np.ndarray, r_thr: int, tau: float, opts: FitOptions = FitOptions()
) -> tuple[np.ndarray, np.ndarray]:
    """Unconstrained additive check-loss factorization at level ``tau``.

    Same alternation skeleton as the constrained fit but with no box on the
    fitted values.  Two starts compete: per-unit quantiles against flat
    factors, and the rank-``r_thr`` SVD of the data.  The flat start matters
    under heavy tails, where a few extreme cells can dominate the SVD and
    strand the alternation in a poor basin.  Returns (loadings, factors).
    """
    n, t = values.shape
    if not 1 <= r_thr <= min(n, t):
        raise RankError(f"qfm factor count {r_thr} must satisfy 1 <= r <= min(N,T)={min(n, t)}")
    grid = np.arange(t)
    flat_F = np.ones((r_thr, t))
    for j in range(1, r_thr):
        flat_F[j] = 0.05 * np.cos((j + 1) * np.pi * grid / max(t - 1, 1))
    flat_L = np.zeros((r_thr, n))
    flat_L[0] = np.quantile(values, 1.0 - tau, axis=1)
    U, D, Vt = np.linalg.svd(values, full_matrices=False)
    svd_L = np.ascontiguousarray((U[:, :r_thr] * D[:r_thr]).T) / np.sqrt(t)
    svd_F = np.sqrt(t) * np.ascontiguousarray(Vt[:r_thr])
    best = None
    for L0, F0 in ((flat_L, flat_F), (svd_L, svd_F)):
        L, F, loss, _ = _alternate(values, L0, F0, tau, -np.inf, np.inf, opts)
        if best is None or loss < best[2]:
            best = (L, F, loss)
    return best[0], best[1]


def _irls_quantile_regression(
    y: np.ndarray, X: np.ndarray, tau: float, tol: float = 1e-8, max_iter: int = 200
) -> np.ndarray:
    """Linear quantile regression: reweighted least squares plus exact polish.

    Minimizes ``sum_t rho_tau(y_t - X_t @ b)``.  IRLS gets close quickly but
    creeps near the optimum, so rounds of exact coordinate line minimization
    finish the job; the result is within ``tol`` relative of the optimal loss
    for the small designs used here.
    """
    t_len, d = X.shape
    scale = max(1.0, float(np.abs(y).max()))
    delta = 1e-10 * scale
    ridge = 1e-12 * np.eye(d)
    b = np.linalg.lstsq(X, y, rcond=None)[0]
    best_b = b.copy()
    best_loss = loss_sum(y - X @ b, tau)
    prev_loss = np.inf
    for _ in range(max_iter):
        res = y - X @ b
        loss = loss_sum(res, tau)
        if loss < best_loss:
            best_loss = loss
            best_b = b.copy()
        if prev_loss - loss <= tol * max(prev_loss, 1e-300):
            break
        prev_loss = loss
        w = np.where(res > 0, 1.0 - tau, tau) / np.maximum(np.abs(res), delta)
        XtW = X.T * w
        b = np.linalg.solve(XtW @ X + ridge, XtW @ y)

    b = best_b
    loss = best_loss
    for _ in range(50):
        improved = False
        for j in range(d):
            col = X[:, j]
            nz = col != 0.0
            if not nz.any():
                continue
            partial = y - X @ b + b[j] * col
            v = line_min(partial[nz], col[nz], tau)
            candidate = b.copy()
            candidate[j] = v
            cand_loss = loss_sum(y - X @ candidate, tau)
            if cand_loss < loss - 1e-12 * max(loss, 1e-300):
                b, loss = candidate, cand_loss
                improved = True
        if not improved:
            break
    return b


def fit_threshold(
    panel: PanelData,
    covariates: np.ndarray | None,
    kind: ThresholdModelKind,
    tau_star: float,
    opts: FitOptions = FitOptions(),
) -> np.ndarray:
    """Fitted central-quantile surface at upper-tail level ``tau_star``."""
    if not 0.0 < tau_star < 1.0:
        raise ArgumentError(f"tau_star must lie in (0, 1), got {tau_star}")
    n, t = panel.values.shape
    if kind.kind == "constant":
        k_star = min(panel.n_cells, max(1, int(np.floor(tau_star * panel.n_cells))))
        value = order_statistic_quantile(panel.values.reshape(-1), k_star)
        return np.full((n, t), value)
    if kind.kind == "qfm":
        L, F = fit_additive_qfm(panel.values, kind.r_thr, tau_star, opts)
        return L.T @ F
    if covariates is None:
        raise ArgumentError("per_unit_qr threshold requires a covariate array")
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim != 3 or covariates.shape[:2] != (n, t):
        raise ArgumentError(
            f"covariates must have shape (N, T, d) = ({n}, {t}, d), got {covariates.shape}"
        )
    surface = np.empty((n, t))
    for i in range(n):
        b = _irls_quantile_regression(panel.values[i], covariates[i], tau_star)
        surface[i] = covariates[i] @ b
    return surface


def run_eot(
    panel: PanelData,
    covariates: np.ndarray | None,
    kind: ThresholdModelKind,
    cfg: TailConfig,
    alpha: float = 0.05,
    opts: FitOptions = FitOptions(),
    force_degenerate: bool = False,
    force_r: int | None = None,
) -> EoTResult:
    """Full excess-over-threshold estimation.

    Fits the threshold model, forms excesses, estimates the adjusted
    intermediate quantile and Hill index from them, validates the degenerate
    hypothesis with the adjusted KS statistic, selects the factor count on
    rejection (unless forced), and assembles the combined intermediate and
    extreme quantile surfaces.
    """
    if alpha not in ALPHA_LEVELS:
        raise ArgumentError(f"alpha must be one of {ALPHA_LEVELS}, got {alpha}")
    if force_degenerate and force_r is not None:
        raise ArgumentError("force_degenerate and force_r are mutually exclusive")
    cfg.validate_for(panel.n_cells, require_p=True)
    k = cfg.k

    threshold = fit_threshold(panel, covariates, kind, cfg.tau_star, opts)
    excess = panel.values - threshold
    pooled = excess.reshape(-1)
    if int(np.sum(pooled > 0)) < k:
        raise InfeasibleError(
            f"only {int(np.sum(pooled > 0))} positive excesses for k={k}; "
            "use a smaller k or a different tau_star"
        )
    u_adj = order_statistic_quantile(pooled, k)
    gamma_adj = hill(pooled, k)
    excess_panel = PanelData(excess, panel.unit_labels, panel.time_labels)
    ks_adj = ks_report(excess_panel, k)

    if force_degenerate:
        r_selected = 0
    elif force_r is not None:
        if force_r < 1:
            raise ArgumentError(f"force_r must be >= 1, got {force_r}")
        r_selected = int(force_r)
    elif not ks_adj.reject_at[alpha]:
        r_selected = 0
    else:
        r_selected = ic_select(excess_panel, cfg, opts).r_hat

    if r_selected == 0:
        excess_surface = np.ones_like(excess)
    else:
        fit = fit_ftvm(excess_panel, r_selected, cfg, opts)
        excess_surface = fit.model.volatility_surface()

    extrapolation = weissman_extrapolate(1.0, gamma_adj, k, panel.n_cells, cfg.p)
    intermediate = threshold + excess_surface * u_adj
    extreme = threshold + excess_surface * u_adj * extrapolation
    return EoTResult(
        threshold_surface=threshold,
        excess_panel=excess,
        u_adj=u_adj,
        gamma_adj=gamma_adj,
        ks_adj=ks_adj,
        r_selected=r_selected,
        intermediate_surface=intermediate,
        extreme_surface=extreme,
        p=cfg.p,
        k=k,
    )


def load_covariates(source, panel: PanelData) -> np.ndarray:
    """Read a covariate panel aligned to ``panel`` from long CSV.

    Header must be ``unit,time,x1[,x2,...]``; every (unit, time) pair of the
    panel must appear exactly once.  Returns an (N, T, d) array ordered like
    the panel axes.
    """
    if isinstance(source, (bytes, bytearray)):
        text = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        text = io.StringIO(source)
    else:
        data = source.read()
        text = io.StringIO(data.decode("utf-8") if isinstance(data, bytes) else data)
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty covariate file") from None
    if len(header) < 3 or header[:2] != ["unit", "time"]:
        raise DataError('covariate header must be "unit,time,x1[,x2,...]"')
    d = len(header) - 2
    unit_index = {u: i for i, u in enumerate(panel.unit_labels)}
    time_index = {t: j for j, t in enumerate(panel.time_labels)}
    out = np.full((panel.n_units, panel.n_periods, d), np.nan)
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != d + 2:
            raise DataError(f"row {lineno} has {len(row)} cells, expected {d + 2}")
        unit, time = row[0].strip(), row[1].strip()
        if unit not in unit_index or time not in time_index:
            raise DataError(f"row {lineno} references unknown cell ({unit!r}, {time!r})")
        i, j = unit_index[unit], time_index[time]
        if not np.isnan(out[i, j, 0]):
            raise DataError(f"duplicate covariate row for ({unit!r}, {time!r})")
        try:
            out[i, j] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DataError(f"cannot parse covariates at row {lineno}") from exc
    if np.isnan(out).any():
        i, j = np.argwhere(np.isnan(out[:, :, 0]))[0]
        raise DataError(
            f"incomplete covariate grid: missing ({panel.unit_labels[i]!r}, "
            f"{panel.time_labels[j]!r})"
        )
    return out


class TailThresholdEot(BaseEstimator):
    """Excess-over-threshold tail model with a scikit-learn style interface.

    Parameters mirror :func:`run_eot`; ``threshold`` is one of "constant",
    "qfm", "per_unit_qr".  Covariates for the per-unit regression are passed
    to :meth:`fit`.

    Attributes
    ----------
    result_ : EoTResult
    """

    def __init__(
        self,
        threshold: str = "constant",
        r_thr: int = 1,
        k: int | None = None,
        k_frac: float = 0.1,
        m: float = 0.1,
        M: float = 1.6,
        p: float = 1e-4,
        tau_star: float = 0.5,
        alpha: float = 0.05,
        force_degenerate: bool = False,
        force_r: int | None = None,
        r_max: int = 3,
        c_ic: float = 10.0,
        max_outer_iters: int = 100,
        loss_rel_tol: float = 1e-6,
        seed: int = 0,
        n_restarts: int = 5,
    ):
        self.threshold = threshold
        self.r_thr = r_thr
        self.k = k
        self.k_frac = k_frac
        self.m = m
        self.M = M
        self.p = p
        self.tau_star = tau_star
        self.alpha = alpha
        self.force_degenerate = force_degenerate
        self.force_r = force_r
        self.r_max = r_max
        self.c_ic = c_ic
        self.max_outer_iters = max_outer_iters
        self.loss_rel_tol = loss_rel_tol
        self.seed = seed
        self.n_restarts = n_restarts

    def fit(self, X, y=None, covariates=None):
        panel = X if isinstance(X, PanelData) else PanelData(np.asarray(X, dtype=float))
        k = self.k if self.k is not None else max(2, round(self.k_frac * panel.n_cells))
        cfg = TailConfig(
            k=k, m=self.m, M=self.M, p=self.p,
            tau_star=self.tau_star, c_ic=self.c_ic, r_max=self.r_max,
        )
        opts = FitOptions(
            max_outer_iters=self.max_outer_iters,
            loss_rel_tol=self.loss_rel_tol,
            seed=self.seed,
            n_restarts=self.n_restarts,
        )
        self.result_ = run_eot(
            panel,
            covariates,
            ThresholdModelKind(self.threshold, self.r_thr),
            cfg,
            alpha=self.alpha,
            opts=opts,
            force_degenerate=self.force_degenerate,
            force_r=self.force_r,
        )
        self.n_features_in_ = panel.n_periods
        return self

    def predict_quantiles(self, level: str = "intermediate") -> np.ndarray:
        if not hasattr(self, "result_"):
            raise ArgumentError("estimator is not fitted; call fit first")
        if level == "intermediate":
            return self.result_.intermediate_surface
        if level == "extreme":
            return self.result_.extreme_surface
        raise ArgumentError(f'level must be "intermediate" or "extreme", got {level!r}')
