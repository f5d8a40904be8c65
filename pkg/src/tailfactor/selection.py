"""Validation of the degenerate model and selection of the factor count.

The KS statistic compares the running count of threshold exceedances,
taken in time-major order, against the uniform rate; under the degenerate
hypothesis it converges to the supremum of a standard Brownian bridge.
When the test rejects, an information criterion with a data-scaled penalty
picks the number of factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._qr_solvers import loss_sum
from .evt import order_statistic_quantile
from .exceptions import ArgumentError
from .ftvm import FitOptions, fit_ftvm
from .panel import PanelData, TailConfig

ALPHA_LEVELS = (0.10, 0.05, 0.01)

__all__ = [
    "ALPHA_LEVELS",
    "KsReport",
    "IcReport",
    "SelectionOutcome",
    "ks_statistic",
    "ks_pvalue",
    "ks_report",
    "ic_select",
    "validate_then_select",
]


@dataclass(frozen=True)
class KsReport:
    statistic: float
    p_value: float
    k: int
    reject_at: dict

    def to_json_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "k": self.k,
            "reject_at": {f"{a:.2f}": bool(v) for a, v in self.reject_at.items()},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "KsReport":
        return cls(
            statistic=float(doc["statistic"]),
            p_value=float(doc["p_value"]),
            k=int(doc["k"]),
            reject_at={float(a): bool(v) for a, v in doc["reject_at"].items()},
        )


@dataclass(frozen=True)
class IcReport:
    """Information-criterion scan over factor counts 0..r_max.

    ``criterion_values[l]`` is a (loss_term, penalty, total) triple; ``r_hat``
    is the argmin of the totals with ties resolved toward smaller l.  A
    nonpositive penalty (k <= N + T) is flagged in ``warning`` rather than
    raised, since the criterion is still computable.
    """

    r_hat: int
    criterion_values: tuple
    penalty_base: float
    warning: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "r_hat": self.r_hat,
            "criterion_values": [
                {"loss_term": lt, "penalty": pe, "total": to}
                for lt, pe, to in self.criterion_values
            ],
            "penalty_base": self.penalty_base,
            "warning": self.warning,
        }


@dataclass(frozen=True)
class SelectionOutcome:
    """Result of the validate-then-select recommendation."""

    degenerate: bool
    r_hat: int
    ks: KsReport
    ic: IcReport | None

    def to_json_dict(self) -> dict:
        return {
            "degenerate": self.degenerate,
            "r_hat": self.r_hat,
            "ks": self.ks.to_json_dict(),
            "ic": self.ic.to_json_dict() if self.ic is not None else None,
        }


def ks_statistic(panel: PanelData, k: int) -> float:
    """Exceedance-position KS statistic against the uniform rate.

    The panel is flattened time-major; with C(j) the number of the first j
    cells at or above the pooled k-th largest value, the statistic is the
    exact supremum of ``sqrt(k) * |C(floor(NT s))/k - s|`` over s in [0, 1],
    evaluated at the breakpoints of the step function (both one-sided gaps).
    """
    n_cells = panel.n_cells
    if not 1 <= k < n_cells:
        raise ArgumentError(f"k={k} must satisfy 1 <= k < N*T={n_cells}")
    x = panel.flatten_time_major()
    threshold = order_statistic_quantile(x, k)
    counts = np.concatenate([[0.0], np.cumsum(x >= threshold)]) / k
    grid = np.arange(n_cells + 1) / n_cells
    left_gaps = np.abs(counts - grid)
    right_gaps = np.abs(counts[:-1] - grid[1:])
    return float(math.sqrt(k) * max(left_gaps.max(), right_gaps.max()))


def ks_pvalue(statistic: float, term_tol: float = 1e-12) -> float:
    """Tail probability of the supremum of a standard Brownian bridge.

    Kolmogorov series ``2 * sum_j (-1)^{j-1} exp(-2 j^2 x^2)``, truncated when
    terms drop below ``term_tol`` and clamped to [0, 1].  For x below 1e-3 the
    value is 1 to double precision and is returned directly.
    """
    if statistic < 0:
        raise ArgumentError(f"KS statistic must be nonnegative, got {statistic}")
    if statistic < 1e-3:
        return 1.0
    total = 0.0
    sign = 1.0
    for j in range(1, 200_000):
        term = math.exp(-2.0 * j * j * statistic * statistic)
        total += sign * term
        if term < term_tol:
            break
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def ks_report(panel: PanelData, k: int) -> KsReport:
    stat = ks_statistic(panel, k)
    p = ks_pvalue(stat)
    return KsReport(
        statistic=stat,
        p_value=p,
        k=k,
        reject_at={alpha: p < alpha for alpha in ALPHA_LEVELS},
    )


def _padded_warm_start(model) -> tuple[np.ndarray, np.ndarray]:
    """Previous solution plus one inert factor: zero loading row, tiny factor row.

    The added products are exactly zero, so the warm start reproduces the
    smaller model's loss; the factor row is nonzero to keep F full rank.
    """
    L, F = model.loadings, model.factors
    T = F.shape[1]
    ramp = 0.05 * np.cos((model.r + 1) * np.pi * np.arange(T) / max(T - 1, 1))
    return (
        np.vstack([L, np.zeros((1, L.shape[1]))]),
        np.vstack([F, ramp[None, :]]),
    )


def ic_select(
    panel: PanelData,
    cfg: TailConfig,
    opts: FitOptions = FitOptions(),
    chain_warm_starts: bool = True,
) -> IcReport:
    """Select the factor count over l = 0..r_max by the information criterion.

    The degenerate model (l = 0, constant surface) anchors both the loss
    scale and the penalty.  By default candidate fits are chained serially by
    warm starts, which makes the loss terms nonincreasing in l up to solver
    tolerance; ``chain_warm_starts=False`` fits every l from independent
    restarts instead (the candidate fits are then embarrassingly parallel,
    at the price of the monotonicity guarantee).
    """
    n, t = panel.values.shape
    n_cells = panel.n_cells
    cfg.validate_for(n_cells)
    k = cfg.k
    tau = cfg.intermediate_tau(n_cells)
    u_hat = order_statistic_quantile(panel.values.reshape(-1), k)
    z = panel.values / u_hat

    loss0 = loss_sum(z - 1.0, tau) / k
    warning = None
    if k <= n + t:
        warning = (
            f"k={k} <= N+T={n + t} makes log(k/(N+T)) nonpositive; the penalty "
            "is nonpositive and selection is unreliable"
        )
    penalty_base = ((n + t) / (cfg.c_ic * k)) * math.log(k / (n + t)) * loss0

    loss_terms = [loss0]
    warm = None
    for level in range(1, cfg.r_max + 1):
        fit = fit_ftvm(panel, level, cfg, opts, warm_start=warm)
        loss_terms.append(fit.final_loss / k)
        if chain_warm_starts:
            warm = _padded_warm_start(fit.model)

    rows = tuple(
        (loss_terms[level], level * penalty_base, loss_terms[level] + level * penalty_base)
        for level in range(cfg.r_max + 1)
    )
    totals = np.array([row[2] for row in rows])
    r_hat = int(np.argmin(totals))
    return IcReport(r_hat=r_hat, criterion_values=rows, penalty_base=penalty_base, warning=warning)


def validate_then_select(
    panel: PanelData,
    cfg: TailConfig,
    alpha: float = 0.05,
    opts: FitOptions = FitOptions(),
) -> SelectionOutcome:
    """KS test first; on rejection, pick the factor count by the criterion."""
    if alpha not in ALPHA_LEVELS:
        raise ArgumentError(f"alpha must be one of {ALPHA_LEVELS}, got {alpha}")
    report = ks_report(panel, cfg.k)
    if not report.reject_at[alpha]:
        return SelectionOutcome(degenerate=True, r_hat=0, ks=report, ic=None)
    ic = ic_select(panel, cfg, opts)
    return SelectionOutcome(degenerate=ic.r_hat == 0, r_hat=ic.r_hat, ks=report, ic=ic)
