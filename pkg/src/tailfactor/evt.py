"""Univariate extreme value estimators for the pooled panel.

Order-statistic intermediate quantiles, the Hill tail-index estimator, and
Weissman extrapolation to extreme levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ArgumentError
from .panel import PanelData, TailConfig


@dataclass(frozen=True)
class TailEstimates:
    """Pooled tail estimates: the k-th largest value and the Hill index."""

    u_intermediate: float
    gamma_hat: float
    k: int
    n: int

    def to_json_dict(self) -> dict:
        return {
            "u_intermediate": self.u_intermediate,
            "gamma_hat": self.gamma_hat,
            "k": self.k,
            "n": self.n,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TailEstimates":
        return cls(
            u_intermediate=float(doc["u_intermediate"]),
            gamma_hat=float(doc["gamma_hat"]),
            k=int(doc["k"]),
            n=int(doc["n"]),
        )


def _top_k_desc(values, k: int) -> np.ndarray:
    """The k largest values in descending order, ties counted separately."""
    values = np.asarray(values, dtype=float).reshape(-1)
    n = values.size
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} must satisfy 1 <= k <= n={n}")
    if k == n:
        top = values
    else:
        top = values[np.argpartition(values, n - k)[n - k:]]
    return np.sort(top)[::-1]


def order_statistic_quantile(values, k: int) -> float:
    """The k-th largest value (k=1 gives the maximum), with no interpolation."""
    return float(_top_k_desc(values, k)[k - 1])


def hill(values, k: int) -> float:
    """Hill estimator: mean log-ratio of the top k order statistics to the k-th.

    Requires 2 <= k < n and strictly positive top-k order statistics.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    n = values.size
    if not 2 <= k < n:
        raise ArgumentError(f"k={k} must satisfy 2 <= k < n={n}")
    top = _top_k_desc(values, k)
    nonpos = np.nonzero(top <= 0)[0]
    if nonpos.size:
        i = int(nonpos[0])
        raise ArgumentError(
            f"Hill estimator needs positive top order statistics; the "
            f"{i + 1}-th largest value is {top[i]}"
        )
    log_ratios = np.log(top) - np.log(top[k - 1])
    return float(np.mean(log_ratios))


def weissman_extrapolate(u_intermediate: float, gamma_hat: float, k: int, n: int, p: float) -> float:
    """Extrapolate from the intermediate level k/n to an extreme level p.

    Returns ``u_intermediate * (k / (n * p)) ** gamma_hat``; requires
    0 < p < k/n so the extrapolation factor exceeds one.
    """
    if not 0.0 < p < k / n:
        raise ArgumentError(f"extreme level p={p} must satisfy 0 < p < k/n={k / n}")
    return float(u_intermediate * (k / (n * p)) ** gamma_hat)


def tail_estimates(panel: PanelData, k: int) -> TailEstimates:
    """Pooled intermediate quantile and Hill index for a panel."""
    pooled = panel.values.reshape(-1)
    return TailEstimates(
        u_intermediate=order_statistic_quantile(pooled, k),
        gamma_hat=hill(pooled, k),
        k=k,
        n=pooled.size,
    )


def hill_plot_data(values, k_max: int | None = None) -> np.ndarray:
    """Hill estimates for k = 2..k_max, for threshold diagnostics.

    Returns an array of shape (k_max - 1, 2) with columns (k, gamma_hat).
    Only the strictly positive part of the sample is used.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    positive = np.sort(values[values > 0])[::-1]
    if positive.size < 3:
        raise ArgumentError("need at least 3 positive values for a Hill plot")
    if k_max is None:
        k_max = positive.size - 1
    k_max = min(k_max, positive.size - 1)
    logs = np.log(positive)
    ks = np.arange(2, k_max + 1)
    cummeans = np.cumsum(logs)[ks - 1] / ks
    gammas = cummeans - logs[ks - 1]
    return np.column_stack([ks.astype(float), gammas])


def evt_report(panel: PanelData, cfg: TailConfig) -> dict:
    """TailEstimates plus the optional Weissman-extrapolated extreme quantile."""
    cfg.validate_for(panel.n_cells)
    est = tail_estimates(panel, cfg.k)
    doc = est.to_json_dict()
    if cfg.p is not None:
        doc["p"] = cfg.p
        doc["u_extreme"] = weissman_extrapolate(
            est.u_intermediate, est.gamma_hat, est.k, est.n, cfg.p
        )
    return doc
