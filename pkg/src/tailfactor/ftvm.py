"""Constrained check-loss factorization of the tail volatility surface.

The panel is rescaled by its pooled intermediate tail quantile, then the
level-``k/NT`` upper-tail quantile surface is factorized as a low-rank
product ``l_i' f_t`` constrained to the box (m, M], by alternating
constrained quantile regressions over units and time periods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._qr_solvers import (
    LOWER_MARGIN,
    UPPER_SLACK,
    batch_coordinate_descent,
    loss_sum,
)
from ._rng import stream
from .evt import TailEstimates, tail_estimates, weissman_extrapolate
from .exceptions import ArgumentError, RankError
from .panel import PanelData, TailConfig

__all__ = [
    "FactorModel",
    "FitOptions",
    "FitResult",
    "FactorizedTailVolatility",
    "fit_ftvm",
    "normalize_identification",
    "predict_quantiles",
    "degenerate_quantiles",
]


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings for the alternating fit.

    ``inner_grid = 0`` uses the exact subproblem solvers (weighted quantile
    for r = 1, coordinate descent with exact line minimization for r > 1);
    a positive value replaces each coordinate update with a search over that
    many evenly spaced feasible candidates.
    """

    max_outer_iters: int = 100
    loss_rel_tol: float = 1e-6
    inner_grid: int = 0
    seed: int = 0
    n_restarts: int = 5

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ArgumentError(f"max_outer_iters must be >= 1, got {self.max_outer_iters}")
        if not self.loss_rel_tol > 0:
            raise ArgumentError(f"loss_rel_tol must be positive, got {self.loss_rel_tol}")
        if self.inner_grid < 0:
            raise ArgumentError(f"inner_grid must be >= 0, got {self.inner_grid}")
        if self.n_restarts < 1:
            raise ArgumentError(f"n_restarts must be >= 1, got {self.n_restarts}")


@dataclass(frozen=True)
class FactorModel:
    """Loadings (r x N) and factors (r x T) of a fitted volatility surface."""

    r: int
    loadings: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        loadings = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        factors = np.atleast_2d(np.asarray(self.factors, dtype=float))
        if loadings.shape[0] != self.r or factors.shape[0] != self.r:
            raise ArgumentError(
                f"loadings/factors must have {self.r} rows, got "
                f"{loadings.shape[0]} and {factors.shape[0]}"
            )
        loadings.setflags(write=False)
        factors.setflags(write=False)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "factors", factors)

    @property
    def n_units(self) -> int:
        return self.loadings.shape[1]

    @property
    def n_periods(self) -> int:
        return self.factors.shape[1]

    def volatility_surface(self) -> np.ndarray:
        """The N x T matrix of fitted products ``l_i' f_t``."""
        return self.loadings.T @ self.factors


@dataclass(frozen=True)
class FitResult:
    """Fitted factor model plus the pooled tail estimates and the fit trace."""

    model: FactorModel
    tail: TailEstimates
    final_loss: float
    loss_trace: tuple = ()
    restarts_used: int = 0

    def to_json_dict(self) -> dict:
        return {
            "kind": "fit_result",
            "model": {
                "r": self.model.r,
                "loadings": [list(row) for row in self.model.loadings.tolist()],
                "factors": [list(row) for row in self.model.factors.tolist()],
            },
            "tail": self.tail.to_json_dict(),
            "final_loss": self.final_loss,
            "loss_trace": list(self.loss_trace),
            "restarts_used": self.restarts_used,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FitResult":
        model = FactorModel(
            r=int(doc["model"]["r"]),
            loadings=np.asarray(doc["model"]["loadings"], dtype=float),
            factors=np.asarray(doc["model"]["factors"], dtype=float),
        )
        return cls(
            model=model,
            tail=TailEstimates.from_json_dict(doc["tail"]),
            final_loss=float(doc["final_loss"]),
            loss_trace=tuple(float(v) for v in doc["loss_trace"]),
            restarts_used=int(doc["restarts_used"]),
        )


def normalize_identification(model: FactorModel) -> tuple[FactorModel, np.ndarray]:
    """Rotate a factor model into the identification gauge.

    Afterwards ``(1/T) F F' = I_r`` and ``(1/N) L L'`` is diagonal with
    nonincreasing diagonal; every fitted product ``l_i' f_t`` is preserved
    exactly.  Each factor row is flipped so its first nonzero entry is
    positive; the returned diagonal sign matrix records the flips.
    """
    L = np.asarray(model.loadings, dtype=float)
    F = np.asarray(model.factors, dtype=float)
    r, T = F.shape
    N = L.shape[1]
    C = (F @ F.T) / T
    w, U = np.linalg.eigh(C)
    if w[-1] <= 0 or w[0] <= 1e-12 * w[-1]:
        raise RankError(
            f"factor matrix is rank deficient (eigenvalues of FF'/T: {w.tolist()}); "
            "reduce the factor count"
        )
    sqrt_c = (U * np.sqrt(w)) @ U.T
    inv_sqrt_c = (U / np.sqrt(w)) @ U.T
    F1 = inv_sqrt_c @ F
    L1 = sqrt_c @ L
    G = (L1 @ L1.T) / N
    lam, Q = np.linalg.eigh(G)
    order = np.argsort(lam)[::-1]
    Q = Q[:, order]
    F2 = Q.T @ F1
    L2 = Q.T @ L1
    signs = np.ones(r)
    for j in range(r):
        row = F2[j]
        nz = np.nonzero(np.abs(row) > 1e-12 * max(1.0, np.abs(row).max()))[0]
        if nz.size and row[nz[0]] < 0:
            signs[j] = -1.0
    S = np.diag(signs)
    return FactorModel(r=r, loadings=S @ L2, factors=S @ F2), S


def _exceedance_directions(Z: np.ndarray, r: int) -> np.ndarray:
    """Top-r time-axis singular directions of the centered exceedance pattern.

    Rows are scaled to unit max-abs; degenerate directions fall back to a
    deterministic oscillating ramp so no factor row starts at exactly zero.
    """
    N, T = Z.shape
    B = (Z > 1.0).astype(float)
    sd = B.std(axis=1, keepdims=True)
    Bc = np.where(sd > 0, (B - B.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0), 0.0)
    dirs = np.zeros((r, T))
    try:
        _, _, vt = np.linalg.svd(Bc, full_matrices=False)
        take = min(r, vt.shape[0])
        dirs[:take] = vt[:take]
    except np.linalg.LinAlgError:
        pass
    rate = B.mean(axis=0)
    rate = rate - rate.mean()
    grid = np.arange(T)
    for j in range(r):
        peak = np.abs(dirs[j]).max()
        if peak < 1e-10:
            dirs[j] = np.cos((j + 1) * np.pi * grid / max(T - 1, 1))
        else:
            dirs[j] = dirs[j] / peak
            if np.dot(dirs[j], rate) < 0:
                dirs[j] = -dirs[j]
    return dirs


def _feasible_start(F0: np.ndarray, lower: float, upper: float) -> np.ndarray | None:
    """Scale s with lower <= s * F0[0, t] <= upper for all t, or None."""
    f1 = F0[0]
    if np.any(f1 <= 0):
        return None
    s_min = lower / f1.min()
    s_max = upper / f1.max()
    if s_min > s_max:
        return None
    return float(np.clip(1.0 / np.median(f1), s_min, s_max))


def _initial_states(
    Z: np.ndarray, r: int, lower: float, upper: float, opts: FitOptions
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Restart pool: exceedance-SVD init, constant init, seeded perturbations."""
    N, T = Z.shape
    dirs = _exceedance_directions(Z, r)
    states = []
    for idx in range(opts.n_restarts):
        F0 = np.ones((r, T))
        if idx == 1:
            # plain constant-surface start; extra rows get a tiny ramp
            for j in range(1, r):
                F0[j] = 0.05 * np.cos((j + 1) * np.pi * np.arange(T) / max(T - 1, 1))
        else:
            F0[0] = np.clip(1.0 + 0.3 * dirs[0], 0.75, 1.25)
            for j in range(1, r):
                F0[j] = 0.3 * dirs[j]
            if idx >= 2:
                rng = stream(opts.seed, "ftvm-restart", idx)
                F0[0] = np.clip(F0[0] * (1.0 + 0.2 * rng.uniform(-1, 1, T)), 0.6, 1.4)
                for j in range(1, r):
                    F0[j] = F0[j] + 0.2 * rng.uniform(-1, 1, T)
        scale = _feasible_start(F0, lower, upper)
        if scale is None:
            F0 = np.ones((r, T))
            for j in range(1, r):
                F0[j] = 0.05 * np.cos((j + 1) * np.pi * np.arange(T) / max(T - 1, 1))
            scale = float(np.clip(1.0, lower, upper))
        V0 = np.zeros((N, r))
        V0[:, 0] = scale
        states.append((V0.T.copy(), F0))
    return states


def _alternate(
    Z: np.ndarray,
    L: np.ndarray,
    F: np.ndarray,
    tau: float,
    lower: float,
    upper: float,
    opts: FitOptions,
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Alternating half-steps until relative objective improvement stalls."""
    descent_kw = dict(max_cycles=50, rel_tol=1e-9, grid=opts.inner_grid)
    loss = loss_sum(Z - L.T @ F, tau)
    trace = [loss]
    for _ in range(opts.max_outer_iters):
        prev = loss
        V = np.ascontiguousarray(L.T)
        V, fitted = batch_coordinate_descent(Z, F, V, tau, lower, upper, **descent_kw)
        L = V.T
        loss = loss_sum(Z - fitted, tau)
        trace.append(loss)
        W = np.ascontiguousarray(F.T)
        W, fitted_t = batch_coordinate_descent(Z.T, L, W, tau, lower, upper, **descent_kw)
        F = W.T
        loss = loss_sum(Z.T - fitted_t, tau)
        trace.append(loss)
        if prev - loss <= opts.loss_rel_tol * max(prev, 1e-300):
            break
    return L, F, loss, trace


def fit_ftvm(
    panel: PanelData,
    r: int,
    cfg: TailConfig,
    opts: FitOptions = FitOptions(),
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Fit the constrained tail volatility factorization with r factors.

    Rescales the panel by the pooled k-th largest value, runs the alternating
    minimization from ``opts.n_restarts`` initializations (plus an optional
    ``warm_start`` pair ``(L0, F0)``, used when scanning factor counts), and
    returns the best restart, identification-normalized.
    """
    N, T = panel.values.shape
    if not 1 <= r <= min(N, T):
        raise ArgumentError(f"factor count r={r} must satisfy 1 <= r <= min(N,T)={min(N, T)}")
    cfg.validate_for(panel.n_cells)
    lower = cfg.m + LOWER_MARGIN
    upper = cfg.M * (1.0 - UPPER_SLACK)
    if lower > upper:
        raise ArgumentError(
            f"infeasible volatility bounds: need m < M with margin, got m={cfg.m}, M={cfg.M}"
        )
    tail = tail_estimates(panel, cfg.k)
    Z = panel.values / tail.u_intermediate
    tau = cfg.intermediate_tau(panel.n_cells)

    states = _initial_states(Z, r, lower, upper, opts)
    if warm_start is not None:
        L0 = np.atleast_2d(np.asarray(warm_start[0], dtype=float))
        F0 = np.atleast_2d(np.asarray(warm_start[1], dtype=float))
        if L0.shape != (r, N) or F0.shape != (r, T):
            raise ArgumentError(
                f"warm start shapes {L0.shape}/{F0.shape} do not match (r, N)/(r, T)"
            )
        states.append((L0.copy(), F0.copy()))

    best = None
    for L0, F0 in states:
        L, F, loss, trace = _alternate(Z, L0, F0, tau, lower, upper, opts)
        if best is None or loss < best[2]:
            best = (L, F, loss, trace)
    L, F, _, trace = best

    model, _ = normalize_identification(FactorModel(r=r, loadings=L, factors=F))
    final_loss = loss_sum(Z - model.volatility_surface(), tau)
    return FitResult(
        model=model,
        tail=tail,
        final_loss=final_loss,
        loss_trace=tuple(trace),
        restarts_used=len(states),
    )


def predict_quantiles(fit: FitResult, level: str = "intermediate", p: float | None = None) -> np.ndarray:
    """Quantile surface implied by a fit.

    ``level="intermediate"`` returns ``l_i' f_t * U_hat(NT/k)``;
    ``level="extreme"`` additionally multiplies by the Weissman factor
    ``(k / (NT p)) ** gamma_hat`` and requires ``0 < p < k/NT``.
    """
    surface = fit.model.volatility_surface() * fit.tail.u_intermediate
    if level == "intermediate":
        return surface
    if level == "extreme":
        if p is None:
            raise ArgumentError("extreme level requires p")
        factor = weissman_extrapolate(1.0, fit.tail.gamma_hat, fit.tail.k, fit.tail.n, p)
        return surface * factor
    raise ArgumentError(f'level must be "intermediate" or "extreme", got {level!r}')


def degenerate_quantiles(
    tail: TailEstimates, shape: tuple[int, int], level: str = "intermediate", p: float | None = None
) -> np.ndarray:
    """Quantile surface of the degenerate (r = 0) model: a constant panel."""
    if level == "intermediate":
        value = tail.u_intermediate
    elif level == "extreme":
        if p is None:
            raise ArgumentError("extreme level requires p")
        value = weissman_extrapolate(tail.u_intermediate, tail.gamma_hat, tail.k, tail.n, p)
    else:
        raise ArgumentError(f'level must be "intermediate" or "extreme", got {level!r}')
    return np.full(shape, value)


def fit_objective(panel: PanelData, surface: np.ndarray, tail: TailEstimates, tau: float) -> float:
    """Check loss of a candidate volatility surface on the rescaled panel."""
    return loss_sum(panel.values / tail.u_intermediate - surface, tau)


class FactorizedTailVolatility(BaseEstimator):
    """Tail volatility factor model with a scikit-learn style interface.

    Parameters
    ----------
    r : int
        Number of factors (>= 1).
    k : int or None
        Intermediate order; if None it is resolved as ``round(k_frac * N * T)``.
    k_frac : float
        Fraction of the pooled sample used when ``k`` is None.
    m, M : float
        Box bounds on the fitted volatility surface, ``m < l'f <= M``.
    p : float or None
        Default extreme tail level for ``predict_quantiles("extreme")``.
    max_outer_iters, loss_rel_tol, seed, n_restarts, inner_grid :
        Optimizer settings; see :class:`FitOptions`.

    Attributes
    ----------
    result_ : FitResult
    model_ : FactorModel
    tail_ : TailEstimates
    """

    def __init__(
        self,
        r: int = 1,
        k: int | None = None,
        k_frac: float = 0.1,
        m: float = 0.1,
        M: float = 1.6,
        p: float | None = None,
        max_outer_iters: int = 100,
        loss_rel_tol: float = 1e-6,
        seed: int = 0,
        n_restarts: int = 5,
        inner_grid: int = 0,
    ):
        self.r = r
        self.k = k
        self.k_frac = k_frac
        self.m = m
        self.M = M
        self.p = p
        self.max_outer_iters = max_outer_iters
        self.loss_rel_tol = loss_rel_tol
        self.seed = seed
        self.n_restarts = n_restarts
        self.inner_grid = inner_grid

    def _resolve_panel(self, X) -> PanelData:
        if isinstance(X, PanelData):
            return X
        return PanelData(np.asarray(X, dtype=float))

    def fit(self, X, y=None):
        """Fit on an N x T array or PanelData; y is ignored."""
        panel = self._resolve_panel(X)
        k = self.k if self.k is not None else max(2, round(self.k_frac * panel.n_cells))
        cfg = TailConfig(k=k, m=self.m, M=self.M, p=self.p)
        opts = FitOptions(
            max_outer_iters=self.max_outer_iters,
            loss_rel_tol=self.loss_rel_tol,
            inner_grid=self.inner_grid,
            seed=self.seed,
            n_restarts=self.n_restarts,
        )
        self.result_ = fit_ftvm(panel, self.r, cfg, opts)
        self.model_ = self.result_.model
        self.tail_ = self.result_.tail
        self.n_features_in_ = panel.n_periods
        return self

    def predict_quantiles(self, level: str = "intermediate", p: float | None = None) -> np.ndarray:
        """Fitted quantile surface at the intermediate or an extreme level."""
        if not hasattr(self, "result_"):
            raise ArgumentError("estimator is not fitted; call fit first")
        return predict_quantiles(self.result_, level=level, p=p if p is not None else self.p)
