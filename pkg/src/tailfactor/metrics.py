"""Scoring of fitted quantile surfaces against simulation ground truth.

Mean squared relative errors normalize by the reference tail quantile, so
results are comparable across tail levels and generators.  For the Pareto
generators the marginal excess quantile at upper-tail level tau is
``(2 tau)^(-1/lambda)`` (the factor 2 comes from the symmetrizing signs);
for the Student-t generators it is the t quantile at 1 - tau.  The
reference quantile is ``c`` times the marginal, with ``c`` the lambda-mean
of the volatility surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .dgp import DgpSample
from .exceptions import ArgumentError

__all__ = ["TruthBundle", "msre", "msre_eot", "align_and_score", "msre_surface"]


@dataclass(frozen=True)
class TruthBundle:
    """Ground-truth components needed to score a fitted surface."""

    vol_surface: np.ndarray
    lam: float
    family: str
    c_ref: float
    central_surface: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in ("pareto", "student_t"):
            raise ArgumentError(f"unknown innovation family {self.family!r}")

    @classmethod
    def from_sample(cls, sample: DgpSample, c_ref: float | None = None) -> "TruthBundle":
        """Build from a generated sample; pass a Monte Carlo ``c_ref`` to use
        the limiting reference scale instead of this sample's own."""
        return cls(
            vol_surface=sample.volatility_surface(),
            lam=sample.spec.lam,
            family=sample.spec.innovation_family,
            c_ref=sample.c_ref if c_ref is None else c_ref,
            central_surface=sample.true_threshold,
        )

    def excess_marginal_quantile(self, tau: float) -> float:
        """True upper-tail quantile of the (signed) innovation at level tau."""
        if not 0.0 < tau < 1.0:
            raise ArgumentError(f"tau must lie in (0, 1), got {tau}")
        if self.family == "pareto":
            return float((2.0 * tau) ** (-1.0 / self.lam))
        return float(student_t.ppf(1.0 - tau, df=self.lam))

    def reference_quantile(self, tau: float) -> float:
        return self.c_ref * self.excess_marginal_quantile(tau)

    def conditional_quantile_surface(self, tau: float) -> np.ndarray:
        """True tau-tail quantile of every cell: central part plus scaled excess."""
        excess = self.vol_surface * self.excess_marginal_quantile(tau)
        if self.central_surface is None:
            return excess
        return self.central_surface + excess


def msre_surface(estimate: np.ndarray, truth: TruthBundle, tau: float) -> np.ndarray:
    """MSRE of an arbitrary estimated quantile surface."""
    estimate = np.asarray(estimate, dtype=float)
    target = truth.conditional_quantile_surface(tau)
    if estimate.shape != target.shape:
        raise ArgumentError(f"surface shape {estimate.shape} does not match truth {target.shape}")
    u_ref = truth.reference_quantile(tau)
    return float(np.mean(((estimate - target) / u_ref) ** 2))


def msre(L: np.ndarray, F: np.ndarray, scale: float, truth: TruthBundle, tau: float) -> float:
    """MSRE of the factorized surface ``(L'F) * scale`` at tail level tau.

    ``scale`` is the estimated reference quantile multiplying the surface
    (the pooled intermediate quantile, optionally Weissman-extrapolated).
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if L.shape[0] != F.shape[0]:
        raise ArgumentError(f"L has {L.shape[0]} rows but F has {F.shape[0]}")
    if truth.central_surface is not None:
        raise ArgumentError("truth has a central surface; score with msre_eot")
    return msre_surface(L.T @ F * scale, truth, tau)


def msre_eot(
    H: np.ndarray | float,
    L: np.ndarray,
    F: np.ndarray,
    scale: float,
    truth: TruthBundle,
    tau: float,
) -> float:
    """MSRE of the combined surface ``H + (L'F) * scale`` against the
    conditional quantile truth."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if L.shape[0] != F.shape[0]:
        raise ArgumentError(f"L has {L.shape[0]} rows but F has {F.shape[0]}")
    surface = np.asarray(H, dtype=float) + L.T @ F * scale
    return msre_surface(surface, truth, tau)


def align_and_score(
    F_true: np.ndarray, F_hat: np.ndarray, L_true: np.ndarray, L_hat: np.ndarray
) -> tuple[np.ndarray, float, float]:
    """Sign-align estimated factors/loadings with the truth and report errors.

    The sign matrix has diagonal ``sgn(diag(F_true @ F_hat'))`` with
    ``sgn(0) = +1``; returns ``(S, loading_rmse, factor_rmse)`` where the
    errors are Frobenius norms scaled by 1/sqrt(N) and 1/sqrt(T).
    """
    F_true = np.atleast_2d(np.asarray(F_true, dtype=float))
    F_hat = np.atleast_2d(np.asarray(F_hat, dtype=float))
    L_true = np.atleast_2d(np.asarray(L_true, dtype=float))
    L_hat = np.atleast_2d(np.asarray(L_hat, dtype=float))
    if F_true.shape != F_hat.shape or L_true.shape != L_hat.shape:
        raise ArgumentError(
            f"shape mismatch: factors {F_true.shape} vs {F_hat.shape}, "
            f"loadings {L_true.shape} vs {L_hat.shape}"
        )
    if F_true.shape[0] != L_true.shape[0]:
        raise ArgumentError("factor and loading matrices disagree on r")
    diag = np.diag(F_true @ F_hat.T)
    signs = np.where(diag >= 0, 1.0, -1.0)
    S = np.diag(signs)
    n = L_true.shape[1]
    t_len = F_true.shape[1]
    loading_rmse = float(np.linalg.norm(L_hat - S @ L_true) / np.sqrt(n))
    factor_rmse = float(np.linalg.norm(F_hat - S @ F_true) / np.sqrt(t_len))
    return S, loading_rmse, factor_rmse
