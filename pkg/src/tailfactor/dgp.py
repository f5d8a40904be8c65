"""Seeded data generating processes for the simulation studies.

Five generators share the skeleton ``Y = (l_i' f_t) * u_{i,t} [* sign]``:

* DGP1: single factor, AR(1) factor path, uniform loadings, Pareto shocks.
* DGP2: two factors, shifted VAR(1) path, arcsine loadings, Pareto shocks.
* DGP3: two factors built from an SVD plus a small linear program that
  maximizes the second loading eigenvalue subject to box constraints.
* DGP4: DGP1 volatility plus a rank-one central surface, Student-t shocks.
* DGP5: DGP1 volatility plus a per-unit linear regression surface with
  observed covariates, Student-t shocks.

All randomness flows through counter-based Philox streams keyed by
(seed, stream label), so each component is bit-reproducible in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtri
from scipy.stats import t as student_t

from ._rng import stream
from .exceptions import ArgumentError, InfeasibleError
from .panel import PanelData

BURN_IN = 200
DGP3_LOWER = 0.1
DGP3_UPPER = 5.0


@dataclass(frozen=True)
class DgpSpec:
    """Which generator to run, at what size, tail weight, and seed."""

    dgp: int
    N: int
    T: int
    lam: float
    seed: int = 0

    def __post_init__(self):
        if self.dgp not in (1, 2, 3, 4, 5):
            raise ArgumentError(f"dgp must be one of 1..5, got {self.dgp}")
        if self.N < 2 or self.T < 2:
            raise ArgumentError(f"need N, T >= 2, got ({self.N}, {self.T})")
        if not self.lam > 0:
            raise ArgumentError(f"lambda must be positive, got {self.lam}")

    @property
    def r_true(self) -> int:
        return 2 if self.dgp in (2, 3) else 1

    @property
    def innovation_family(self) -> str:
        return "pareto" if self.dgp in (1, 2, 3) else "student_t"


@dataclass(frozen=True)
class DgpSample:
    """One simulated panel plus every component needed to rebuild it."""

    spec: DgpSpec
    panel: PanelData
    true_loadings: np.ndarray
    true_factors: np.ndarray
    innovations: np.ndarray
    signs: np.ndarray | None
    true_threshold: np.ndarray | None
    covariates: np.ndarray | None
    c_ref: float

    def volatility_surface(self) -> np.ndarray:
        return self.true_loadings.T @ self.true_factors


class ReferenceConstant(NamedTuple):
    value: float
    standard_error: float
    reps: int


def _beta_half(v: np.ndarray) -> np.ndarray:
    """Beta(0.5, 0.5) by inverse CDF: the arcsine law on (0, 1)."""
    return np.sin(0.5 * np.pi * v) ** 2


def _ar1_path(rng: np.random.Generator, T: int, coef: float, shift: float,
              innov_mean: float) -> np.ndarray:
    eps = rng.random(T + BURN_IN)
    x = (innov_mean + shift) / (1.0 - coef)
    out = np.empty(T + BURN_IN)
    for t in range(T + BURN_IN):
        x = coef * x + eps[t] + shift
        out[t] = x
    return out[BURN_IN:]


def _dgp1_loadings_factors(spec: DgpSpec, rng_l, rng_f):
    loadings = (0.5 + rng_l.random(spec.N))[None, :]
    factors = _ar1_path(rng_f, spec.T, coef=0.4, shift=0.3, innov_mean=0.5)[None, :]
    return loadings, factors


def _dgp2_loadings_factors(spec: DgpSpec, rng_l, rng_f):
    loadings = 0.5 + _beta_half(rng_l.random((2, spec.N)))
    eps = _beta_half(rng_f.random((2, spec.T + BURN_IN)))
    coef = np.array([0.4, 0.2])
    shift = np.array([0.3, 0.4])
    x = (0.5 + shift) / (1.0 - coef)
    path = np.empty((2, spec.T + BURN_IN))
    for t in range(spec.T + BURN_IN):
        x = coef * x + eps[:, t] + shift
        path[:, t] = x
    return loadings, path[:, BURN_IN:]


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Extreme points of a 2-d point cloud (Andrew's monotone chain)."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts

    def half(iterable):
        chain = []
        for p in iterable:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def dgp3_lp(V: np.ndarray, W: np.ndarray) -> tuple[float, float]:
    """Maximize the second scale subject to the DGP3 box constraints.

    Solves ``max s2`` over ``s1 >= s2 >= 0`` with
    ``0.1 <= v_i' diag(s1, s2) w_t <= 5`` for every (i, t) pair, exactly, by
    enumerating vertices of the feasible region.  The N*T linear constraints
    are first reduced to the extreme points of the (a, b) coefficient cloud,
    which leaves an equivalent, tiny constraint set.  Ties resolve toward
    smaller s1.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if V.shape[0] != 2 or W.shape[0] != 2:
        raise ArgumentError("V and W must be 2 x N and 2 x T")
    a = np.outer(V[0], W[0]).ravel()
    b = np.outer(V[1], W[1]).ravel()
    coeffs = _convex_hull(np.column_stack([a, b]))

    # Boundary lines as rows (alpha, beta, c) of alpha*s1 + beta*s2 = c.
    lines = [(ca, cb, DGP3_LOWER) for ca, cb in coeffs]
    lines += [(ca, cb, DGP3_UPPER) for ca, cb in coeffs]
    lines += [(1.0, -1.0, 0.0), (0.0, 1.0, 0.0)]
    lines = np.array(lines)

    def feasible(s1: float, s2: float) -> bool:
        if not (s1 >= s2 - 1e-9 and s2 >= -1e-9):
            return False
        prods = coeffs[:, 0] * s1 + coeffs[:, 1] * s2
        return bool(prods.min() >= DGP3_LOWER - 1e-7 and prods.max() <= DGP3_UPPER + 1e-7)

    best: tuple[float, float] | None = None
    n_lines = len(lines)
    for i in range(n_lines):
        a1, b1, c1 = lines[i]
        for j in range(i + 1, n_lines):
            a2, b2, c2 = lines[j]
            det = a1 * b2 - a2 * b1
            if abs(det) < 1e-14 * max(1.0, abs(a1 * b2), abs(a2 * b1)):
                continue
            s1 = (c1 * b2 - c2 * b1) / det
            s2 = (a1 * c2 - a2 * c1) / det
            if not feasible(s1, s2):
                continue
            if best is None or s2 > best[1] + 1e-12 or (
                abs(s2 - best[1]) <= 1e-12 and s1 < best[0]
            ):
                best = (float(s1), float(s2))
    if best is None:
        raise InfeasibleError(
            "DGP3 scale program is infeasible: no vertex satisfies "
            f"{DGP3_LOWER} <= v'diag(s)w <= {DGP3_UPPER} with s1 >= s2 >= 0 "
            f"(coefficient extremes: {coeffs.tolist()})"
        )
    return best


def _dgp3_loadings_factors(spec: DgpSpec, rng_l, rng_f):
    eps_l = _beta_half(rng_l.random((2, spec.N)))
    eps_f = _beta_half(rng_f.random((2, spec.T)))
    A = 0.5 + eps_l.T @ eps_f
    U, _, Vt = np.linalg.svd(A, full_matrices=False)
    V2 = np.ascontiguousarray(U[:, :2].T)
    W2 = np.ascontiguousarray(Vt[:2])
    for j in range(2):
        if V2[j].sum() < 0:
            V2[j] *= -1.0
            W2[j] *= -1.0
    s1, s2 = dgp3_lp(V2, W2)
    loadings = np.diag([s1, s2]) @ V2 / np.sqrt(spec.T)
    factors = np.sqrt(spec.T) * W2
    return loadings, factors


_LF_BUILDERS = {
    1: _dgp1_loadings_factors,
    2: _dgp2_loadings_factors,
    3: _dgp3_loadings_factors,
    4: _dgp1_loadings_factors,
    5: _dgp1_loadings_factors,
}


def _loadings_factors(spec: DgpSpec, *stream_parts):
    rng_l = stream(spec.seed, "dgp", spec.dgp, *stream_parts, "loadings")
    rng_f = stream(spec.seed, "dgp", spec.dgp, *stream_parts, "factors")
    return _LF_BUILDERS[spec.dgp](spec, rng_l, rng_f)


def _innovations(spec: DgpSpec) -> np.ndarray:
    rng = stream(spec.seed, "dgp", spec.dgp, "innovations")
    v = rng.random((spec.N, spec.T))
    if spec.innovation_family == "pareto":
        return v ** (-1.0 / spec.lam)
    return student_t.ppf(v, df=spec.lam)


def sample_c_ref(loadings: np.ndarray, factors: np.ndarray, lam: float) -> float:
    """Finite-sample reference scale: the lambda-mean of the volatility surface."""
    vol = loadings.T @ factors
    return float(np.mean(vol ** lam) ** (1.0 / lam))


def generate(spec: DgpSpec) -> DgpSample:
    """Draw one panel from the requested generator."""
    loadings, factors = _loadings_factors(spec)
    u = _innovations(spec)
    vol = loadings.T @ factors

    signs = None
    threshold = None
    covariates = None
    if spec.dgp in (1, 2, 3):
        rng_s = stream(spec.seed, "dgp", spec.dgp, "signs")
        signs = np.where(rng_s.random((spec.N, spec.T)) < 0.5, -1.0, 1.0)
        values = vol * u * signs
    elif spec.dgp == 4:
        rng_a = stream(spec.seed, "dgp", 4, "central-unit")
        rng_b = stream(spec.seed, "dgp", 4, "central-time")
        a = 1.0 + ndtri(rng_a.random(spec.N))
        eta = 1.0 + ndtri(rng_b.random(spec.T + BURN_IN))
        b = np.empty(spec.T + BURN_IN)
        x = 1.0 / 0.4
        for tt in range(spec.T + BURN_IN):
            x = 0.6 * x + eta[tt]
            b[tt] = x
        b = b[BURN_IN:]
        threshold = np.outer(a, b)
        values = threshold + vol * u
    else:
        rng_x = stream(spec.seed, "dgp", 5, "covariates")
        rng_b = stream(spec.seed, "dgp", 5, "coefficients")
        eta1 = 1.0 + ndtri(rng_x.random((spec.N, spec.T)))
        eta2 = 1.0 + ndtri(rng_x.random((spec.N, spec.T)))
        x1 = eta1 + 0.2 * factors[0][None, :] ** 2 + 0.8 * loadings[0][:, None] ** 2
        x2 = eta2
        covariates = np.stack([x1, x2], axis=2)
        coef = -0.5 + rng_b.random((spec.N, 2))
        threshold = x1 * coef[:, 0][:, None] + x2 * coef[:, 1][:, None]
        values = threshold + vol * u

    return DgpSample(
        spec=spec,
        panel=PanelData(values),
        true_loadings=loadings,
        true_factors=factors,
        innovations=u,
        signs=signs,
        true_threshold=threshold,
        covariates=covariates,
        c_ref=sample_c_ref(loadings, factors, spec.lam),
    )


def generate_null(N: int, T: int, lam: float, seed: int = 0) -> PanelData:
    """Panel under the degenerate hypothesis: i.i.d. symmetrized Pareto cells.

    No factor structure; the volatility surface is identically one.
    """
    if N < 2 or T < 2:
        raise ArgumentError(f"need N, T >= 2, got ({N}, {T})")
    if not lam > 0:
        raise ArgumentError(f"lambda must be positive, got {lam}")
    rng_u = stream(seed, "null", "innovations")
    rng_s = stream(seed, "null", "signs")
    u = rng_u.random((N, T)) ** (-1.0 / lam)
    signs = np.where(rng_s.random((N, T)) < 0.5, -1.0, 1.0)
    return PanelData(u * signs)


def reference_constant(spec: DgpSpec, reps: int) -> ReferenceConstant:
    """Monte Carlo estimate of the limiting reference scale for a DGP.

    Averages the finite-sample lambda-mean of the volatility surface over
    ``reps`` independent loadings/factors draws.
    """
    if reps < 1:
        raise ArgumentError(f"reps must be >= 1, got {reps}")
    values = np.empty(reps)
    for rep in range(reps):
        loadings, factors = _loadings_factors(
            DgpSpec(spec.dgp, spec.N, spec.T, spec.lam, seed=spec.seed), "cref", rep
        )
        values[rep] = sample_c_ref(loadings, factors, spec.lam)
    se = float(values.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return ReferenceConstant(float(values.mean()), se, reps)
