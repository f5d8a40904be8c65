"""Exact one-dimensional check-loss minimizers and batched kernels.

Everything here works with the upper-tail check loss
``rho_tau(x) = (1(x > 0) - tau) * x``.  The one-dimensional problems

    minimize over v:  sum_t rho_tau(e_t - v * g_t)

are piecewise linear and convex in ``v``; the exact smallest minimizer is a
breakpoint ``e_t / g_t`` found by a single subgradient scan over the sorted
breakpoints.  For positive ``g`` this reduces to the classic weighted
quantile: the smallest ratio whose cumulative weight reaches ``(1 - tau)``
of the total.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ArgumentError, InfeasibleError

# Closes the strict lower bound m < l'f so the feasible set is compact.
LOWER_MARGIN = 1e-9
# Keeps products strictly inside the upper bound against normalization roundoff.
UPPER_SLACK = 1e-12


def loss_sum(residuals, tau: float) -> float:
    """Total check loss of a residual array."""
    x = np.asarray(residuals, dtype=float)
    return float(np.sum((np.greater(x, 0.0) - tau) * x))


def _row_loss(residuals: np.ndarray, tau: float) -> np.ndarray:
    return np.sum((np.greater(residuals, 0.0) - tau) * residuals, axis=1)


def batch_line_min(e: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    """Smallest minimizer of ``sum_t rho_tau(e[i, t] - v * g_t)`` per row.

    ``g`` must have no zero entries (callers drop those columns; they do not
    depend on ``v``).  Entries of ``g`` may have either sign.
    """
    e = np.atleast_2d(np.asarray(e, dtype=float))
    g = np.asarray(g, dtype=float)
    breakpoints = e / g
    order = np.argsort(breakpoints, axis=1, kind="stable")
    sorted_b = np.take_along_axis(breakpoints, order, axis=1)
    abs_g = np.abs(g)
    cum_w = np.cumsum(abs_g[order], axis=1)
    # Subgradient just right of the j-th sorted breakpoint is
    # tau*sum(g) - sum(g+) + cum_w[j]; the first nonnegative one is the argmin.
    threshold = float(np.sum(g[g > 0.0]) - tau * np.sum(g))
    hit = cum_w >= threshold
    idx = np.argmax(hit, axis=1)
    idx[~hit[:, -1]] = e.shape[1] - 1
    return sorted_b[np.arange(e.shape[0]), idx]


def line_min(e, g, tau: float) -> float:
    """Single-row version of :func:`batch_line_min`."""
    return float(batch_line_min(np.asarray(e, dtype=float)[None, :], g, tau)[0])


def solve_scale_qr(z, f, tau: float, lower: float, upper: float) -> float:
    """Minimize ``sum_t rho_tau(z_t - l * f_t)`` over ``l`` in [lower, upper].

    All ``f_t`` must be positive.  The unconstrained minimizer is the
    (1 - tau)-weighted quantile of the ratios ``z_t / f_t`` with weights
    ``f_t`` (smallest minimizing ratio on ties), which convexity lets us
    simply clamp into the interval.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    f = np.asarray(f, dtype=float).reshape(-1)
    if z.shape != f.shape:
        raise ArgumentError(f"z and f must have equal length, got {z.size} and {f.size}")
    if not 0.0 < tau < 1.0:
        raise ArgumentError(f"tau must lie in (0, 1), got {tau}")
    if np.any(f <= 0.0):
        t = int(np.nonzero(f <= 0.0)[0][0])
        raise ArgumentError(f"f must be strictly positive; f[{t}] = {f[t]}")
    if not lower < upper:
        raise ArgumentError(f"need lower < upper, got [{lower}, {upper}]")
    return float(np.clip(line_min(z, f, tau), lower, upper))


def _coordinate_bounds(s: np.ndarray, g: np.ndarray, lower: float, upper: float):
    """Interval for v keeping ``lower <= s + v*g <= upper`` for every column.

    ``s`` is (n, T), ``g`` is (T,); returns per-row (lo, hi).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        lo_cand = np.where(
            g > 0.0, (lower - s) / g, np.where(g < 0.0, (upper - s) / g, -np.inf)
        )
        hi_cand = np.where(
            g > 0.0, (upper - s) / g, np.where(g < 0.0, (lower - s) / g, np.inf)
        )
    return lo_cand.max(axis=1), hi_cand.min(axis=1)


def _grid_candidate_min(
    E: np.ndarray, g: np.ndarray, tau: float, lo: np.ndarray, hi: np.ndarray,
    current: np.ndarray, grid: int,
) -> np.ndarray:
    """Best of ``grid`` evenly spaced feasible candidates plus the current point.

    Ties resolve toward the smallest candidate value; including the current
    point keeps the update monotone.
    """
    steps = np.linspace(0.0, 1.0, grid)
    cand = lo[:, None] + steps[None, :] * (hi - lo)[:, None]
    cand = np.concatenate([cand, current[:, None]], axis=1)
    losses = np.empty_like(cand)
    for s in range(cand.shape[1]):
        losses[:, s] = _row_loss(E - cand[:, s, None] * g[None, :], tau)
    best = losses.min(axis=1, keepdims=True)
    return np.where(losses <= best, cand, np.inf).min(axis=1)


def batch_coordinate_descent(
    Z: np.ndarray,
    F: np.ndarray,
    V: np.ndarray,
    tau: float,
    lower: float,
    upper: float,
    max_cycles: int = 50,
    rel_tol: float = 1e-9,
    grid: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Constrained check-loss regression of every row of Z on the rows of F.

    Solves, independently for each row i,

        min over v in R^r:  sum_t rho_tau(Z[i, t] - v @ F[:, t])
        s.t.                lower <= v @ F[:, t] <= upper  for all t

    by cyclic coordinate descent with exact coordinate line minimization
    (or a ``grid``-candidate search when ``grid > 0``).  ``V`` (n x r) holds
    feasible starting rows and is updated in place; returns ``(V, fitted)``.
    The per-row loss never increases.  Rows stop updating once a full cycle
    improves their loss by less than ``rel_tol`` relative.  With r = 1 and
    exact line minimization a single cycle is already exact.
    """
    n, r = V.shape
    nonzero_cols = [np.nonzero(F[j])[0] for j in range(r)]

    if r == 1 and grid == 0:
        # One exact pass: partial fits are identically zero, bounds are scalar.
        cols = nonzero_cols[0]
        g = F[0]
        if cols.size:
            with np.errstate(divide="ignore"):
                lo = np.where(g > 0, lower / g, np.where(g < 0, upper / g, -np.inf)).max()
                hi = np.where(g > 0, upper / g, np.where(g < 0, lower / g, np.inf)).min()
            lo = np.minimum(lo, V[:, 0])
            hi = np.maximum(hi, V[:, 0])
            V[:, 0] = np.clip(batch_line_min(Z[:, cols], g[cols], tau), lo, hi)
        return V, V @ F

    idx = np.arange(n)
    fitted = V @ F
    loss = _row_loss(Z - fitted, tau)
    for _ in range(max_cycles):
        Zs = Z[idx]
        Vs = V[idx]
        fitted_s = fitted[idx]
        prev = loss[idx]
        for j in range(r):
            cols = nonzero_cols[j]
            if cols.size == 0:
                continue
            g = F[j]
            partial = fitted_s - np.outer(Vs[:, j], g)
            lo, hi = _coordinate_bounds(partial, g, lower, upper)
            # Roundoff guard: the current coordinate is feasible by induction.
            lo = np.minimum(lo, Vs[:, j])
            hi = np.maximum(hi, Vs[:, j])
            if grid > 0:
                v_new = _grid_candidate_min(
                    Zs[:, cols] - partial[:, cols], g[cols], tau, lo, hi, Vs[:, j], grid
                )
            else:
                v_new = np.clip(
                    batch_line_min(Zs[:, cols] - partial[:, cols], g[cols], tau), lo, hi
                )
            Vs[:, j] = v_new
            fitted_s = partial + np.outer(Vs[:, j], g)
        fitted_s = Vs @ F  # avoids roundoff drift from repeated rank-one updates
        new_loss = _row_loss(Zs - fitted_s, tau)
        V[idx] = Vs
        fitted[idx] = fitted_s
        loss[idx] = new_loss
        improved = (prev - new_loss) > rel_tol * np.maximum(prev, 1e-300)
        idx = idx[improved]
        if idx.size == 0:
            break
    return V, fitted


def _direction_polish(
    z: np.ndarray,
    F: np.ndarray,
    v: np.ndarray,
    tau: float,
    lower: float,
    upper: float,
    n_directions: int,
    rel_tol: float,
) -> np.ndarray:
    """Exact line minimizations along extra directions after coordinate cycles.

    Cyclic coordinate descent can stall where a fitted value is pinned at a
    box face: single-coordinate moves leave the face immediately, while the
    descent direction slides along it.  Pairwise coordinate directions and
    pseudo-random directions (from a fixed Philox stream, so deterministic)
    escape those corners; each step is an exact clamped line minimization,
    so the loss never increases.
    """
    r = v.size
    rng = np.random.Generator(np.random.Philox(key=0x7A11FAC70))
    pairs = []
    for i in range(r):
        for j in range(i + 1, r):
            for s in (1.0, -1.0):
                d = np.zeros(r)
                d[i], d[j] = 1.0, s
                pairs.append(d)
    loss = loss_sum(z - v @ F, tau)
    scale = max(1.0, abs(lower), abs(upper))

    def face_tangent_basis(v):
        """Orthonormal complement of the active box-face normals."""
        fitted = v @ F
        active = (np.abs(fitted - upper) <= 1e-10 * scale) | (
            np.abs(fitted - lower) <= 1e-10 * scale
        )
        if not active.any():
            return None
        A = F[:, active]
        u_mat, s_vals, _ = np.linalg.svd(A, full_matrices=True)
        rank = int(np.sum(s_vals > 1e-12 * (s_vals[0] if s_vals.size else 1.0)))
        if rank >= r:
            return np.empty((r, 0))
        return u_mat[:, rank:]

    def try_direction(d, v, loss):
        norm = np.linalg.norm(d)
        if norm == 0.0:
            return v, loss
        d = d / norm
        g = d @ F
        nz = g != 0.0
        if not nz.any():
            return v, loss
        fitted = v @ F
        lo, hi = _coordinate_bounds(fitted[None, :], g, lower, upper)
        lo, hi = min(lo[0], 0.0), max(hi[0], 0.0)
        step = float(np.clip(line_min(z[nz] - fitted[nz], g[nz], tau), lo, hi))
        candidate = v + step * d
        cand_loss = loss_sum(z - candidate @ F, tau)
        if cand_loss < loss:
            return candidate, cand_loss
        return v, loss

    for _ in range(12):
        before = loss
        tangent = face_tangent_basis(v)
        if tangent is not None and tangent.shape[1] > 0:
            # slide along active faces: raw moves off a face are blocked there
            for col in range(tangent.shape[1]):
                v, loss = try_direction(tangent[:, col], v, loss)
            for _ in range(n_directions // 2):
                v, loss = try_direction(tangent @ tangent.T @ rng.standard_normal(r), v, loss)
        for d in pairs:
            v, loss = try_direction(d, v, loss)
        for _ in range(n_directions):
            v, loss = try_direction(rng.standard_normal(r), v, loss)
        if before - loss <= rel_tol * max(before, 1e-300):
            break
    return v


def solve_vector_qr(
    z,
    F,
    tau: float,
    lower: float,
    upper: float,
    v0,
    max_cycles: int = 50,
    rel_tol: float = 1e-9,
    polish_directions: int = 64,
):
    """Single-unit constrained check-loss regression for r >= 2 factors.

    Cyclic coordinate descent from the feasible start ``v0``; each coordinate
    update is an exact line minimization restricted to the coordinate-feasible
    interval, so the loss never increases.  Cycles stop when a full pass
    improves the loss by less than ``rel_tol`` relative, or after
    ``max_cycles``; afterwards, up to ``polish_directions`` exact line
    searches along seeded random directions clean up corner stalls.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    r, t_len = F.shape
    if z.size != t_len:
        raise ArgumentError(f"z has length {z.size}, F has {t_len} columns")
    if r < 2:
        raise ArgumentError(f"solve_vector_qr needs r >= 2 factors, got r={r}")
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if v0.size != r:
        raise ArgumentError(f"v0 has length {v0.size}, expected {r}")
    fitted0 = v0 @ F
    slack = 1e-9 * max(1.0, abs(lower), abs(upper))
    if np.any(fitted0 < lower - slack) or np.any(fitted0 > upper + slack):
        bad = int(np.argmax((fitted0 < lower - slack) | (fitted0 > upper + slack)))
        raise InfeasibleError(
            f"initial point infeasible: fitted value {fitted0[bad]} at column {bad} "
            f"outside [{lower}, {upper}]"
        )
    V = v0[None, :].copy()
    V, _ = batch_coordinate_descent(
        z[None, :], F, V, tau, lower, upper, max_cycles=max_cycles, rel_tol=rel_tol
    )
    v = V[0]
    if polish_directions > 0:
        for _ in range(3):
            before = loss_sum(z - v @ F, tau)
            v = _direction_polish(z, F, v, tau, lower, upper, polish_directions, rel_tol)
            V = v[None, :].copy()
            V, _ = batch_coordinate_descent(
                z[None, :], F, V, tau, lower, upper, max_cycles=max_cycles, rel_tol=rel_tol
            )
            v = V[0]
            after = loss_sum(z - v @ F, tau)
            if before - after <= rel_tol * max(before, 1e-300):
                break
    return v
