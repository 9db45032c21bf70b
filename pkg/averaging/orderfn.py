"""Order functions delta_1, delta_2 and their moment checks.

For a separable field a = sum_k c_k phi_k(x) psi_k(y) the fluctuation sum at x is
v_{x,n} = sum_k c_k phi_k(x) B_k(n) with B_k(n) = sum_{j<n} (psi_k(y_j) - mean_k),
so one pass over the orbit serves every point of the x-grid.
"""

import logging

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from scipy.spatial import cKDTree

from averaging.density import (
    UlamOperator,
    density_operator,
    invariant_density,
    observable_means,
    sample_initial,
)
from averaging.fastslow import SlowField, num_steps
from averaging.maps import FastFamily, fast_orbit
from averaging.utils.checks import UsageError, check_epsilon, check_sample_size
from averaging.utils.rates import RateSeries, fit_rate
from averaging.utils.utils import make_rng, sup_norm
from averaging.utils.verdicts import Verdict, compare

logger = logging.getLogger()


@dataclass
class OrderFunctionSample:
    """Order functions of an ensemble of initial conditions at one eps.

    Attributes:
        eps: The parameter.
        y0: The initial conditions.
        delta1: delta_1 per orbit.
        delta2: delta_2 per orbit.
        argmax_x1: Grid point attaining delta_1, shape (m, d).
        argmax_n1: Step attaining delta_1.
        argmax_x2: Grid point attaining delta_2.
        argmax_n2: Step attaining delta_2.
        grid_gap: Bound 2 L h_x on how far each grid sup may sit below the true sup.
    """

    eps: float
    y0: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    argmax_x1: np.ndarray
    argmax_n1: np.ndarray
    argmax_x2: np.ndarray
    argmax_n2: np.ndarray
    grid_gap: float = 0.0

    @property
    def delta(self) -> np.ndarray:
        return self.delta1 + self.delta2

    @property
    def relaxed_delta(self) -> np.ndarray:
        """delta plus the grid-gap allowance of both terms."""
        return self.delta + 2.0 * self.grid_gap

    def to_records(self) -> list[dict[str, Any]]:
        y0 = np.asarray(self.y0, dtype=float)
        return [
            {
                "epsilon": self.eps,
                "y0": y0[i].tolist() if y0.ndim > 1 else float(y0[i]),
                "delta1": float(self.delta1[i]),
                "delta2": float(self.delta2[i]),
                "argmax_x": self.argmax_x1[i].tolist(),
                "argmax_n": int(self.argmax_n1[i]),
                "grid_gap": self.grid_gap,
            }
            for i in range(len(self.delta1))
        ]


def centered_observable(
    field: SlowField,
    abar_eps: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    eps: float,
    cylinder: bool = False,
) -> Callable[[np.ndarray], np.ndarray]:
    """The observable v_{eps,x}(y) = a(x, y, eps) - abar(x, eps).

    Args:
        field: The slow field.
        abar_eps: x -> abar(x, eps).
        x: The slow state, shape (d,).
        eps: The parameter.
        cylinder: Whether fast points carry a trailing (theta, y) axis.

    Returns:
        The callable y -> v(y) of shape y.shape + (d,).
    """
    x = np.asarray(x, dtype=float)
    xfac = field.x_factors(x, eps)
    mean = abar_eps(x)

    def v(y: np.ndarray) -> np.ndarray:
        prod = xfac * field.y_factors(y, cylinder=cylinder)
        return prod @ field.component_matrix - mean

    return v


def birkhoff_max(
    v: Callable[[np.ndarray], np.ndarray],
    family: FastFamily,
    eps: float,
    y0: Any,
    n_steps: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    orbit: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """max_{1<=n<=N} |v_n| of the Birkhoff sums v_n = sum_{j<n} v(y_j).

    Args:
        v: The observable, scalar or vector valued.
        family: The family.
        eps: The parameter.
        y0: The initial conditions.
        n_steps: N, floor(1/eps) by default.
        rng: Digit source for exact doubling-type orbits.
        orbit: A precomputed orbit with at least N points.

    Returns:
        The maxima and the (1-based) steps attaining them, arrays of shape (m,).
    """
    if n_steps is None:
        n_steps = num_steps(eps)
    if orbit is None:
        orbit = fast_orbit(family, eps, y0, n_steps, rng=rng)
    vals = np.asarray(v(orbit[:n_steps]), dtype=float)
    m = orbit.shape[1]
    vals = vals.reshape(n_steps, m, -1)
    sums = sup_norm(np.cumsum(vals, axis=0))
    idx = np.argmax(sums, axis=0)

    return sums[idx, np.arange(m)], idx + 1


def fluctuation_sums(
    field: SlowField, means: np.ndarray, orbit: np.ndarray, n_steps: int
) -> np.ndarray:
    """B_k(n) = sum_{j<n} (psi_k(y_j) - mean_k) for n = 0..N.

    Args:
        field: The slow field.
        means: The means psi_bar_k against the invariant measure.
        orbit: The orbit, at least N + 1 points.
        n_steps: N.

    Returns:
        Array (N + 1, m, K).
    """
    cyl = orbit.ndim == 3
    psi = field.y_factors(orbit[:n_steps], cylinder=cyl) - means
    out = np.zeros((n_steps + 1,) + psi.shape[1:], dtype=float)
    np.cumsum(psi, axis=0, out=out[1:])
    return out


def grid_sup(
    sums: np.ndarray, weights: np.ndarray, xgrid: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """max over grid and n of |sum_k B_k(n) W_k(x)|, with argmax grid point and n."""
    n1, m = sums.shape[0], sums.shape[1]
    flat = weights.reshape(len(xgrid), weights.shape[1], -1)
    _, first = np.unique(np.round(flat, 14), axis=0, return_index=True)
    best = np.full(m, -1.0)
    best_x = np.zeros((m, xgrid.shape[1]))
    best_n = np.zeros(m, dtype=int)
    for g, w in zip(first, flat[first]):
        if not np.any(w):
            vals = np.zeros((n1, m))
        else:
            vals = np.abs(sums @ w).max(axis=-1)
        vals[0] = -1.0
        n_star = np.argmax(vals, axis=0)
        top = vals[n_star, np.arange(m)]
        better = top > best
        best = np.where(better, top, best)
        best_x[better] = xgrid[g]
        best_n = np.where(better, n_star, best_n)

    return np.maximum(best, 0.0), best_x, best_n


# Size of the reference grid that measures how well a grid covers E.
COVER_POINTS = 200_000


def grid_spacing(field: SlowField, xgrid: np.ndarray) -> float:
    """The mesh h_x of an arbitrary grid on E, twice its sup-norm covering radius.

    The covering radius is measured on a fine ball grid of E with a KD-tree and
    rounded up by the half-mesh of that reference grid, so h_x never undershoots.
    A grid that leaves part of E uncovered gets a large h_x.

    Args:
        field: The slow field.
        xgrid: The grid, shape (G, d).

    Returns:
        h_x, equal to L1 / refine (up to the reference rounding) on a ball grid.
    """
    xgrid = np.atleast_2d(xgrid)
    if xgrid.size == 0:
        raise UsageError("The x-grid is empty.")
    fine = max(1, int(COVER_POINTS ** (1.0 / field.d)) // 2)
    reference = field.ball_grid(fine)
    dist, _ = cKDTree(xgrid).query(reference, p=np.inf)
    return 2.0 * float(dist.max()) + field.grid_mesh(fine)


def grid_gap(
    field: SlowField, refine: int = 16, xgrid: Optional[np.ndarray] = None
) -> float:
    """The a-posteriori gap 2 L h_x of a grid sup, zero for x-independent fields.

    h_x is L1 / refine for the ball grid and grid_spacing(field, xgrid) when a
    grid is given.
    """
    if not field.x_dependent:
        return 0.0
    if xgrid is None:
        return 2.0 * field.L * field.grid_mesh(refine)
    return 2.0 * field.L * grid_spacing(field, xgrid)


def order_function(
    field: SlowField,
    family: FastFamily,
    eps: float,
    y0: Any,
    xgrid: Optional[np.ndarray] = None,
    op: Optional[UlamOperator] = None,
    means: Optional[np.ndarray] = None,
    orbit: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    refine: int = 16,
) -> OrderFunctionSample:
    """delta_1, delta_2 as sups over the x-grid and 1 <= n <= 1/eps.

    delta_1 = max_x max_n eps |v_{eps,x,n}| and delta_2 is the same for the
    Jacobian sums Dv, in entrywise max-norm.

    Args:
        field: The slow field.
        family: The family.
        eps: The parameter, in (0, eps0).
        y0: The initial conditions.
        xgrid: The grid on E, the ball grid of the field when None.
        op: The density estimate at eps, built when neither op nor means is given.
        means: Precomputed means psi_bar_k(eps).
        orbit: A precomputed orbit with at least N + 1 points.
        rng: Digit source for exact doubling-type orbits.
        refine: Mesh refinement of the default grid.

    Returns:
        The ensemble sample.

    Raises:
        UsageError: When the grid is empty.
    """
    check_epsilon(eps, family.eps0, allow_zero=False)
    given = xgrid is not None
    xgrid = field.ball_grid(refine) if xgrid is None else np.atleast_2d(xgrid)
    if xgrid.size == 0:
        raise UsageError("The x-grid is empty.")
    gap = grid_gap(field, refine, xgrid if given else None)
    if means is None:
        if op is None:
            op = density_operator(family, eps)
        if op.stationary is None:
            invariant_density(op)
        means = observable_means(op, field)

    n = num_steps(eps)
    if orbit is None:
        orbit = fast_orbit(family, eps, y0, n, rng=rng)
    sums = fluctuation_sums(field, means, orbit, n)

    w1 = field.x_factors(xgrid, eps)[:, :, None] * field.component_matrix[None]
    d1, x1, n1 = grid_sup(sums, w1, xgrid)

    if field.x_dependent:
        dfac = field.x_factors(xgrid, eps, derivative=True)
        w2 = np.einsum(
            "gk,ki,kj->gkij", dfac, field.component_matrix, field.x_index_matrix
        ).reshape(len(xgrid), field.n_terms, -1)
        d2, x2, n2 = grid_sup(sums, w2, xgrid)
    else:
        m = sums.shape[1]
        d2, x2, n2 = np.zeros(m), np.tile(xgrid[0], (m, 1)), np.zeros(m, dtype=int)

    return OrderFunctionSample(
        eps=eps,
        y0=orbit[0],
        delta1=eps * d1,
        delta2=eps * d2,
        argmax_x1=x1,
        argmax_n1=n1,
        argmax_x2=x2,
        argmax_n2=n2,
        grid_gap=gap,
    )


def moment_scaling_check(
    field: SlowField,
    family: FastFamily,
    eps_list: Sequence[float],
    p: float,
    samples: int,
    seed: int,
    form: str = "sup-inside",
    law: str = "lebesgue",
    refine: int = 16,
) -> RateSeries:
    """Ratio of the delta_1 moment to its eps^p fluctuation bound.

    With form 'sup-inside' the ratio is
    E[delta_1^(p+d)] / (eps^p sup_x E[max_n |v_{x,n}|^p]); with 'sup-outside' it
    is E[delta_1^(p+d+1)] / (eps^p sup_x max_n E[|v_{x,n}|^p]). The constant in
    front of the bound is unknown, so only boundedness of the ratio as eps
    decreases is reported.

    Args:
        field: The slow field.
        family: The family.
        eps_list: The eps values.
        p: The moment, >= 1.
        samples: Ensemble size per eps, at least 100.
        seed: The master seed.
        form: 'sup-inside' or 'sup-outside'.
        law: Sampling law of the ensemble.
        refine: Mesh refinement of the x-grid.

    Returns:
        The series of (eps, ratio) with 'bounded' and 'max_ratio' in extra.

    Raises:
        UsageError: With fewer than 100 samples or p < 1.
    """
    check_sample_size(samples)
    if p < 1:
        raise UsageError("The moment p must be at least 1.")
    if form not in ("sup-inside", "sup-outside"):
        raise UsageError(f"Unknown moment form '{form}'.")

    exponent = p + field.d + (1 if form == "sup-outside" else 0)
    points = []
    for i, eps in enumerate(eps_list):
        rng = make_rng(seed, i)
        op = density_operator(family, eps)
        means = observable_means(op, field)
        y0 = sample_initial(family, eps, rng, samples, law=law, op=op)
        n = num_steps(eps)
        orbit = fast_orbit(family, eps, y0, n, rng=rng)
        sample = order_function(
            field, family, eps, y0, means=means, orbit=orbit, refine=refine
        )
        lhs = float(np.mean(sample.delta1**exponent))

        sums = fluctuation_sums(field, means, orbit, n)[1:]
        xgrid = field.ball_grid(refine)
        w = field.x_factors(xgrid, eps)[:, :, None] * field.component_matrix[None]
        best = 0.0
        for wx in np.unique(np.round(w, 14), axis=0):
            vn = np.abs(sums @ wx).max(axis=-1)
            if form == "sup-inside":
                val = float(np.mean(vn.max(axis=0) ** p))
            else:
                val = float(np.max(np.mean(vn**p, axis=1)))
            best = max(best, val)
        rhs = eps**p * best
        ratio = 0.0 if lhs == 0 else lhs / rhs
        logger.info(f"Moment ratio at eps={eps:g}: {ratio:.4g}")
        points.append((eps, ratio))

    if len(points) >= 3 and all(r > 0 for _, r in points):
        series = fit_rate(points, label="moment ratio")
        bounded = series.slope >= -0.25
    else:
        series = RateSeries(points=points, label="moment ratio")
        bounded = all(np.isfinite(r) for _, r in points)
    series.extra = {
        "bounded": bool(bounded),
        "max_ratio": max(r for _, r in points),
        "form": form,
        "p": p,
    }

    return series


def shift_bound_check(
    field: SlowField,
    family: FastFamily,
    eps: float,
    y0: Any,
    shifts: Sequence[int] = (1, 2, 5, 10),
    rng: Optional[np.random.Generator] = None,
    refine: int = 16,
) -> Verdict:
    """Checks |delta(T^N y) - delta(y)| <= 8 L N eps for small N.

    Both order functions use the same grid and read their orbits off one long
    orbit, so the shifted start is exactly T^N y.

    Args:
        field: The slow field.
        family: The family.
        eps: The parameter.
        y0: The initial conditions.
        shifts: The values of N, at most 10.
        rng: Digit source for exact doubling-type orbits.
        refine: Mesh refinement of the x-grid.

    Returns:
        The verdict over every (y0, N) pair.
    """
    if max(shifts) > 10:
        raise UsageError("Shifts above 10 are not checked.")
    n = num_steps(eps)
    op = density_operator(family, eps)
    means = observable_means(op, field)
    orbit = fast_orbit(family, eps, y0, n + max(shifts), rng=rng)
    base = order_function(
        field, family, eps, y0, means=means, orbit=orbit[: n + 1], refine=refine
    ).delta

    lhs, rhs = [], []
    for s in shifts:
        moved = order_function(
            field,
            family,
            eps,
            None,
            means=means,
            orbit=orbit[s : s + n + 1],
            refine=refine,
        ).delta
        lhs.append(np.abs(moved - base))
        rhs.append(np.full(len(base), 8.0 * field.L * s * eps))

    return compare("shift bound", np.concatenate(lhs), np.concatenate(rhs), atol=1e-12)
