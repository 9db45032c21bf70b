"""Ulam discretisation of the transfer operator and the quantities built on it.

The operator of a family at eps is a sparse row-stochastic matrix on a fixed
partition of the phase space; its left stationary vector gives a piecewise
constant approximation of the invariant density rho_eps, against which slow
fields are averaged.
"""

import logging

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from scipy.sparse import coo_matrix, csr_matrix, diags

from averaging.fastslow import SlowField
from averaging.maps import (
    Branch,
    FastFamily,
    apply_family,
    burn_in_points,
    fast_orbit,
    monotone_inverse,
)
from averaging.utils.checks import IterationLimitError, UsageError
from averaging.utils.utils import (
    DEFAULT_CYLINDER_BINS,
    DEFAULT_POWER_MAXITER,
    DEFAULT_POWER_TOL,
    DEFAULT_SEED,
    DEFAULT_ULAM_BINS,
    make_rng,
    mod1,
)

logger = logging.getLogger()

METHODS = ("ulam", "orbit")
# Kinds whose invariant density is estimated from orbit histograms.
ORBIT_KINDS = ("quadratic",)


@dataclass
class UlamOperator:
    """A discretised transfer operator and its stationary vector.

    Attributes:
        eps: The family parameter.
        edges: Bin edges; for the cylinder a pair (theta edges, y edges).
        matrix: The k x k row-stochastic matrix, None for orbit histograms.
        stationary: The stationary probability vector, once computed.
        cylinder: Whether bins are product cells of the cylinder.
        circle: Whether the interval coordinate is periodic.
        sampled: Whether the matrix came from point sampling.
        leaked: Fraction of sampled mass that left the phase space.
        method: 'ulam' or 'orbit'.
    """

    eps: float
    edges: tuple[np.ndarray, ...]
    matrix: Optional[csr_matrix] = None
    stationary: Optional[np.ndarray] = None
    cylinder: bool = False
    circle: bool = False
    sampled: bool = False
    leaked: float = 0.0
    method: str = "ulam"

    @property
    def k(self) -> int:
        """Number of bins or cells."""
        return int(np.prod([len(e) - 1 for e in self.edges]))

    @property
    def widths(self) -> np.ndarray:
        """Lebesgue measure of every bin (cells flattened row-major in theta)."""
        ws = [np.diff(e) for e in self.edges]
        if self.cylinder:
            return np.outer(ws[0], ws[1]).ravel()
        return ws[0]

    @property
    def centers(self) -> np.ndarray:
        """Bin midpoints, shape (k,) or (k, 2) on the cylinder."""
        cs = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        if self.cylinder:
            th, yy = np.meshgrid(cs[0], cs[1], indexing="ij")
            return np.stack([th.ravel(), yy.ravel()], axis=-1)
        return cs[0]

    @property
    def density(self) -> np.ndarray:
        """The piecewise constant density stationary / width."""
        if self.stationary is None:
            raise UsageError("The stationary vector has not been computed.")
        return self.stationary / self.widths

    def same_bins(self, other: "UlamOperator") -> bool:
        return len(self.edges) == len(other.edges) and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.edges, other.edges)
        )

    def residuals(self) -> tuple[float, float]:
        """Largest row-sum error and the L1 stationarity residual."""
        if self.matrix is None or self.stationary is None:
            raise UsageError("Residuals need the matrix and the stationary vector.")
        rows = np.abs(np.asarray(self.matrix.sum(axis=1)).ravel() - 1.0).max()
        stat = np.abs(self.matrix.T @ self.stationary - self.stationary).sum()
        return float(rows), float(stat)

    def to_frame(self) -> pd.DataFrame:
        """The (bin_center, density) table; theta and y columns on the cylinder."""
        centers = self.centers
        if self.cylinder:
            return pd.DataFrame(
                {
                    "theta": centers[:, 0],
                    "y": centers[:, 1],
                    "density": self.density,
                    "method": self.method,
                }
            )
        return pd.DataFrame(
            {"bin_center": centers, "density": self.density, "method": self.method}
        )

    def matrix_frame(self) -> pd.DataFrame:
        """The dense matrix as a dataframe, for offline inspection."""
        if self.matrix is None:
            raise UsageError(f"A {self.method} estimate has no transfer matrix.")
        return pd.DataFrame(self.matrix.toarray())


def _bin_index(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def _row_normalise(mat: csr_matrix) -> tuple[csr_matrix, np.ndarray]:
    sums = np.asarray(mat.sum(axis=1)).ravel()
    empty = sums <= 0
    inv = np.where(empty, 0.0, 1.0 / np.where(empty, 1.0, sums))
    return csr_matrix(diags(inv) @ mat), empty


def ulam_from_branches(
    branches: list[Branch], edges: np.ndarray, circle: bool = False
) -> csr_matrix:
    """Ulam matrix of a piecewise monotone 1-D map from exact preimages.

    On every branch the source edges and the preimages of the target edges cut
    the branch into pieces mapped into a single target bin; the length of each
    piece is added to (source bin, target bin).

    Args:
        branches: The monotone branches covering the interval.
        edges: The bin edges.
        circle: Whether images are read modulo one.

    Returns:
        The row-stochastic matrix.
    """
    k = len(edges) - 1
    rows, cols, data = [], [], []
    for br in branches:
        ends = br.g(np.array([br.lo, br.hi], dtype=float))
        gmin, gmax = float(ends.min()), float(ends.max())
        targets = edges[(edges > gmin) & (edges < gmax)]
        pre = monotone_inverse(br.g, br.lo, br.hi, targets)
        src = edges[(edges > br.lo) & (edges < br.hi)]
        pts = np.unique(np.concatenate([[br.lo, br.hi], pre, src]))
        lengths = np.diff(pts)
        keep = lengths > 0
        mids = 0.5 * (pts[:-1] + pts[1:])[keep]
        image = br.g(mids)
        if circle:
            image = mod1(image)
        rows.append(_bin_index(edges, mids))
        cols.append(_bin_index(edges, image))
        data.append(lengths[keep])

    mat = coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(k, k),
    ).tocsr()
    mat, empty = _row_normalise(mat)
    if np.any(empty):
        raise UsageError("The branches do not cover every bin.")

    return mat


def _sampled_matrix(
    family: FastFamily,
    eps: float,
    edges: tuple[np.ndarray, ...],
    per_cell: int,
) -> tuple[csr_matrix, float]:
    """Ulam matrix from stratified points in every cell; returns the leaked mass."""
    ps = family.phase_space
    if ps.name == "cylinder":
        side = int(np.ceil(np.sqrt(per_cell)))
        te, ye = edges
        kt, ky = len(te) - 1, len(ye) - 1
        offs = (np.arange(side) + 0.5) / side
        th = (te[:-1, None] + np.diff(te)[:, None] * offs).ravel()
        yy = (ye[:-1, None] + np.diff(ye)[:, None] * offs).ravel()
        # Points ordered by (theta bin, y bin), side x side per cell.
        th_cell = np.repeat(np.arange(kt), side)
        y_cell = np.repeat(np.arange(ky), side)
        TT, YY = np.meshgrid(th, yy, indexing="ij")
        CT, CY = np.meshgrid(th_cell, y_cell, indexing="ij")
        pts = np.stack([TT.ravel(), YY.ravel()], axis=-1)
        src = (CT * ky + CY).ravel()
        img = apply_family(family, eps, pts)
        inside = ps.contains(img)
        col = _bin_index(te, img[inside, 0]) * ky + _bin_index(ye, img[inside, 1])
        k = kt * ky
        rows, cols = src[inside], col
        total = len(pts)
    else:
        (e,) = edges
        k = len(e) - 1
        offs = (np.arange(per_cell) + 0.5) / per_cell
        pts = (e[:-1, None] + np.diff(e)[:, None] * offs).ravel()
        src = np.repeat(np.arange(k), per_cell)
        img = apply_family(family, eps, pts)
        inside = ps.contains(img)
        rows, cols = src[inside], _bin_index(e, img[inside])
        total = len(pts)

    leaked = 1.0 - inside.sum() / total
    mat = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(k, k)).tocsr()
    mat, empty = _row_normalise(mat)
    if np.any(empty):
        # Cells whose whole image escapes restart uniformly.
        restart = coo_matrix(
            (
                np.full(int(empty.sum()) * k, 1.0 / k),
                (
                    np.repeat(np.flatnonzero(empty), k),
                    np.tile(np.arange(k), int(empty.sum())),
                ),
            ),
            shape=(k, k),
        ).tocsr()
        mat = csr_matrix(mat + restart)

    return mat, float(leaked)


def make_edges(family: FastFamily, k: Optional[int] = None) -> tuple[np.ndarray, ...]:
    """Uniform bin edges for the phase space of a family.

    Args:
        family: The family.
        k: Bins per interval coordinate, a default from the environment when None.

    Returns:
        One edge array per coordinate.
    """
    ps = family.phase_space
    if ps.name == "cylinder":
        k = k or DEFAULT_CYLINDER_BINS
        return (np.linspace(0.0, 1.0, k + 1), np.linspace(ps.low, ps.high, k + 1))
    k = k or DEFAULT_ULAM_BINS
    if k < 2:
        raise UsageError("Ulam needs at least 2 bins.")
    return (np.linspace(ps.low, ps.high, k + 1),)


def ulam_matrix(
    family: FastFamily,
    eps: float,
    k: Optional[int] = None,
    per_cell: int = 256,
) -> UlamOperator:
    """Builds the Ulam operator of T_eps on k uniform bins.

    Args:
        family: The family.
        eps: The family parameter.
        k: Bins per coordinate.
        per_cell: Sample points per cell when sampling is used (at least 256).

    Returns:
        The operator, without its stationary vector.
    """
    edges = make_edges(family, k)
    ps = family.phase_space
    per_cell = max(256, per_cell)
    branches = family.branches(eps)

    if branches is not None:
        try:
            mat = ulam_from_branches(branches, edges[0], circle=ps.name == "circle")
            return UlamOperator(eps, edges, mat, circle=ps.name == "circle")
        except UsageError:
            logger.warning(
                f"Unresolved branch structure for {family.kind} at eps={eps:g},"
                " falling back to sampling."
            )
    mat, leaked = _sampled_matrix(family, eps, edges, per_cell)
    if leaked > 0:
        logger.warning(f"{leaked:.3%} of the sampled mass left the phase space.")

    return UlamOperator(
        eps,
        edges,
        mat,
        cylinder=ps.name == "cylinder",
        circle=ps.name == "circle",
        sampled=True,
        leaked=leaked,
    )


def invariant_density(
    op: UlamOperator,
    tol: float = DEFAULT_POWER_TOL,
    maxiter: int = DEFAULT_POWER_MAXITER,
) -> np.ndarray:
    """Left stationary vector by power iteration from the uniform vector.

    The stationary vector is stored on the operator.

    Args:
        op: The operator.
        tol: L1 tolerance between successive iterates.
        maxiter: The iteration budget.

    Returns:
        The piecewise constant density.

    Raises:
        IterationLimitError: When the budget runs out.
    """
    if op.stationary is not None and op.matrix is None:
        return op.density
    mt = op.matrix.T.tocsr()
    p = np.full(op.k, 1.0 / op.k)
    residual = np.inf
    for it in range(1, maxiter + 1):
        q = mt @ p
        q /= q.sum()
        residual = float(np.abs(q - p).sum())
        p = q
        if residual < tol:
            logger.debug(f"Power iteration converged in {it} steps ({residual:.2e}).")
            break
    else:
        raise IterationLimitError("Power iteration did not converge", residual, maxiter)

    op.stationary = p
    return op.density


def empirical_measure(
    family: FastFamily,
    eps: float,
    rng: np.random.Generator,
    k: Optional[int] = None,
    n_orbits: int = 64,
    n_steps: int = 100_000,
    burn_in: int = 1000,
) -> UlamOperator:
    """Orbit histogram estimate of the invariant density.

    Args:
        family: The family.
        eps: The family parameter.
        rng: The generator for the starting points.
        k: Bins per coordinate.
        n_orbits: Number of orbits.
        n_steps: Iterations recorded per orbit.
        burn_in: Discarded transient.

    Returns:
        An operator without matrix whose stationary vector is the histogram.
    """
    edges = make_edges(family, k)
    ps = family.phase_space
    starts = family.sample_lebesgue(rng, n_orbits)
    y0 = burn_in_points(family, eps, starts, burn_in, rng)
    counts = np.zeros(int(np.prod([len(e) - 1 for e in edges])))
    chunk = 10_000
    done = 0
    while done < n_steps:
        steps = min(chunk, n_steps - done)
        orbit = fast_orbit(family, eps, y0, steps, rng=rng)
        pts = orbit[1:].reshape((-1,) + orbit.shape[2:])
        pts = pts[ps.contains(pts)]
        if ps.name == "cylinder":
            idx = _bin_index(edges[0], pts[:, 0]) * (len(edges[1]) - 1)
            idx += _bin_index(edges[1], pts[:, 1])
        else:
            idx = _bin_index(edges[0], pts)
        counts += np.bincount(idx, minlength=len(counts))
        y0 = orbit[-1]
        done += steps

    logger.info(
        f"Orbit histogram for {family.kind} at eps={eps:g}: {int(counts.sum())} points."
    )
    return UlamOperator(
        eps,
        edges,
        None,
        stationary=counts / counts.sum(),
        cylinder=ps.name == "cylinder",
        circle=ps.name == "circle",
        method="orbit",
    )


def density_method(family: FastFamily) -> str:
    """'orbit' for the kinds in ORBIT_KINDS, 'ulam' otherwise."""
    return "orbit" if family.kind in ORBIT_KINDS else "ulam"


def density_operator(
    family: FastFamily,
    eps: float,
    k: Optional[int] = None,
    method: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
    n_steps: int = 100_000,
    n_orbits: int = 64,
) -> UlamOperator:
    """The density estimate of T_eps with its stationary vector.

    Every consumer of rho_eps builds it here. Kinds in ORBIT_KINDS are
    estimated from orbit histograms and never get a Ulam matrix.

    Args:
        family: The family.
        eps: The family parameter.
        k: Bins per coordinate.
        method: 'ulam' or 'orbit', density_method(family) when None.
        rng: Starting points of the orbit histogram; a fixed stream of the
            default seed when None.
        n_steps: Iterations per orbit of the histogram.
        n_orbits: Orbits of the histogram.

    Returns:
        The operator, flagged with the method used.

    Raises:
        UsageError: On an unknown method.
    """
    method = method or density_method(family)
    if method not in METHODS:
        raise UsageError(f"Unknown density method '{method}'.")
    if method == "orbit":
        rng = make_rng(DEFAULT_SEED) if rng is None else rng
        return empirical_measure(
            family, eps, rng, k=k, n_orbits=n_orbits, n_steps=n_steps
        )

    op = ulam_matrix(family, eps, k)
    invariant_density(op)
    return op


def sample_stationary(
    op: UlamOperator,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Draws points from the stationary density by inverse CDF over bins.

    Args:
        op: The operator with its stationary vector.
        rng: The generator.
        size: The number of points.

    Returns:
        The points, uniform inside the chosen bins.
    """
    if op.stationary is None:
        invariant_density(op)
    cdf = np.cumsum(op.stationary)
    cells = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
    cells = np.minimum(cells, op.k - 1)
    if op.cylinder:
        te, ye = op.edges
        ky = len(ye) - 1
        it, iy = cells // ky, cells % ky
        theta = te[it] + np.diff(te)[it] * rng.random(size)
        y = ye[iy] + np.diff(ye)[iy] * rng.random(size)
        return np.stack([theta, y], axis=-1)

    (e,) = op.edges
    pts = e[cells] + np.diff(e)[cells] * rng.random(size)
    return mod1(pts) if op.circle else pts


def sample_initial(
    family: FastFamily,
    eps: float,
    rng: np.random.Generator,
    size: int,
    law: str = "lebesgue",
    op: Optional[UlamOperator] = None,
    burn_in: Optional[int] = None,
) -> np.ndarray:
    """Draws an ensemble of initial conditions.

    Args:
        family: The family.
        eps: The family parameter.
        rng: The generator.
        size: The ensemble size.
        law: 'lebesgue', 'ulam-stationary' or 'burn-in'.
        op: The operator used by 'ulam-stationary'.
        burn_in: Transient length for 'burn-in'; the family default when None.

    Returns:
        The points.
    """
    if law == "lebesgue":
        pts = family.sample_lebesgue(rng, size)
        return burn_in_points(family, eps, pts, family.burn_in, rng)
    if law == "ulam-stationary":
        if op is None:
            op = density_operator(family, eps)
        return sample_stationary(op, rng, size)
    if law == "burn-in":
        steps = 1000 if burn_in is None else burn_in
        starts = family.sample_lebesgue(rng, size)
        return burn_in_points(family, eps, starts, steps, rng)

    raise UsageError(f"Unknown sampling law '{law}'.")


def observable_means(op: UlamOperator, field: SlowField) -> np.ndarray:
    """Midpoint-rule means of the y-factors of a field against the density.

    Args:
        op: The operator with its stationary vector.
        field: The slow field.

    Returns:
        Array (K,) of means psi_bar_k.
    """
    if op.stationary is None:
        invariant_density(op)
    return op.stationary @ field.y_factors(op.centers, cylinder=op.cylinder)


def averaged_field(
    field: SlowField,
    op: UlamOperator,
    eps: float,
    x: np.ndarray,
    jacobian: bool = False,
) -> np.ndarray:
    """abar(x, eps), the average of a(x, ., eps) against the density.

    Args:
        field: The slow field.
        op: The operator at eps.
        eps: The family parameter.
        x: Slow states, shape (..., d).
        jacobian: Return Dabar(x, eps) of shape (..., d, d) instead.

    Returns:
        The averaged field or its Jacobian.
    """
    means = observable_means(op, field)
    x = np.asarray(x, dtype=float)
    if jacobian:
        prod = field.x_factors(x, eps, derivative=True) * means
        return np.einsum(
            "...k,ki,kj->...ij", prod, field.component_matrix, field.x_index_matrix
        )
    return (field.x_factors(x, eps) * means) @ field.component_matrix


def stability_distances(
    family: FastFamily,
    field: SlowField,
    eps: float,
    k: Optional[int] = None,
    xgrid: Optional[np.ndarray] = None,
    op_eps: Optional[UlamOperator] = None,
    op_zero: Optional[UlamOperator] = None,
) -> tuple[float, float]:
    """R_eps = int |rho_eps - rho_0| dm and S_eps.

    S_eps = sup over the x-grid of |int a(x, y, 0) (dnu_eps - dnu_0)(y)| + eps.

    Args:
        family: The family.
        field: The slow field.
        eps: The family parameter.
        k: Bins per coordinate.
        xgrid: The x-grid, the ball grid of the field when None.
        op_eps: A prebuilt operator at eps.
        op_zero: A prebuilt operator at 0.

    Returns:
        The pair (R_eps, S_eps).

    Raises:
        UsageError: When the two operators use different bins.
    """
    if op_eps is None:
        op_eps = density_operator(family, eps, k)
    if op_zero is None:
        op_zero = op_eps if eps == 0 else density_operator(family, 0.0, k)
    if not op_eps.same_bins(op_zero):
        raise UsageError("The operators at eps and 0 must share their bins.")
    for op in (op_eps, op_zero):
        if op.stationary is None:
            invariant_density(op)

    r = float(np.abs(op_eps.stationary - op_zero.stationary).sum())
    xgrid = field.ball_grid() if xgrid is None else xgrid
    gap = observable_means(op_eps, field) - observable_means(op_zero, field)
    diffs = (field.x_factors(xgrid, 0.0) * gap) @ field.component_matrix
    s = float(np.abs(diffs).max()) + eps

    return r, s
