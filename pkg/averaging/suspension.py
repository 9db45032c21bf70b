"""Suspension semiflows over the fast maps and their continuous-time averaging.

A point of the suspension is (y, u) with 0 <= u < h(y). The flow moves u up the
fibre at unit speed and identifies (y, h(y)) with (T_eps y, 0). Slow fields read
the base coordinate y of the flowed point, so along a trajectory they are
piecewise constant between rollovers.
"""

import logging

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from scipy.integrate import trapezoid
from scipy.stats import norm

from averaging.density import (
    UlamOperator,
    density_operator,
    invariant_density,
    sample_stationary,
)
from averaging.fastslow import SlowField, ode_grid, solve_averaged_ode
from averaging.maps import FastFamily, apply_family, fast_orbit
from averaging.orderfn import grid_gap, grid_sup
from averaging.utils.checks import (
    DomainError,
    UsageError,
    check_finite,
    check_sample_size,
)
from averaging.utils.utils import DEFAULT_ODE_STEP, sup_norm
from averaging.utils.verdicts import Verdict, compare

logger = logging.getLogger()

ROOFS = ("constant", "sine")
CONFIDENCE = 0.99


@dataclass(frozen=True)
class SuspensionFlow:
    """A suspension semiflow over a one-dimensional fast family.

    Attributes:
        family: The base family T_eps.
        roof: 'constant' (h = value) or 'sine' (h = 1 + amplitude sin 2 pi y).
        value: The height of the constant roof.
        amplitude: The amplitude of the sine roof, in [0, 1).
        K2: The declared Lipschitz constant of the flow over times <= K1.
    """

    family: FastFamily
    roof: str = "constant"
    value: float = 1.0
    amplitude: float = 0.5
    K2: float = 8.0

    def __post_init__(self) -> None:
        if self.roof not in ROOFS:
            raise DomainError(f"Unknown roof '{self.roof}'.")
        if self.family.phase_space.dim != 1:
            raise DomainError("Suspensions are built over one-dimensional bases.")
        if self.roof == "constant" and self.value <= 0:
            raise DomainError("The roof must be positive.")
        if self.roof == "sine" and not 0 <= self.amplitude < 1:
            raise DomainError("The sine roof amplitude must lie in [0, 1).")
        if self.K2 < 1:
            raise DomainError("K2 must be at least 1.")

    @property
    def K1(self) -> float:
        """max(2, Lip h, sup h, 1 / inf h)."""
        if self.roof == "constant":
            return max(2.0, self.value, 1.0 / self.value)
        amp = self.amplitude
        return max(2.0, 2.0 * np.pi * amp, 1.0 + amp, 1.0 / (1.0 - amp))

    def height(self, y: np.ndarray) -> np.ndarray:
        """The roof h(y); the same for every eps."""
        y = np.asarray(y, dtype=float)
        if self.roof == "constant":
            return np.full(y.shape, self.value)
        return 1.0 + self.amplitude * np.sin(2.0 * np.pi * y)


def flow_from_config(table: dict[str, Any], family: FastFamily) -> SuspensionFlow:
    """Builds the flow of a [suspension] table over a family."""
    return SuspensionFlow(
        family=family,
        roof=str(table.get("roof", "constant")),
        value=float(table.get("value", 1.0)),
        amplitude=float(table.get("amplitude", 0.5)),
        K2=float(table.get("K2", 8.0)),
    )


def _flow(
    fs: SuspensionFlow, eps: float, y: Any, u: Any, t: Any
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.atleast_1d(np.asarray(y, dtype=float)).copy()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    t = np.asarray(t, dtype=float)
    y, u = np.broadcast_arrays(y, u)
    y, u = y.copy(), u.copy()
    if np.any(t < 0):
        raise UsageError("Flow times must be nonnegative.")

    h = fs.height(y)
    check_finite("roof", h)
    if np.any(u < 0) or np.any(u >= h):
        raise DomainError("Points must satisfy 0 <= u < h(y).")

    u = u + t
    laps = np.zeros(u.shape, dtype=int)
    over = u >= h
    while np.any(over):
        u[over] -= h[over]
        y[over] = apply_family(fs.family, eps, y[over])
        laps[over] += 1
        h[over] = fs.height(y[over])
        check_finite("roof", h)
        over = u >= h

    return y, u, laps


def flow(
    fs: SuspensionFlow, eps: float, y: Any, u: Any, t: Any
) -> tuple[np.ndarray, np.ndarray]:
    """The time-t map of the suspension flow.

    Args:
        fs: The flow.
        eps: The family parameter.
        y: Base points.
        u: Fibre heights with 0 <= u < h(y).
        t: Nonnegative times, broadcast against the points.

    Returns:
        The canonical representative (y', u') with 0 <= u' < h(y').

    Raises:
        DomainError: When a point is off the suspension.
        NumericError: When the roof is not finite.
    """
    y, u, _ = _flow(fs, eps, y, u, t)
    return y, u


def rollover_counts(
    fs: SuspensionFlow, eps: float, y: Any, u: Any, t: Any
) -> np.ndarray:
    """How many times the trajectory crosses the roof during time t."""
    return _flow(fs, eps, y, u, t)[2]


def lap_times(fs: SuspensionFlow, orbit: np.ndarray, u0: Any) -> np.ndarray:
    """Times T_j at which a trajectory enters the fibre over y_j.

    T_0 = 0, T_1 = h(y_0) - u_0 and T_{j+1} = T_j + h(y_j).

    Args:
        fs: The flow.
        orbit: The base orbit y_0..y_n, shape (n + 1, m).
        u0: The starting heights, shape (m,).

    Returns:
        Array (n + 1, m).
    """
    h = fs.height(orbit[:-1])
    h[0] = h[0] - np.asarray(u0, dtype=float)
    out = np.zeros(orbit.shape, dtype=float)
    np.cumsum(h, axis=0, out=out[1:])
    return out


def continuous_fluctuation_integral(
    v: Callable[[np.ndarray, np.ndarray], np.ndarray],
    fs: SuspensionFlow,
    eps: float,
    y: float,
    u: float,
    t: float,
    dt: float,
) -> np.ndarray:
    """int_0^t v(phi_s(y, u)) ds by the composite trapezoid rule.

    The integration range is split at every roof crossing, so the rule only
    sees the smooth pieces of the integrand.

    Args:
        v: The observable, called as v(y, u) on arrays.
        fs: The flow.
        eps: The family parameter.
        y: The base point.
        u: The starting height.
        t: The horizon.
        dt: Largest trapezoid step, at most K1 / 64.

    Returns:
        The integral, scalar or vector like v.
    """
    if dt <= 0 or dt > fs.K1 / 64:
        raise UsageError(f"The step must lie in (0, {fs.K1 / 64:g}].")
    if not 0 <= u < float(fs.height(y)):
        raise DomainError("Points must satisfy 0 <= u < h(y).")

    total = 0.0
    left = float(t)
    y, u = float(y), float(u)
    while left > 0:
        room = float(fs.height(y)) - u
        seg = min(room, left)
        n_sub = max(1, int(np.ceil(seg / dt)))
        s = np.linspace(u, u + seg, n_sub + 1)
        vals = np.asarray(v(np.full_like(s, y), s), dtype=float)
        total = total + trapezoid(vals, s, axis=0)
        left -= seg
        if seg == room:
            y, u = float(apply_family(fs.family, eps, y)), 0.0
        else:
            u += seg

    return np.asarray(total)


def induced_flow_observable(
    v: Callable[[np.ndarray, np.ndarray], np.ndarray],
    fs: SuspensionFlow,
    y: np.ndarray,
    nodes: int = 16,
) -> np.ndarray:
    """w(y) = int_0^{h(y)} v(y, u) du by Gauss-Legendre quadrature.

    Args:
        v: The observable on the suspension, called as v(y, u) on arrays.
        fs: The flow.
        y: Base points, shape (m,).
        nodes: Quadrature nodes per fibre.

    Returns:
        Array (m,) or (m, d).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    h = fs.height(y)
    s = 0.5 * h[:, None] * (gx + 1.0)
    vals = np.asarray(v(np.broadcast_to(y[:, None], s.shape), s), dtype=float)
    integral = np.tensordot(gw, vals, axes=(0, 1))
    return 0.5 * (h if integral.ndim == 1 else h[:, None]) * integral


def suspension_means(
    op: UlamOperator, field: SlowField, fs: SuspensionFlow
) -> np.ndarray:
    """Means of the y-factors against nu = (nu' x Lebesgue) / hbar.

    Args:
        op: The base operator with its stationary vector.
        field: The slow field.
        fs: The flow.

    Returns:
        Array (K,) of means.
    """
    if op.stationary is None:
        invariant_density(op)
    weights = op.stationary * fs.height(op.centers)
    return weights @ field.y_factors(op.centers) / weights.sum()


def suspension_measure(
    fs: SuspensionFlow, op: UlamOperator, rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draws points (y, u) of the suspension from nu.

    The base points come from nu' reweighted by h (rejection against sup h),
    the heights are uniform on the fibre.

    Args:
        fs: The flow.
        op: The base operator.
        rng: The generator.
        size: The number of points.

    Returns:
        The arrays y and u.
    """
    top = fs.K1
    ys: list[np.ndarray] = []
    have = 0
    while have < size:
        cand = sample_stationary(op, rng, 2 * (size - have) + 16)
        keep = cand[rng.random(len(cand)) * top < fs.height(cand)]
        ys.append(keep)
        have += len(keep)
    y = np.concatenate(ys)[:size]
    u = fs.height(y) * rng.random(size)
    return y, u


def _centered_factors(
    field: SlowField, orbit: np.ndarray, means: np.ndarray
) -> np.ndarray:
    return field.y_factors(orbit) - means


def _continuous_sums(
    field: SlowField,
    fs: SuspensionFlow,
    orbit: np.ndarray,
    u0: np.ndarray,
    means: np.ndarray,
    horizon: float,
) -> np.ndarray:
    """C_k(t) = int_0^t (psi_k - mean_k)(y(s)) ds at every lap time, cut at horizon."""
    times = np.minimum(lap_times(fs, orbit, u0), horizon)
    if np.any(times[-1] < horizon):
        raise UsageError("The base orbit is too short for the horizon.")
    seg = np.diff(times, axis=0)
    psi = _centered_factors(field, orbit[:-1], means)
    out = np.zeros((orbit.shape[0],) + psi.shape[1:], dtype=float)
    np.cumsum(psi * seg[..., None], axis=0, out=out[1:])
    return out


def _field_weights(
    field: SlowField, xgrid: np.ndarray, eps: float, jac: bool
) -> np.ndarray:
    if not jac:
        return field.x_factors(xgrid, eps)[:, :, None] * field.component_matrix[None]
    dfac = field.x_factors(xgrid, eps, derivative=True)
    return np.einsum(
        "gk,ki,kj->gkij", dfac, field.component_matrix, field.x_index_matrix
    ).reshape(len(xgrid), field.n_terms, -1)


def _laps_needed(fs: SuspensionFlow, horizon: float) -> int:
    return int(np.ceil(fs.K1 * horizon)) + 2


def continuous_order_function(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    orbit: np.ndarray,
    u0: np.ndarray,
    means: np.ndarray,
    xgrid: Optional[np.ndarray] = None,
    refine: int = 16,
    second: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """delta_1 and delta_2 of the flow, sups over the x-grid and 0 <= t <= 1/eps.

    Between rollovers the integrand is constant, so the running integral is
    piecewise linear and its sup is attained at a lap time or at t = 1/eps.

    Args:
        field: The slow field.
        fs: The flow.
        eps: The parameter.
        orbit: Base orbits with at least ceil(K1 / eps) + 2 steps.
        u0: The starting heights.
        means: The suspension means at eps.
        xgrid: The x-grid, the ball grid when None.
        refine: Mesh refinement of the default grid.
        second: Whether to compute delta_2.

    Returns:
        The arrays delta_1 and delta_2, shape (m,).
    """
    xgrid = field.ball_grid(refine) if xgrid is None else np.atleast_2d(xgrid)
    sums = _continuous_sums(field, fs, orbit, u0, means, 1.0 / eps)
    d1 = eps * grid_sup(sums, _field_weights(field, xgrid, eps, False), xgrid)[0]
    if second and field.x_dependent:
        d2 = eps * grid_sup(sums, _field_weights(field, xgrid, eps, True), xgrid)[0]
    else:
        d2 = np.zeros_like(d1)
    return d1, d2


def induced_order_function(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    orbit: np.ndarray,
    means: np.ndarray,
    xgrid: Optional[np.ndarray] = None,
    refine: int = 16,
) -> np.ndarray:
    """Delta_1 = sup_x sup_{1<=n<=1+K1/eps} eps |sum_{j<n} w_x(y_j)| on the base.

    The induced observable of a field reading the base coordinate is
    w_x(y) = h(y) (a(x, y) - abar(x)).
    """
    xgrid = field.ball_grid(refine) if xgrid is None else np.atleast_2d(xgrid)
    n_max = int(np.floor(1.0 + fs.K1 / eps))
    if orbit.shape[0] < n_max + 1:
        raise UsageError(f"The base orbit needs {n_max + 1} points.")
    orbit = orbit[: n_max + 1]
    psi = _centered_factors(field, orbit[:-1], means) * fs.height(orbit[:-1])[..., None]
    sums = np.zeros((n_max + 1,) + psi.shape[1:], dtype=float)
    np.cumsum(psi, axis=0, out=sums[1:])
    return eps * grid_sup(sums, _field_weights(field, xgrid, eps, False), xgrid)[0]


def _norm_margin(values: np.ndarray, q: float, z: float) -> tuple[float, float]:
    """The L^q estimate and the half-width of its confidence interval."""
    powers = np.abs(values) ** q
    mean = float(powers.mean())
    half = z * float(powers.std(ddof=1)) / np.sqrt(len(powers))
    est = mean ** (1.0 / q)
    hi = (mean + half) ** (1.0 / q)
    lo = max(mean - half, 0.0) ** (1.0 / q)
    return est, max(hi - est, est - lo)


@dataclass
class VWComparison:
    """Continuous against induced order functions at one eps.

    Attributes:
        eps: The parameter.
        q: The norm exponent.
        delta_norm: |delta_1|_{L^q(nu)} estimate.
        induced_norm: |Delta_1|_{L^q(nu')} estimate.
        margin: Sum of both confidence half-widths.
        verdict: delta_norm <= induced_norm + 4 K1 L eps + margin.
    """

    eps: float
    q: float
    delta_norm: float
    induced_norm: float
    margin: float
    verdict: Verdict


def vw_comparison(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    rng: np.random.Generator,
    size: int,
    q: float = 2.0,
    xgrid: Optional[np.ndarray] = None,
    op: Optional[UlamOperator] = None,
    refine: int = 16,
) -> VWComparison:
    """Compares |delta_1|_{L^q(nu)} with |Delta_1|_{L^q(nu')} + 4 K1 L eps.

    The two sides use independent ensembles, one drawn from nu on the
    suspension and one from nu' on the base.

    Args:
        field: The slow field.
        fs: The flow.
        eps: The parameter.
        rng: The generator.
        size: Size of each ensemble, at least 100.
        q: The norm exponent.
        xgrid: The x-grid, the ball grid when None.
        op: The base operator at eps.
        refine: Mesh refinement of the default grid.

    Returns:
        The comparison.
    """
    check_sample_size(size)
    if op is None:
        op = density_operator(fs.family, eps)
    means = suspension_means(op, field, fs)
    xgrid = field.ball_grid(refine) if xgrid is None else np.atleast_2d(xgrid)

    y, u = suspension_measure(fs, op, rng, size)
    laps = _laps_needed(fs, 1.0 / eps)
    orbit = fast_orbit(fs.family, eps, y, laps, rng=rng)
    delta1, _ = continuous_order_function(
        field, fs, eps, orbit, u, means, xgrid=xgrid, second=False
    )

    yb = sample_stationary(op, rng, size)
    n_max = int(np.floor(1.0 + fs.K1 / eps))
    base_orbit = fast_orbit(fs.family, eps, yb, n_max, rng=rng)
    induced = induced_order_function(field, fs, eps, base_orbit, means, xgrid=xgrid)

    z = float(norm.ppf(0.5 + CONFIDENCE / 2))
    lhs, m1 = _norm_margin(delta1, q, z)
    rhs, m2 = _norm_margin(induced, q, z)
    bound = rhs + 4.0 * fs.K1 * field.L * eps + m1 + m2
    verdict = compare(
        "continuous vs induced order function",
        lhs,
        bound,
        atol=1e-12,
        eps=eps,
        q=q,
        delta_norm=lhs,
        induced_norm=rhs,
    )
    logger.info(f"eps={eps:g}: |delta|_q={lhs:.4g}, |Delta|_q={rhs:.4g}")

    return VWComparison(eps, q, lhs, rhs, m1 + m2, verdict)


def induced_lipschitz_check(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    rng: np.random.Generator,
    size: int = 2000,
    op: Optional[UlamOperator] = None,
    refine: int = 16,
) -> Verdict:
    """Checks |w_x(y) - w_x(y')| <= 2 K1 K2 L |y - y'| on sampled nearby pairs."""
    if op is None:
        op = density_operator(fs.family, eps)
    means = suspension_means(op, field, fs)
    xgrid = field.ball_grid(refine)
    ps = fs.family.phase_space
    y = ps.low + (ps.length - 1e-3) * rng.random(size)
    yp = y + 1e-3 * rng.random(size)
    x = xgrid[rng.integers(0, len(xgrid), size)]
    xfac = field.x_factors(x, eps)
    mean = (xfac * means) @ field.component_matrix

    def v(yy: np.ndarray, _: np.ndarray) -> np.ndarray:
        prod = xfac[:, None] * field.y_factors(yy)
        return prod @ field.component_matrix - mean[:, None]

    w = induced_flow_observable(v, fs, y)
    wp = induced_flow_observable(v, fs, yp)
    ratios = sup_norm(w - wp) / np.maximum(np.abs(y - yp), 1e-15)
    bound = 2.0 * fs.K1 * fs.K2 * field.L
    return compare("induced observable Lipschitz", ratios, bound, atol=1e-9, eps=eps)


@dataclass
class FlowPath:
    """A continuous slow path sampled on the slow-time grid.

    Attributes:
        tau: Slow times eps t.
        y: Base coordinate of the flowed point.
        u: Fibre height of the flowed point.
        x: Slow states, (len(tau), d).
    """

    tau: np.ndarray
    y: np.ndarray
    u: np.ndarray
    x: np.ndarray

    def to_frame(self, eps: float) -> pd.DataFrame:
        """The (t, y, u, x_1..x_d) table in flow time."""
        cols: dict[str, Any] = {"t": self.tau / eps, "y": self.y, "u": self.u}
        for i in range(self.x.shape[1]):
            cols[f"x_{i + 1}"] = self.x[:, i]
        return pd.DataFrame(cols)


def continuous_slow_path(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    orbit: np.ndarray,
    u0: float,
    grid: np.ndarray,
    h_max: float = DEFAULT_ODE_STEP,
) -> FlowPath:
    """Integrates dx/dt = eps a(x, y(t), eps) along one flow trajectory.

    Slow time tau = eps t runs over the grid. The nodes are the grid merged with
    the rollover times, and each node interval, on which y is constant, is
    crossed by fourth-order Runge-Kutta with steps at most h_max in slow time.

    Args:
        field: The slow field.
        fs: The flow.
        eps: The parameter.
        orbit: The base orbit y_0..y_n of the trajectory, shape (n + 1,).
        u0: The starting height.
        grid: Increasing slow times in [0, 1] starting at 0.
        h_max: Largest slow-time step.

    Returns:
        The path on the grid.
    """
    starts = eps * lap_times(fs, orbit[:, None], np.atleast_1d(u0))[:, 0]
    if starts[-1] < grid[-1]:
        raise UsageError("The base orbit is too short for the horizon.")
    nodes = np.union1d(grid, starts[starts < grid[-1]])
    lap = np.searchsorted(starts, nodes, side="right") - 1

    x = np.empty((len(nodes), field.d))
    x[0] = field.x0
    state = field.x0.copy()
    for j in range(1, len(nodes)):
        yj = orbit[lap[j - 1]]
        span = nodes[j] - nodes[j - 1]
        sub = max(1, int(np.ceil(span / h_max - 1e-9)))
        h = span / sub

        def rhs(s: np.ndarray) -> np.ndarray:
            return field.a(s, yj, eps)

        for _ in range(sub):
            k1 = rhs(state)
            k2 = rhs(state + 0.5 * h * k1)
            k3 = rhs(state + 0.5 * h * k2)
            k4 = rhs(state + h * k3)
            state = state + h * (k1 + 2.0 * (k2 + k3) + k4) / 6.0
        x[j] = state
    check_finite("continuous slow state", x)

    keep = np.isin(nodes, grid)
    idx = lap[keep]
    u = (nodes[keep] - starts[idx]) / eps + np.where(idx == 0, u0, 0.0)
    return FlowPath(tau=nodes[keep], y=orbit[idx], u=u, x=x[keep])


def estimate_k2(
    fs: SuspensionFlow,
    eps: float,
    rng: np.random.Generator,
    size: int = 2000,
    step: float = 1e-7,
) -> float:
    """Largest sampled two-point expansion of the flow over times <= K1.

    Pairs whose trajectories sit over different laps are skipped, since their
    coordinates differ by a whole fibre while their suspension distance is small.
    """
    ps = fs.family.phase_space
    y = ps.low + (ps.length - step) * rng.random(size)
    u = fs.height(y) * rng.random(size) * (1.0 - 1e-6)
    t = fs.K1 * rng.random(size)
    yp = y + step
    up = np.minimum(u, fs.height(yp) * (1.0 - 1e-12))

    y1, u1, l1 = _flow(fs, eps, y, u, t)
    y2, u2, l2 = _flow(fs, eps, yp, up, t)
    same = l1 == l2
    dy = np.abs(y1 - y2)
    if ps.name == "circle":
        dy = np.minimum(dy, 1.0 - dy)
    dist0 = np.maximum(np.abs(y - yp), np.abs(u - up))
    ratio = np.maximum(dy, np.abs(u1 - u2))[same] / dist0[same]
    k2 = float(ratio.max(initial=1.0))
    if k2 > fs.K2:
        logger.warning(
            f"Sampled flow expansion {k2:.3g} exceeds the declared K2={fs.K2}."
        )

    return k2


def ssflow_check(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    op_eps: Optional[UlamOperator] = None,
    op_zero: Optional[UlamOperator] = None,
    xgrid: Optional[np.ndarray] = None,
) -> Verdict:
    """Checks S_eps <= 3 K2^4 L (eps + R'_eps) for the suspension measures.

    S_eps = sup_x |int a(x, ., 0) (dnu_eps - dnu_0)| + eps and R'_eps is the L1
    distance of the base densities.
    """
    if op_eps is None:
        op_eps = density_operator(fs.family, eps)
    if op_zero is None:
        op_zero = density_operator(fs.family, 0.0)
    for op in (op_eps, op_zero):
        if op.stationary is None:
            invariant_density(op)
    r_base = float(np.abs(op_eps.stationary - op_zero.stationary).sum())
    s = flow_stability(field, fs, eps, op_eps, op_zero, xgrid)
    bound = 3.0 * fs.K2**4 * field.L * (eps + r_base)
    return compare("suspension stability", s, bound, atol=1e-12, eps=eps, r_base=r_base)


def flow_stability(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    op_eps: UlamOperator,
    op_zero: UlamOperator,
    xgrid: Optional[np.ndarray] = None,
) -> float:
    """S_eps of the suspension measures."""
    xgrid = field.ball_grid() if xgrid is None else xgrid
    gap = suspension_means(op_eps, field, fs) - suspension_means(op_zero, field, fs)
    diffs = (field.x_factors(xgrid, 0.0) * gap) @ field.component_matrix
    return float(np.abs(diffs).max()) + eps


@dataclass
class FlowRun:
    """Result of a continuous-time averaging run at one eps.

    Attributes:
        eps: The parameter.
        z: sup_tau |x_hat(tau) - X(tau)| per orbit.
        delta: Grid-relaxed continuous order function per orbit.
        s_eps: The stability term.
        verdict: z <= 6 e^(2L) (delta + S_eps) on orbits with delta <= 1/2.
        paths: The sampled paths.
    """

    eps: float
    z: np.ndarray
    delta: np.ndarray
    s_eps: float
    verdict: Verdict
    paths: list[FlowPath]


def continuous_averaging_check(
    field: SlowField,
    fs: SuspensionFlow,
    eps: float,
    rng: np.random.Generator,
    size: int,
    h_max: float = DEFAULT_ODE_STEP,
    refine: int = 16,
) -> FlowRun:
    """Runs an ensemble of continuous fast-slow trajectories and checks the bound.

    The averaged ODE uses abar(x) = int a(x, ., 0) dnu_0 of the unperturbed
    suspension; the ensemble is drawn from nu_eps.

    Args:
        field: The slow field.
        fs: The flow.
        eps: The parameter.
        rng: The generator.
        size: The ensemble size.
        h_max: The slow-time step.
        refine: Mesh refinement of the x-grid.

    Returns:
        The run.
    """
    op_eps = density_operator(fs.family, eps)
    op_zero = density_operator(fs.family, 0.0)
    means_eps = suspension_means(op_eps, field, fs)
    means_zero = suspension_means(op_zero, field, fs)
    s_eps = flow_stability(field, fs, eps, op_eps, op_zero)

    def abar(x: np.ndarray) -> np.ndarray:
        return (field.x_factors(x, 0.0) * means_zero) @ field.component_matrix

    grid = ode_grid(h_max)
    X = solve_averaged_ode(abar, field.x0, grid=grid, h_max=h_max)

    y, u = suspension_measure(fs, op_eps, rng, size)
    orbit = fast_orbit(fs.family, eps, y, _laps_needed(fs, 1.0 / eps), rng=rng)
    d1, d2 = continuous_order_function(
        field, fs, eps, orbit, u, means_eps, refine=refine
    )
    delta = d1 + d2 + 2.0 * grid_gap(field, refine)

    paths = []
    z = np.empty(size)
    for i in range(size):
        path = continuous_slow_path(field, fs, eps, orbit[:, i], u[i], grid, h_max)
        z[i] = float(sup_norm(path.x - X.x).max())
        paths.append(path)

    ok = delta <= 0.5
    verdict = compare(
        "continuous averaging bound",
        z[ok],
        6.0 * np.exp(2.0 * field.L) * (delta[ok] + s_eps),
        atol=1e-9,
        eps=eps,
        orbits=int(ok.sum()),
    )
    logger.info(
        f"Flow run at eps={eps:g}: max z={z.max():.3e},"
        f" {int(ok.sum())} orbits checked"
    )

    return FlowRun(eps, z, delta, s_eps, verdict, paths)
