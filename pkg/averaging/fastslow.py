"""Slow vector fields, the coupled fast-slow iteration and the averaged ODE."""

import logging

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from averaging.maps import FastFamily, fast_orbit
from averaging.utils.checks import (
    DomainError,
    NumericError,
    UsageError,
    check_epsilon,
    check_finite,
)
from averaging.utils.utils import DEFAULT_ODE_STEP, sup_norm
from averaging.utils.verdicts import Verdict, compare

logger = logging.getLogger()

PHI = {
    "one": (lambda s: np.ones_like(s), lambda s: np.zeros_like(s)),
    "sin": (np.sin, np.cos),
    "cos": (np.cos, lambda s: -np.sin(s)),
    "tanh": (np.tanh, lambda s: 1.0 - np.tanh(s) ** 2),
}

PSI = {
    "one": lambda y: np.ones_like(y),
    "cos2pi": lambda y: np.cos(2.0 * np.pi * y),
    "sin2pi": lambda y: np.sin(2.0 * np.pi * y),
    "linear": lambda y: y,
}


def _on_cylinder(x: np.ndarray, y: np.ndarray) -> bool:
    # Cylinder points carry a trailing (theta, y) axis, just as x carries d.
    y = np.asarray(y)
    return y.ndim == x.ndim and y.ndim > 0 and y.shape[-1] == 2


@dataclass(frozen=True)
class CouplingTerm:
    """One separable term c(eps) * phi(scale * x_j) * psi(y) of a slow field.

    Attributes:
        component: The output coordinate i the term contributes to.
        coef: The coefficient c at eps = 0.
        slope: The eps-slope of the coefficient, c(eps) = coef + eps * slope.
        phi: Name of the x-factor, one of PHI.
        x_index: The slow coordinate j read by phi.
        scale: The scale applied to x_j inside phi.
        psi: Name of the y-factor, one of PSI.
        y_coord: The fast coordinate read by psi (1 is the fibre of the cylinder).
    """

    component: int = 0
    coef: float = 1.0
    slope: float = 0.0
    phi: str = "one"
    x_index: int = 0
    scale: float = 1.0
    psi: str = "cos2pi"
    y_coord: int = 0

    def __post_init__(self) -> None:
        if self.phi not in PHI:
            raise DomainError(f"Unknown x-factor '{self.phi}'.")
        if self.psi not in PSI:
            raise DomainError(f"Unknown y-factor '{self.psi}'.")

    @property
    def x_dependent(self) -> bool:
        return self.phi != "one"


@dataclass
class BudgetReport:
    """Sampled estimates of the Lipschitz budgets of a slow field.

    Attributes:
        l1: Estimate of ||a||_Lip.
        l2: Estimate of ||Da|_E||_Lip.
        l3: Estimate of sup |a(., ., eps) - a(., ., 0)| / eps.
        jacobian_error: Largest gap between Da and central differences.
        ok: Whether every estimate respects the declared budget.
    """

    l1: float
    l2: float
    l3: float
    jacobian_error: float
    ok: bool


@dataclass
class SlowField:
    """A slow vector field a(x, y, eps) built from separable coupling terms.

    Attributes:
        d: The slow dimension.
        x0: The initial slow state.
        terms: The coupling terms.
        L1: Declared bound for ||a||_Lip.
        L2: Declared bound for ||Da|_E||_Lip.
        L3: Declared bound for the eps-Lipschitz constant.
    """

    d: int
    x0: np.ndarray
    terms: list[CouplingTerm]
    L1: float
    L2: float = 0.0
    L3: float = 0.0

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.d)
        if min(self.L1, self.L2, self.L3) < 0:
            raise DomainError("Lipschitz budgets must be nonnegative.")
        for t in self.terms:
            if not (0 <= t.component < self.d and 0 <= t.x_index < self.d):
                raise DomainError("Coupling term indices exceed the dimension.")
        self._comp = np.zeros((len(self.terms), self.d))
        self._xidx = np.zeros((len(self.terms), self.d))
        for k, t in enumerate(self.terms):
            self._comp[k, t.component] = 1.0
            self._xidx[k, t.x_index] = 1.0

    @property
    def L(self) -> float:
        """The overall budget max(L1, L2, L3)."""
        return max(self.L1, self.L2, self.L3)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def x_dependent(self) -> bool:
        """Whether any term depends on the slow variable."""
        return any(t.x_dependent for t in self.terms)

    @property
    def component_matrix(self) -> np.ndarray:
        """(K, d) indicator of the output component of every term."""
        return self._comp

    @property
    def x_index_matrix(self) -> np.ndarray:
        """(K, d) indicator of the slow coordinate read by every term."""
        return self._xidx

    def coefficients(self, eps: float) -> np.ndarray:
        return np.array([t.coef + eps * t.slope for t in self.terms])

    def x_factors(
        self, x: np.ndarray, eps: float, derivative: bool = False
    ) -> np.ndarray:
        """c_k(eps) phi_k(scale_k x_j) for every term, or its x_j-derivative.

        Args:
            x: Slow states, shape (..., d).
            eps: The family parameter.
            derivative: Whether to return the derivative factors.

        Returns:
            Array of shape (..., K).
        """
        x = np.asarray(x, dtype=float)
        coef = self.coefficients(eps)
        cols = []
        for k, t in enumerate(self.terms):
            arg = t.scale * x[..., t.x_index]
            if derivative:
                cols.append(coef[k] * t.scale * PHI[t.phi][1](arg))
            else:
                cols.append(coef[k] * PHI[t.phi][0](arg))

        return np.stack(cols, axis=-1)

    def y_factors(self, y: np.ndarray, cylinder: bool = False) -> np.ndarray:
        """psi_k(y) for every term.

        Args:
            y: Fast points, shape (...,) or (..., 2) on the cylinder.
            cylinder: Whether the last axis of y holds (theta, y).

        Returns:
            Array of shape (..., K).
        """
        y = np.asarray(y, dtype=float)
        cols = []
        for t in self.terms:
            coord = y[..., t.y_coord] if cylinder else y
            cols.append(PSI[t.psi](coord))

        return np.stack(cols, axis=-1)

    def a(self, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
        """Evaluates a(x, y, eps).

        Args:
            x: Slow states, shape (..., d).
            y: Fast points with the batch shape of x[..., 0].
            eps: The family parameter.

        Returns:
            Array of shape (..., d).
        """
        x = np.asarray(x, dtype=float)
        prod = self.x_factors(x, eps) * self.y_factors(y, _on_cylinder(x, y))
        return prod @ self._comp

    def jacobian(self, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
        """Evaluates the x-Jacobian Da(x, y, eps), shape (..., d, d)."""
        x = np.asarray(x, dtype=float)
        prod = self.x_factors(x, eps, derivative=True) * self.y_factors(
            y, _on_cylinder(x, y)
        )
        return np.einsum("...k,ki,kj->...ij", prod, self._comp, self._xidx)

    def ball_grid(self, refine: int = 16) -> np.ndarray:
        """Uniform grid on E = {|x - x0| <= L1} with mesh L1 / refine.

        Args:
            refine: Number of mesh cells per half-width.

        Returns:
            Array (G, d) of grid points.
        """
        if self.L1 == 0:
            return self.x0[None, :].copy()
        axis = np.linspace(-self.L1, self.L1, 2 * refine + 1)
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return self.x0 + np.stack([m.ravel() for m in mesh], axis=-1)

    def grid_mesh(self, refine: int = 16) -> float:
        return self.L1 / refine

    def check_budgets(
        self,
        family: FastFamily,
        rng: np.random.Generator,
        n_samples: int = 2000,
        eps_values: Optional[list[float]] = None,
    ) -> BudgetReport:
        """Sampled estimates of the declared Lipschitz budgets.

        Args:
            family: The fast family supplying y samples.
            rng: The generator.
            n_samples: The number of sampled (x, x', y) triples.
            eps_values: The eps values to sample, a few in (0, eps0) by default.

        Returns:
            The report.
        """
        if eps_values is None:
            eps_values = [0.0] + [family.eps0 * f for f in (0.01, 0.1, 0.5)]
        eps_values = [e for e in eps_values if e < family.eps0]
        h = 1e-6

        y = family.sample_lebesgue(rng, n_samples)
        spread = max(self.L1, 1.0)
        l1 = l2 = l3 = jac_err = 0.0
        for eps in eps_values:
            x = self.x0 + spread * rng.uniform(-3.0, 3.0, (n_samples, self.d))
            xp = self.x0 + spread * rng.uniform(-3.0, 3.0, (n_samples, self.d))
            ax, axp = self.a(x, y, eps), self.a(xp, y, eps)
            dist = np.maximum(sup_norm(x - xp), 1e-12)
            lip = float((sup_norm(ax - axp) / dist).max())
            l1 = max(l1, float(sup_norm(ax).max()), lip)

            xe = self.x0 + self.L1 * rng.uniform(-1.0, 1.0, (n_samples, self.d))
            xe2 = self.x0 + self.L1 * rng.uniform(-1.0, 1.0, (n_samples, self.d))
            jac, jac2 = self.jacobian(xe, y, eps), self.jacobian(xe2, y, eps)
            op = np.abs(jac).sum(axis=-1).max(axis=-1)
            diff = np.abs(jac - jac2).sum(axis=-1).max(axis=-1)
            dist_e = np.maximum(sup_norm(xe - xe2), 1e-12)
            l2 = max(l2, float(op.max()), float((diff / dist_e).max()))

            if eps > 0:
                gap = sup_norm(self.a(xe, y, eps) - self.a(xe, y, 0.0)) / eps
                l3 = max(l3, float(gap.max()))

            for j in range(self.d):
                step = np.zeros(self.d)
                step[j] = h
                fd = (self.a(xe + step, y, eps) - self.a(xe - step, y, eps)) / (2 * h)
                jac_err = max(jac_err, float(np.abs(fd - jac[..., :, j]).max()))

        slack = 1e-9
        ok = (
            l1 <= self.L1 * (1 + slack) + slack
            and l2 <= self.L2 * (1 + slack) + slack
            and l3 <= self.L3 * (1 + slack) + slack
            and jac_err <= 1e-5 * max(1.0, self.L)
        )
        if not ok:
            logger.warning(
                f"Sampled budgets ({l1:.4g}, {l2:.4g}, {l3:.4g}) exceed the declared"
                f" ({self.L1}, {self.L2}, {self.L3}) or Da disagrees ({jac_err:.2e})."
            )

        return BudgetReport(l1, l2, l3, jac_err, ok)


def field_from_config(table: dict[str, Any]) -> SlowField:
    """Builds a slow field from the [field] table of a scenario.

    Args:
        table: The table with d, x0, L1, L2, L3 and a list of terms.

    Returns:
        The slow field.
    """
    table = dict(table)
    terms = [CouplingTerm(**t) for t in table.pop("terms", [])]
    if not terms:
        raise UsageError("The [field] table needs at least one term.")
    d = int(table.get("d", 1))
    x0 = table.get("x0", [0.0] * d)
    return SlowField(
        d=d,
        x0=np.asarray(x0, dtype=float),
        terms=terms,
        L1=float(table["L1"]),
        L2=float(table.get("L2", 0.0)),
        L3=float(table.get("L3", 0.0)),
    )


@dataclass
class SlowPath:
    """Slow states x_0..x_N of an ensemble, read as the staircase x_[t/eps].

    Attributes:
        eps: The parameter.
        samples: Array (N + 1, m, d).
    """

    eps: float
    samples: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.eps * np.arange(self.n_steps + 1)

    def index_at(self, t: np.ndarray) -> np.ndarray:
        """The sample index [t / eps] in force at times t."""
        idx = np.floor(np.asarray(t, dtype=float) / self.eps * (1 + 1e-12))
        return np.clip(idx.astype(int), 0, self.n_steps)

    def x_hat(self, t: np.ndarray) -> np.ndarray:
        """The staircase path at times t, shape (len(t), m, d)."""
        return self.samples[self.index_at(t)]


@dataclass
class OdeSolution:
    """A solution X of the averaged ODE sampled on a grid.

    Attributes:
        t: The increasing grid times.
        x: Array (len(t), d).
    """

    t: np.ndarray
    x: np.ndarray

    def at(self, times: np.ndarray) -> np.ndarray:
        """The solution at grid times (nearest grid point).

        Args:
            times: Times that belong to the grid.

        Returns:
            Array (len(times), d).
        """
        idx = np.searchsorted(self.t, np.asarray(times) - 1e-13)
        idx = np.clip(idx, 0, len(self.t) - 1)
        return self.x[idx]


def num_steps(eps: float) -> int:
    """N = floor(1 / eps), robust to eps = 1 / n in floating point."""
    return int(np.floor(1.0 / eps * (1 + 1e-12)))


def iterate_fast_slow(
    field: SlowField,
    family: FastFamily,
    eps: float,
    y0: Any,
    rng: Optional[np.random.Generator] = None,
    orbit: Optional[np.ndarray] = None,
    drift: Any = None,
) -> tuple[SlowPath, np.ndarray]:
    """Iterates x_{n+1} = x_n + eps a(x_n, y_n, eps), y_{n+1} = T_eps y_n.

    Args:
        field: The slow field.
        family: The fast family.
        eps: The parameter, in (0, eps0).
        y0: The ensemble of starting points.
        rng: Digit source for exact doubling-type orbits.
        orbit: A precomputed fast orbit (N + 1, m[, 2]) to reuse.
        drift: Exact drift for the doubling-drift family.

    Returns:
        The slow path and the fast orbit y_0..y_N.

    Raises:
        NumericError: When the slow state stops being finite.
    """
    check_epsilon(eps, family.eps0, allow_zero=False)
    n = num_steps(eps)
    if orbit is None:
        orbit = fast_orbit(family, eps, y0, n, rng=rng, drift=drift)
    elif orbit.shape[0] != n + 1:
        raise UsageError(f"The orbit needs {n + 1} points, got {orbit.shape[0]}.")

    m = orbit.shape[1]
    x = np.empty((n + 1, m, field.d), dtype=float)
    x[0] = field.x0
    for i in range(n):
        x[i + 1] = x[i] + eps * field.a(x[i], orbit[i], eps)

    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.all(np.isfinite(x.reshape(n + 1, -1)), axis=1)))
        raise NumericError("Slow state overflowed", step=bad)

    return SlowPath(eps, x), orbit


def ode_grid(
    h_max: float = DEFAULT_ODE_STEP, eps: Optional[float] = None
) -> np.ndarray:
    """Uniform grid on [0, 1] with spacing <= h_max, merged with the times n eps."""
    grid = np.linspace(0.0, 1.0, int(np.ceil(1.0 / h_max)) + 1)
    if eps is not None:
        grid = np.union1d(grid, eps * np.arange(num_steps(eps) + 1))
        grid = grid[grid <= 1.0]
    return grid


def solve_averaged_ode(
    abar: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    grid: Optional[np.ndarray] = None,
    h_max: float = DEFAULT_ODE_STEP,
) -> OdeSolution:
    """Fixed-step fourth-order Runge-Kutta solution of X' = abar(X), X(0) = x0.

    Args:
        abar: The averaged field, mapping (d,) to (d,).
        x0: The initial state.
        grid: Increasing times starting at 0; a uniform grid when None.
        h_max: Largest internal step.

    Returns:
        The solution on the grid.

    Raises:
        NumericError: When the state stops being finite.
    """
    grid = ode_grid(h_max) if grid is None else np.asarray(grid, dtype=float)
    state = np.asarray(x0, dtype=float).copy()
    out = np.empty((len(grid), state.size), dtype=float)
    out[0] = state

    for j in range(1, len(grid)):
        span = grid[j] - grid[j - 1]
        sub = max(1, int(np.ceil(span / h_max - 1e-9)))
        h = span / sub
        for _ in range(sub):
            k1 = abar(state)
            k2 = abar(state + 0.5 * h * k1)
            k3 = abar(state + 0.5 * h * k2)
            k4 = abar(state + h * k3)
            state = state + h * (k1 + 2.0 * (k2 + k3) + k4) / 6.0
        check_finite("ODE state", state, step=j)
        out[j] = state

    return OdeSolution(grid, out)


def deviation_z(path: SlowPath, X: OdeSolution) -> np.ndarray:
    """z_eps = sup_t |x_hat(t) - X(t)| for every orbit of the ensemble.

    The sup runs over the ODE grid times and the slow sample times, and at each
    sample time n eps also over the left limit x_{n-1}.

    Args:
        path: The slow path.
        X: The ODE solution, its grid containing the times n eps.

    Returns:
        Array (m,) of deviations.
    """
    t = X.t[X.t <= 1.0]
    xs = X.x[: len(t)]
    gaps = sup_norm(path.x_hat(t) - xs[:, None, :])
    z = gaps.max(axis=0)

    n = path.n_steps
    if n >= 1:
        xn = X.at(path.times[1:])
        left = sup_norm(path.samples[:-1] - xn[:, None, :])
        z = np.maximum(z, left.max(axis=0))

    return z


def slow_increment_check(path: SlowPath, field: SlowField) -> Verdict:
    """Checks |x_{n+1} - x_n| <= eps L1 on every step."""
    steps = sup_norm(np.diff(path.samples, axis=0)).ravel()
    return compare("slow increment", steps, path.eps * field.L1, atol=1e-12)
