"""The u, w and z sequences comparing the slow iterates with the averaged flow.

u(x, n) = (eps / delta) sum_{j<n} (a(x, y_j) - abar(x)) rescales the fluctuation
sums, w_n = x_n - delta u(w_{n-1}, n) removes them from the slow iterates, and
z_n is the Euler scheme of the averaged field. The checks below compare the
three sequences with each other and with the ODE solution.
"""

import logging

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from averaging.density import density_operator, observable_means
from averaging.fastslow import (
    SlowField,
    deviation_z,
    iterate_fast_slow,
    num_steps,
    ode_grid,
    solve_averaged_ode,
)
from averaging.maps import FastFamily, fast_orbit
from averaging.orderfn import fluctuation_sums, order_function
from averaging.utils.utils import DEFAULT_ODE_STEP, sup_norm
from averaging.utils.verdicts import Verdict, compare

logger = logging.getLogger()

RK4_ALLOWANCE = 1e-8


class UFunction:
    """u(x, n) along one stored orbit, evaluated exactly at any x.

    The prefix sums B_k(n) of the centred y-factors are computed once; u at an
    off-grid x is then a K-term combination of B_k(n).

    Attributes:
        degenerate: True when delta = 0, in which case u is identically 0.
    """

    def __init__(
        self,
        field: SlowField,
        means: np.ndarray,
        orbit: np.ndarray,
        delta: float,
        eps: float,
    ) -> None:
        self.field = field
        self.eps = eps
        self.delta = float(delta)
        self.n_steps = orbit.shape[0] - 1
        self.sums = fluctuation_sums(field, means, orbit[:, None], self.n_steps)[:, 0]
        self.degenerate = self.delta <= 0.0
        if self.degenerate:
            logger.warning("delta is 0; u is set to 0 on the whole orbit.")

    def __call__(self, x: np.ndarray, n: int) -> np.ndarray:
        if self.degenerate or n == 0:
            return np.zeros(self.field.d)
        comb = self.field.x_factors(np.asarray(x, dtype=float), self.eps) * self.sums[n]
        return (self.eps / self.delta) * (comb @ self.field.component_matrix)


def u_function(
    field: SlowField,
    means: np.ndarray,
    orbit: np.ndarray,
    delta: float,
    x: np.ndarray,
    n: int,
    eps: float,
) -> np.ndarray:
    """Evaluates u(x, n) on one orbit.

    Args:
        field: The slow field.
        means: The means psi_bar_k(eps) defining abar.
        orbit: The orbit y_0..y_N.
        delta: The order function of the orbit.
        x: The slow state.
        n: The step, 0 <= n <= N.
        eps: The parameter.

    Returns:
        The value, 0 when delta = 0.
    """
    return UFunction(field, means, orbit, delta, eps)(x, n)


def w_sequence(
    x: np.ndarray, u: UFunction, abar: Callable[[np.ndarray], np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """w_0 = x_0 and w_n = x_n - delta u(w_{n-1}, n).

    Args:
        x: The slow iterates x_0..x_N, shape (N + 1, d).
        u: The u function of the same orbit.
        abar: The averaged field.

    Returns:
        The sequence w and the residuals r_n = |w_{n+1} - w_n - eps abar(w_n)|.
    """
    w = np.empty_like(x)
    w[0] = x[0]
    for n in range(1, len(x)):
        w[n] = x[n] - u.delta * u(w[n - 1], n)
    drift = np.array([abar(wn) for wn in w[:-1]])
    residuals = sup_norm(w[1:] - w[:-1] - u.eps * drift)
    return w, residuals


def euler_sequence(
    abar: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, eps: float, n: int
) -> np.ndarray:
    """z_0 = x0 and z_{k+1} = z_k + eps abar(z_k), for k < n."""
    z = np.empty((n + 1, np.size(x0)))
    z[0] = x0
    for k in range(n):
        z[k + 1] = z[k] + eps * abar(z[k])
    return z


@dataclass
class GronwallVerdict:
    """Outcome of the discrete Gronwall check.

    Attributes:
        precondition_holds: Whether b_n <= C + D sum_{m<n} b_m for every n.
        conclusion_holds: Whether b_n <= C (D + 1)^n for every n.
        precondition_slack: Largest b_n - C - D sum_{m<n} b_m.
        conclusion_slack: Largest b_n - C (D + 1)^n.
    """

    precondition_holds: bool
    conclusion_holds: bool
    precondition_slack: float
    conclusion_slack: float

    def __bool__(self) -> bool:
        return self.precondition_holds and self.conclusion_holds


def discrete_gronwall_check(
    b: np.ndarray, C: float, D: float, rtol: float = 1e-12
) -> GronwallVerdict:
    """Checks b_n <= C + D sum_{m<n} b_m and then b_n <= C (D + 1)^n.

    Args:
        b: The nonnegative sequence.
        C: The additive constant.
        D: The multiplicative constant.
        rtol: Relative roundoff allowance.

    Returns:
        The verdict with both parts reported separately.
    """
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        return GronwallVerdict(False, False, float(-b.min()), np.nan)
    prefix = np.concatenate([[0.0], np.cumsum(b)[:-1]])
    pre_rhs = C + D * prefix
    pre_slack = b - pre_rhs
    pre_ok = bool(np.all(pre_slack <= rtol * np.maximum(np.abs(pre_rhs), 1.0)))

    con_rhs = C * (D + 1.0) ** np.arange(len(b))
    con_slack = b - con_rhs
    con_ok = bool(np.all(con_slack <= rtol * np.maximum(np.abs(con_rhs), 1.0)))
    if not pre_ok:
        logger.warning("Gronwall precondition fails; the conclusion is not asserted.")

    return GronwallVerdict(
        pre_ok,
        con_ok,
        float(pre_slack.max(initial=0.0)),
        float(con_slack.max(initial=0.0)),
    )


@dataclass
class AppendixTrace:
    """The sequences of one orbit.

    Attributes:
        eps: The parameter.
        orbit: y_0..y_N.
        x: Slow iterates, (N + 1, d).
        w: The corrected iterates.
        z: The Euler iterates.
        delta: The grid-relaxed order function of the orbit.
        residuals: r_n for n < N.
        u_max: Largest |u(w_{n-1}, n)|.
        degenerate: Whether delta = 0.
    """

    eps: float
    orbit: np.ndarray
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray
    delta: float
    residuals: np.ndarray
    u_max: float = 0.0
    degenerate: bool = False

    def to_frame(self) -> pd.DataFrame:
        """The (n, x_n, w_n, z_n, r_n) table."""
        n = np.arange(len(self.x))
        cols: dict[str, Any] = {"n": n}
        for name, arr in (("x", self.x), ("w", self.w), ("z", self.z)):
            for i in range(arr.shape[1]):
                cols[f"{name}_{i + 1}"] = arr[:, i]
        cols["r"] = np.append(self.residuals, np.nan)
        return pd.DataFrame(cols)


@dataclass
class AppendixResult:
    traces: list[AppendixTrace]
    verdicts: list[Verdict]
    skipped: int = 0


def verify_appendix(
    field: SlowField,
    family: FastFamily,
    eps: float,
    y0: Any,
    rng: Optional[np.random.Generator] = None,
    freeze: bool = True,
    h_max: float = DEFAULT_ODE_STEP,
    refine: int = 16,
) -> AppendixResult:
    """Builds the traces of an ensemble and checks the inequalities between them.

    Orbits whose relaxed delta exceeds 1/2 are skipped. With L the field budget
    the checked bounds are, for all n <= N:

    * |w_n - w_0 - eps sum_{k<n} abar(w_k)| <= 4 L delta;
    * |w_{n+1} - w_n - eps abar(w_n)| <= 4 L eps delta;
    * |x_n - w_n| <= delta and |u(w_{n-1}, n)| <= 1;
    * |x_n - z_n| <= 5 delta e^(2L);
    * |X(n eps) - z_n| <= L^2 e^L eps + 1e-8;
    * sup_t |x_hat(t) - X(t)| <= 5 e^(2L) (delta + eps);
    * b_n = |w_n - z_n| with C = 4 L delta and D = eps L, through
      discrete_gronwall_check.

    Args:
        field: The slow field.
        family: The family.
        eps: The parameter.
        y0: The initial conditions.
        rng: Digit source for exact doubling-type orbits.
        freeze: Whether to run the eps-independent family.
        h_max: The ODE step.
        refine: Mesh refinement of the x-grid.

    Returns:
        The traces and verdicts.
    """
    if freeze:
        family = family.frozen()
    n = num_steps(eps)
    L = field.L
    op = density_operator(family, eps)
    means = observable_means(op, field)

    def abar(x: np.ndarray) -> np.ndarray:
        return (field.x_factors(x, eps) * means) @ field.component_matrix

    orbit = fast_orbit(family, eps, y0, n, rng=rng)
    path, _ = iterate_fast_slow(field, family, eps, None, orbit=orbit)
    deltas = order_function(
        field, family, eps, None, means=means, orbit=orbit, refine=refine
    ).relaxed_delta
    X = solve_averaged_ode(abar, field.x0, grid=ode_grid(h_max, eps), h_max=h_max)
    z_dev = deviation_z(path, X)
    Xn = X.at(path.times)
    z = euler_sequence(abar, field.x0, eps, n)

    keys = ("drift", "step", "xw", "u", "xz", "euler", "bound")
    rows: dict[str, list] = {k: [] for k in keys}
    traces = []
    skipped = 0
    gronwall: list[GronwallVerdict] = []
    for i in range(orbit.shape[1]):
        delta = float(deltas[i])
        if delta > 0.5:
            skipped += 1
            continue
        u = UFunction(field, means, orbit[:, i], delta, eps)
        x = path.samples[:, i]
        w, residuals = w_sequence(x, u, abar)
        drift = np.array([abar(wk) for wk in w[:-1]])
        partial = np.concatenate([np.zeros((1, field.d)), np.cumsum(drift, axis=0)])
        w_drift = sup_norm(w - w[0] - eps * partial)
        u_vals = np.array([sup_norm(u(w[k - 1], k)) for k in range(1, n + 1)])

        rows["drift"].append((w_drift.max(), 4 * L * delta))
        rows["step"].append((residuals.max(initial=0.0), 4 * L * eps * delta))
        rows["xw"].append((sup_norm(x - w).max(), delta))
        rows["u"].append((u_vals.max(initial=0.0), 0.0 if u.degenerate else 1.0))
        rows["xz"].append((sup_norm(x - z).max(), 5 * delta * np.exp(2 * L)))
        euler_bound = L**2 * np.exp(L) * eps + RK4_ALLOWANCE
        rows["euler"].append((sup_norm(Xn - z).max(), euler_bound))
        rows["bound"].append((z_dev[i], 5 * np.exp(2 * L) * (delta + eps)))
        gap = sup_norm(w - z)
        gronwall.append(discrete_gronwall_check(gap, 4 * L * delta, eps * L))
        traces.append(
            AppendixTrace(
                eps=eps,
                orbit=orbit[:, i],
                x=x,
                w=w,
                z=z,
                delta=delta,
                residuals=residuals,
                u_max=float(u_vals.max(initial=0.0)),
                degenerate=u.degenerate,
            )
        )

    names = {
        "drift": "w drift bound",
        "step": "w step bound",
        "xw": "x-w gap",
        "u": "u bound",
        "xz": "x-z gap",
        "euler": "euler vs ode",
        "bound": "second-order averaging bound",
    }
    verdicts = []
    for key, name in names.items():
        pairs = np.array(rows[key], dtype=float).reshape(-1, 2)
        verdicts.append(
            compare(
                name, pairs[:, 0], pairs[:, 1], atol=1e-12, eps=eps, method=op.method
            )
        )
    for part in ("precondition", "conclusion"):
        holds = [getattr(g, f"{part}_holds") for g in gronwall]
        slacks = [getattr(g, f"{part}_slack") for g in gronwall]
        verdicts.append(
            Verdict(
                name=f"w-z Gronwall {part}",
                holds=all(holds),
                max_slack=max(slacks, default=-np.inf),
                checked=len(holds),
                violations=len(holds) - sum(holds),
                details={"eps": eps, "method": op.method},
            )
        )
    if skipped:
        logger.info(f"{skipped} orbits with delta > 1/2 were skipped.")

    return AppendixResult(traces=traces, verdicts=verdicts, skipped=skipped)
