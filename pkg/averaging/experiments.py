"""Scenario files, the ensemble runner and the non-convergence construction."""

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import floor
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pandas as pd

from averaging.density import (
    UlamOperator,
    density_operator,
    invariant_density,
    observable_means,
    sample_initial,
    stability_distances,
)
from averaging.fastslow import (
    CouplingTerm,
    SlowField,
    deviation_z,
    field_from_config,
    iterate_fast_slow,
    num_steps,
    ode_grid,
    solve_averaged_ode,
)
from averaging.maps import FastFamily, family_from_config, fast_orbit
from averaging.orderfn import grid_gap, order_function
from averaging.utils.checks import (
    LabError,
    PreconditionError,
    ScenarioError,
    UsageError,
    check_sample_size,
)
from averaging.utils.rates import RateSeries, default_window, fit_rate
from averaging.utils.utils import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_ODE_STEP,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    lq_norm,
    make_rng,
    map_blocks,
    sup_norm,
)
from averaging.utils.verdicts import Verdict, compare

__all__ = [
    "Scenario",
    "ScenarioResult",
    "load_scenario",
    "run_scenario",
    "counterexample_run",
    "counterexample_ensemble",
    "fit_rate",
    "predicted_delta_exponent",
    "delta_rate_check",
    "lq_summary",
    "reference_density_gap",
]

logger = logging.getLogger()

LAWS = ("lebesgue", "ulam-stationary", "burn-in", "fixed")
STREAM_STRIDE = 1 << 20
RK4_ALLOWANCE = 1e-8


@dataclass
class Scenario:
    """A reproducible experiment read from a TOML file.

    Attributes:
        name: The scenario name.
        family: The fast family.
        field: The slow field.
        eps: Strictly decreasing parameters in (0, eps0).
        law: Sampling law of the ensemble, one of LAWS.
        size: The ensemble size.
        seed: The master seed.
        q: Exponents of the reported L^q norms.
        points: The initial conditions of the 'fixed' law.
        refine: Mesh refinement of the x-grid.
        ulam_bins: Bins of the Ulam operators, the default when None.
        h_max: The ODE step.
        threads: Worker threads of the block map.
        block_size: Orbits per block.
        out: The output directory.
        rate_window: The eps window of the rate fits.
        nu0: Whether to also run an ensemble drawn from nu_0.
        tables: The optional experiment tables, by name.
    """

    name: str
    family: FastFamily
    field: SlowField
    eps: list[float]
    law: str = "lebesgue"
    size: int = 100
    seed: int = DEFAULT_SEED
    q: list[float] = field(default_factory=lambda: [2.0])
    points: Optional[list[Any]] = None
    refine: int = 16
    ulam_bins: Optional[int] = None
    h_max: float = DEFAULT_ODE_STEP
    threads: int = DEFAULT_THREADS
    block_size: int = DEFAULT_BLOCK_SIZE
    out: Path = Path("results")
    rate_window: Optional[tuple[float, float]] = None
    nu0: bool = False
    tables: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.eps:
            raise UsageError("A scenario needs at least one eps value.")
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise UsageError("The eps values must be strictly decreasing.")
        if not all(0 < e < self.family.eps0 for e in self.eps):
            raise UsageError(f"The eps values must lie in (0, {self.family.eps0}).")
        if self.law not in LAWS:
            raise UsageError(f"Unknown sampling law '{self.law}'.")
        if self.law == "fixed":
            if not self.points:
                raise UsageError("The 'fixed' law needs a list of points.")
            self.size = len(self.points)
        if self.size < 1:
            raise UsageError("The ensemble needs at least one orbit.")

    def table(self, name: str) -> dict[str, Any]:
        return self.tables.get(name, {})


def load_scenario(
    path: Union[str, Path],
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
    threads: Optional[int] = None,
) -> Scenario:
    """Reads a scenario file; the keyword arguments override the file.

    Args:
        path: The TOML file.
        seed: The master seed.
        out: The output directory.
        threads: The number of worker threads.

    Returns:
        The scenario.

    Raises:
        UsageError: When the file is missing or malformed.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise UsageError(f"No scenario file at {path}.") from e
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"Malformed scenario file {path}: {e}") from e

    for key in ("family", "field", "run"):
        if key not in raw:
            raise UsageError(f"The scenario needs a [{key}] table.")
    run = raw["run"]
    ens = raw.get("ensemble", {})
    grid = raw.get("grid", {})
    output = raw.get("output", {})
    rates = raw.get("rates", {})
    window = rates.get("window")

    known = {"family", "field", "run", "ensemble", "grid", "output", "name"}
    try:
        scenario = Scenario(
            name=str(raw.get("name", path.stem)),
            family=family_from_config(raw["family"]),
            field=field_from_config(raw["field"]),
            eps=[float(e) for e in run.get("eps", [])],
            law=str(ens.get("law", "lebesgue")),
            size=int(ens.get("size", 100)),
            seed=int(seed if seed is not None else run.get("seed", DEFAULT_SEED)),
            q=[float(q) for q in run.get("q", [2.0])],
            points=ens.get("points"),
            refine=int(grid.get("refine", 16)),
            ulam_bins=run.get("ulam_bins"),
            h_max=float(run.get("ode_step", DEFAULT_ODE_STEP)),
            threads=int(threads or run.get("threads", DEFAULT_THREADS)),
            block_size=int(run.get("block_size", DEFAULT_BLOCK_SIZE)),
            out=Path(out or output.get("dir", f"results/{path.stem}")),
            rate_window=tuple(window) if window is not None else None,
            nu0=bool(ens.get("nu0", False)),
            tables={
                k: v for k, v in raw.items() if k not in known and isinstance(v, dict)
            },
        )
    except (KeyError, TypeError) as e:
        raise UsageError(f"Malformed scenario file {path}: {e}") from e
    logger.info(
        f"Loaded scenario {scenario.name} ({len(scenario.eps)} eps values,"
        f" seed {scenario.seed})."
    )

    return scenario


def lq_summary(values: np.ndarray, qs: Sequence[float]) -> dict[str, float]:
    """The L^q norms of a sample, keyed 'L<q>'."""
    return {f"L{q:g}": lq_norm(values, q) for q in qs}


@dataclass
class ScenarioResult:
    """Everything a scenario run produced.

    Attributes:
        scenario: The scenario.
        summary: One row per (eps, q) with norms, S_eps and R_eps.
        orbits: One row per orbit with z and the order functions.
        rates: The fitted series.
        verdicts: The inequality checks.
    """

    scenario: Scenario
    summary: pd.DataFrame
    orbits: pd.DataFrame
    rates: list[RateSeries] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)


def _ensemble(
    s: Scenario, eps: float, rng: np.random.Generator, block: slice, op: UlamOperator
) -> Any:
    if s.law == "fixed":
        pts = s.points[block]
        return [Fraction(p) if isinstance(p, str) else p for p in pts]
    size = block.stop - block.start
    return sample_initial(s.family, eps, rng, size, law=s.law, op=op)


def _run_blocks(
    s: Scenario,
    eps: float,
    index: int,
    op: UlamOperator,
    means: np.ndarray,
    X: Any,
    offset: int = 0,
) -> dict[str, np.ndarray]:
    """Runs the ensemble at one eps block by block, results in orbit order."""

    def block_run(b: int, block: slice) -> dict[str, np.ndarray]:
        stream = index * STREAM_STRIDE + offset + b
        rng = make_rng(s.seed, stream)
        try:
            y0 = _ensemble(s, eps, rng, block, op)
            orbit = fast_orbit(s.family, eps, y0, num_steps(eps), rng=rng)
            path, _ = iterate_fast_slow(s.field, s.family, eps, None, orbit=orbit)
            sample = order_function(
                s.field, s.family, eps, None, means=means, orbit=orbit, refine=s.refine
            )
        except LabError as e:
            raise ScenarioError(str(e), eps, sample=block.start) from e
        m = orbit.shape[1]
        return {
            "sample": np.arange(block.start, block.start + m),
            "stream": np.full(m, stream),
            "y0": orbit[0].reshape(m, -1)[:, 0],
            "z": deviation_z(path, X),
            "delta1": sample.delta1,
            "delta2": sample.delta2,
            "relaxed_delta": sample.relaxed_delta,
        }

    parts = map_blocks(block_run, s.size, block_size=s.block_size, threads=s.threads)
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def run_scenario(s: Scenario) -> ScenarioResult:
    """Runs the ensemble of a scenario at every eps and checks the averaging bounds.

    For each eps the slow paths, their deviation z from the averaged ODE and the
    relaxed order functions are computed; the checked inequalities are

    * z <= 6 e^(2L) (delta + S_eps) on orbits with delta <= 1/2;
    * |z|_q <= 12 e^(2L) (|delta|_q + S_eps) for every q;
    * z <= 2L on every orbit;
    * sup_t |X_eps(t) - X(t)| <= e^L A_eps with A_eps = sup_E |abar_eps - abar|;
    * with nu0 set, |z|_{L^q(nu_0)} <= 24 L e^(2L) (|delta|_q + R_eps^(1/q) + eps).

    Args:
        s: The scenario.

    Returns:
        The result bundle.

    Raises:
        ScenarioError: When a module fails at some eps.
    """
    fld, fam = s.field, s.family
    L = fld.L
    growth = np.exp(2.0 * L)
    xgrid = fld.ball_grid(s.refine)
    op_zero = density_operator(fam, 0.0, s.ulam_bins)
    means_zero = observable_means(op_zero, fld)

    def abar0(x: np.ndarray) -> np.ndarray:
        return (fld.x_factors(x, 0.0) * means_zero) @ fld.component_matrix

    summary, orbits, verdicts = [], [], []
    for i, eps in enumerate(s.eps):
        logger.info(f"[{s.name}] eps={eps:g} ({i + 1}/{len(s.eps)})")
        try:
            op = density_operator(fam, eps, s.ulam_bins)
            means = observable_means(op, fld)
            r_eps, s_eps = stability_distances(
                fam, fld, eps, xgrid=xgrid, op_eps=op, op_zero=op_zero
            )
            grid = ode_grid(s.h_max, eps)
            X = solve_averaged_ode(abar0, fld.x0, grid=grid, h_max=s.h_max)
        except LabError as e:
            raise ScenarioError(str(e), eps) from e

        res = _run_blocks(s, eps, i, op, means, X)
        z, delta = res["z"], res["relaxed_delta"]
        frame = pd.DataFrame(res).assign(epsilon=eps)
        orbits.append(frame)

        ok = delta <= 0.5
        verdicts.append(
            compare(
                "averaging bound",
                z[ok],
                6.0 * growth * (delta[ok] + s_eps),
                eps=eps,
                orbits=int(ok.sum()),
                method=op.method,
            )
        )
        verdicts.append(compare("deviation range", z, 2.0 * L, eps=eps))

        def abar_eps(x: np.ndarray) -> np.ndarray:
            return (fld.x_factors(x, eps) * means) @ fld.component_matrix

        X_eps = solve_averaged_ode(abar_eps, fld.x0, grid=grid, h_max=s.h_max)
        a_eps = float(sup_norm(abar_eps(xgrid) - abar0(xgrid)).max())
        a_eps += grid_gap(fld, s.refine)
        verdicts.append(
            compare(
                "perturbed averaged ODE",
                float(sup_norm(X_eps.x - X.x).max()),
                np.exp(L) * a_eps + RK4_ALLOWANCE,
                eps=eps,
            )
        )

        if s.nu0:
            # Ensemble drawn from nu_0, on streams disjoint from the main one.
            s0 = replace(s, law="ulam-stationary")
            res0 = _run_blocks(s0, eps, i, op_zero, means, X, offset=STREAM_STRIDE // 2)

        for q in s.q:
            z_q, d_q = lq_norm(z, q), lq_norm(delta, q)
            row = {
                "epsilon": eps,
                "q": q,
                "N": num_steps(eps),
                "z_norm": z_q,
                "delta_norm": d_q,
                "S_eps": s_eps,
                "R_eps": r_eps,
                "checked": int(ok.sum()),
                "density_method": op.method,
            }
            verdicts.append(
                compare(
                    f"L{q:g} averaging bound",
                    z_q,
                    12.0 * growth * (d_q + s_eps),
                    eps=eps,
                    q=q,
                )
            )
            if s.nu0:
                z0_q = lq_norm(res0["z"], q)
                row["z_norm_nu0"] = z0_q
                verdicts.append(
                    compare(
                        f"L{q:g} averaging bound under nu_0",
                        z0_q,
                        24.0 * L * growth * (d_q + r_eps ** (1.0 / q) + eps),
                        eps=eps,
                        q=q,
                    )
                )
            summary.append(row)

    summary_df = pd.DataFrame(summary)
    orbits_df = pd.concat(orbits, ignore_index=True)
    rates = _scenario_rates(s, summary_df)

    return ScenarioResult(s, summary_df, orbits_df, rates, verdicts)


def _scenario_rates(s: Scenario, summary: pd.DataFrame) -> list[RateSeries]:
    if len(s.eps) < 3:
        return []
    window = s.rate_window or default_window(s.eps)
    rates = []
    for q in s.q:
        rows = summary[summary["q"] == q]
        for col in ("z_norm", "delta_norm"):
            pts = list(zip(rows["epsilon"], rows[col]))
            try:
                rates.append(fit_rate(pts, window=window, label=f"{col} L{q:g}"))
            except UsageError as e:
                logger.warning(f"No fit for {col} L{q:g}: {e}")
                rates.append(RateSeries(points=pts, label=f"{col} L{q:g}"))

    return rates


def predicted_delta_exponent(p: float, q: float, d: int) -> float:
    """The eps-exponent predicted for |delta_eps|_{L^q} from tau in L^p.

    Args:
        p: The integrability exponent of the return time, > 1.
        q: The norm exponent.
        d: The slow dimension.

    Returns:
        The exponent.
    """
    if p <= 1:
        raise UsageError("The return time exponent p must exceed 1.")
    top = p + d - 1
    if p > 2:
        return (p - 1) / (2 * top) if q <= top else (p - 1) / (2 * q)
    return (p - 1) ** 2 / (p * top) if q <= top else (p - 1) ** 2 / (p * q)


def delta_rate_check(
    field: SlowField,
    family: FastFamily,
    eps_list: Sequence[float],
    p: float,
    samples: int,
    seed: int,
    law: str = "lebesgue",
    refine: int = 16,
) -> tuple[RateSeries, Verdict]:
    """Fits the eps-exponent of E[delta^(p+d-1)] and checks it is positive.

    Args:
        field: The slow field.
        family: The family.
        eps_list: At least 3 eps values.
        p: The return time exponent.
        samples: Ensemble size per eps.
        seed: The master seed.
        law: Sampling law.
        refine: Mesh refinement of the x-grid.

    Returns:
        The series and the verdict -slope <= 0.
    """
    check_sample_size(samples)
    exponent = p + field.d - 1
    points = []
    for i, eps in enumerate(eps_list):
        rng = make_rng(seed, i)
        op = density_operator(family, eps)
        y0 = sample_initial(family, eps, rng, samples, law=law, op=op)
        delta = order_function(
            field, family, eps, y0, op=op, rng=rng, refine=refine
        ).delta
        points.append((eps, float(np.mean(delta**exponent))))

    series = fit_rate(points, label=f"delta^{exponent:g} moment")
    series.extra = {"predicted": predicted_delta_exponent(p, exponent, field.d)}
    verdict = compare(
        "delta moment decay", -series.slope, 0.0, atol=0.0, slope=series.slope
    )
    return series, verdict


@dataclass
class CounterexampleRecord:
    """One constructed eps of the non-convergence construction.

    Attributes:
        delta: The target scale.
        N: floor(delta^(-1/2)).
        k: The dyadic index selected by y0.
        eps: The constructed parameter, 0 < eps <= delta.
        x_end: x_hat(1).
        frozen_from: First step after which the orbit sits at -eps^beta mod 1.
        drift: eps^beta, exactly.
    """

    delta: float
    N: int
    k: int
    eps: float
    x_end: float
    frozen_from: Optional[int]
    drift: Fraction


def _counterexample_system(beta: float) -> tuple[FastFamily, SlowField]:
    family = FastFamily("doubling-drift", {"beta": beta, "drift": 1.0}, eps0=1.0)
    field = SlowField(d=1, x0=np.zeros(1), terms=[CouplingTerm(psi="cos2pi")], L1=1.0)
    return family, field


def counterexample_run(
    beta: float, deltas: Sequence[float], y0: Union[float, str, Fraction]
) -> list[CounterexampleRecord]:
    """Builds eps from (delta, y0) so that the fast orbit lands on a fixed point.

    With N = floor(delta^(-1/2)) and k the index with
    y0 in [-delta^beta + (k-1) 2^-N, -delta^beta + k 2^-N), eps solves
    y0 = -eps^beta + (k-1) 2^-N. Then T^N y0 = -eps^beta mod 1 is fixed, and
    x_n = x_0 + eps n cos(2 pi eps^beta) after N steps drives x_hat(1) to 1.

    Args:
        beta: The drift exponent, > 0.
        deltas: Target scales.
        y0: The initial condition in [0, 1].

    Returns:
        One record per delta.

    Raises:
        PreconditionError: When delta^beta <= 2^-N.
    """
    if beta <= 0:
        raise UsageError("beta must be positive.")
    y = Fraction(y0)
    if not 0 <= y <= 1:
        raise UsageError("y0 must lie in [0, 1].")
    family, fld = _counterexample_system(beta)

    records = []
    for delta in deltas:
        n_dyad = floor(delta ** -0.5)
        if float(beta).is_integer():
            scale = Fraction(delta) ** int(beta)
        else:
            scale = Fraction(delta**beta)
        threshold = Fraction(1, 2**n_dyad)
        if scale <= threshold:
            raise PreconditionError(
                f"delta={delta:g} is too large: delta^beta <= 2^-N", float(threshold)
            )
        k = floor((y + scale) * 2**n_dyad) + 1
        drift = Fraction(k - 1, 2**n_dyad) - y
        eps = float(drift) ** (1.0 / beta)

        path, orbit = iterate_fast_slow(fld, family, eps, [y], drift=drift)
        fixed = float((-drift) % 1)
        at_fixed = np.isclose(orbit[:, 0], fixed, rtol=0.0, atol=1e-15)
        moving = np.flatnonzero(~at_fixed)
        frozen = 0 if moving.size == 0 else int(moving[-1]) + 1
        frozen = frozen if frozen < len(at_fixed) else None
        x_end = float(path.samples[-1, 0, 0])
        logger.info(
            f"delta={delta:g}: N={n_dyad}, k={k}, eps={eps:.4e}, x_hat(1)={x_end:.6f}"
        )
        records.append(
            CounterexampleRecord(delta, n_dyad, k, eps, x_end, frozen, drift)
        )

    return records


def counterexample_ensemble(
    beta: float, eps: float, drift: Fraction, size: int, rng: np.random.Generator
) -> np.ndarray:
    """z_eps of Lebesgue-random initial conditions for the same system and eps.

    The averaged field is 0, so z is the largest |x_n| along the path.
    """
    family, fld = _counterexample_system(beta)
    y0 = rng.random(size)
    path, _ = iterate_fast_slow(fld, family, eps, y0, rng=rng, drift=drift)
    return np.abs(path.samples[..., 0]).max(axis=0)


def reference_density_gap(op: UlamOperator, reference: str) -> float:
    """Distance of a density estimate from a closed form.

    'uniform' gives max |rho - 1| over the bins; 'arcsine' gives the L1 distance
    from 1 / (pi sqrt(1 - x^2)) over the interior bins.
    """
    if op.stationary is None:
        invariant_density(op)
    rho = op.density
    (edges,) = op.edges
    widths = np.diff(edges)
    if reference == "uniform":
        return float(np.abs(rho - 1.0 / (edges[-1] - edges[0])).max())
    if reference == "arcsine":
        exact = np.diff(np.arcsin(np.clip(edges, -1.0, 1.0))) / np.pi / widths
        inner = slice(1, len(rho) - 1)
        return float(np.sum(np.abs(rho[inner] - exact[inner]) * widths[inner]))

    raise UsageError(f"Unknown reference density '{reference}'.")
