"""Fast map families T_eps and their orbits.

Every family is a pure point map evaluated on numpy arrays. Interval and circle
families act on arrays of shape (m,), the Viana cylinder on arrays of shape
(m, 2) holding (theta, y).
"""

import logging

from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import floor
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from averaging.utils.checks import DomainError, check_epsilon, check_interval
from averaging.utils.utils import mod1

logger = logging.getLogger()

KINDS = (
    "doubling-drift",
    "smooth-expanding-torus",
    "piecewise-expanding-interval",
    "lsv-intermittent",
    "quadratic",
    "viana",
)

MANTISSA_BITS = 53
_SCALE = float(2**MANTISSA_BITS)

Point = Union[float, np.ndarray]


@dataclass(frozen=True)
class PhaseSpace:
    """Descriptor of the phase space M of a family.

    Attributes:
        name: One of 'interval', 'circle' or 'cylinder'.
        low: Lower end of the (last) interval coordinate.
        high: Upper end of the (last) interval coordinate.
    """

    name: str
    low: float = 0.0
    high: float = 1.0

    @property
    def dim(self) -> int:
        """Number of coordinates of a point."""
        return 2 if self.name == "cylinder" else 1

    @property
    def length(self) -> float:
        """Lebesgue length of the interval or circle coordinate."""
        return self.high - self.low

    def contains(self, y: np.ndarray) -> np.ndarray:
        """Elementwise membership test.

        Args:
            y: Points, shape (m,) or (m, 2) for the cylinder.

        Returns:
            Boolean array of shape (m,).
        """
        y = np.asarray(y, dtype=float)
        if self.name == "circle":
            return (y >= 0.0) & (y < 1.0)
        if self.name == "cylinder":
            return (
                (y[..., 0] >= 0.0)
                & (y[..., 0] < 1.0)
                & (y[..., 1] >= self.low)
                & (y[..., 1] <= self.high)
            )
        return (y >= self.low) & (y <= self.high)


@dataclass(frozen=True)
class Branch:
    """A monotone continuous branch g of a 1-D map on [lo, hi].

    For circle maps g is the lift minus an integer, so its values stay in
    [0, 1].
    """

    lo: float
    hi: float
    g: Callable[[np.ndarray], np.ndarray]


def lsv_apply(a: float, y: Point) -> Point:
    """One step of the intermittent map with neutral fixed point at 0.

    The left branch is evaluated as y + 2^a y^(1+a), which avoids cancellation
    near 0.

    Args:
        a: The intermittency exponent, in (0, 1).
        y: Points in [0, 1].

    Returns:
        The images, in [0, 1].

    Raises:
        DomainError: When a or y is out of range.
    """
    check_interval("a", a, 0.0, 1.0, closed=(False, False))
    check_interval("y", y, 0.0, 1.0)
    y_arr = np.asarray(y, dtype=float)
    left = np.minimum(y_arr + 2.0**a * y_arr ** (1.0 + a), 1.0)
    out = np.where(y_arr <= 0.5, left, 2.0 * y_arr - 1.0)

    return out if np.ndim(y) else float(out)


def doubling_drift_apply(
    beta: float, eps: float, y: Point, drift: float = 1.0
) -> Point:
    """One step of y -> 2y + drift * eps^beta mod 1.

    Args:
        beta: The drift exponent, > 0.
        eps: The family parameter, >= 0.
        y: Points in [0, 1).
        drift: Scale of the drift term.

    Returns:
        The images, in [0, 1).
    """
    if beta <= 0:
        raise DomainError("beta must be positive.")
    check_interval("epsilon", eps, 0.0, np.inf)
    check_interval("y", y, 0.0, 1.0, closed=(True, False))
    out = mod1(2.0 * np.asarray(y, dtype=float) + drift * eps**beta)

    return out if np.ndim(y) else float(out)


def quadratic_apply(a: float, x: Point) -> Point:
    """One step of the quadratic map x -> 1 - a x^2 on [-1, 1].

    Args:
        a: The parameter, in [-2, 2].
        x: Points in [-1, 1].

    Returns:
        The images. They stay in [-1, 1] for a in [0, 2].
    """
    check_interval("a", a, -2.0, 2.0)
    check_interval("x", x, -1.0, 1.0)
    out = 1.0 - a * np.asarray(x, dtype=float) ** 2

    return out if np.ndim(x) else float(out)


def viana_apply(a0: float, a: float, point: np.ndarray) -> np.ndarray:
    """One step of the Viana skew product (16 theta mod 1, a0 + a sin 2 pi theta - y^2).

    Args:
        a0: The base parameter of the quadratic fibre map.
        a: The coupling amplitude.
        point: Array (..., 2) of (theta, y).

    Returns:
        The images, same shape.
    """
    point = np.asarray(point, dtype=float)
    theta, y = point[..., 0], point[..., 1]
    return np.stack(
        [mod1(16.0 * theta), a0 + a * np.sin(2.0 * np.pi * theta) - y**2], axis=-1
    )


def torus_apply(kappa: float, y: Point) -> Point:
    """One step of the smooth expanding circle map 2y + kappa sin(2 pi y)/(2 pi) mod 1.

    Args:
        kappa: The perturbation size, |kappa| < 1.
        y: Points in [0, 1).

    Returns:
        The images, in [0, 1).
    """
    check_interval("kappa", kappa, -1.0, 1.0, closed=(False, False))
    y_arr = np.asarray(y, dtype=float)
    out = mod1(2.0 * y_arr + kappa * np.sin(2.0 * np.pi * y_arr) / (2.0 * np.pi))

    return out if np.ndim(y) else float(out)


def tent_apply(c: float, y: Point) -> Point:
    """One step of the skew tent map c - (1 + c)|y| on [-1, 1].

    Args:
        c: The critical value, in (0, 1].
        y: Points in [-1, 1].

    Returns:
        The images, in [-1, c].
    """
    check_interval("c", c, 0.0, 1.0, closed=(False, True))
    out = c - (1.0 + c) * np.abs(np.asarray(y, dtype=float))

    return out if np.ndim(y) else float(out)


def monotone_inverse(
    g: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    targets: np.ndarray,
    iterations: int = 64,
) -> np.ndarray:
    """Solves g(y) = target on [lo, hi] by vectorised bisection."""
    increasing = g(np.array([hi]))[0] >= g(np.array([lo]))[0]
    left = np.full(targets.shape, lo, dtype=float)
    right = np.full(targets.shape, hi, dtype=float)
    for _ in range(iterations):
        mid = 0.5 * (left + right)
        below = g(mid) < targets
        go_right = below if increasing else ~below
        left = np.where(go_right, mid, left)
        right = np.where(go_right, right, mid)

    return 0.5 * (left + right)


@dataclass(frozen=True)
class FastFamily:
    """A parameterised family eps -> T_eps of fast maps.

    Attributes:
        kind: One of KINDS.
        params: The schedule coefficients of the kind (see schedule()).
        eps0: Exclusive upper bound of admissible eps.
        freeze: When True every eps uses the eps = 0 parameters.
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    eps0: float = 1.0
    freeze: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"Unknown family kind '{self.kind}'.")
        # Validates the reference map.
        self.schedule(0.0)

    @property
    def phase_space(self) -> PhaseSpace:
        """The phase space M the family acts on."""
        if self.kind in ("doubling-drift", "smooth-expanding-torus"):
            return PhaseSpace("circle")
        if self.kind == "lsv-intermittent":
            return PhaseSpace("interval", 0.0, 1.0)
        if self.kind == "viana":
            low, high = self.params.get("box", (-2.0, 2.0))
            return PhaseSpace("cylinder", float(low), float(high))
        return PhaseSpace("interval", -1.0, 1.0)

    def frozen(self) -> "FastFamily":
        """The eps-independent family with the parameters of T_0."""
        return replace(self, freeze=True)

    def schedule(self, eps: float) -> dict[str, float]:
        """The map parameters at eps.

        Args:
            eps: The family parameter.

        Returns:
            The parameters of T_eps.

        Raises:
            DomainError: When eps or the scheduled parameter is out of range.
        """
        check_epsilon(eps, self.eps0)
        e = 0.0 if self.freeze else float(eps)
        p = self.params

        if self.kind == "doubling-drift":
            beta = float(p.get("beta", 1.0))
            if beta <= 0:
                raise DomainError("beta must be positive.")
            return {"c": float(p.get("drift", 1.0)) * e**beta}

        if self.kind == "smooth-expanding-torus":
            kappa = float(p.get("kappa0", 0.25)) + e * float(p.get("slope", 0.0))
            check_interval("kappa", kappa, -1.0, 1.0, closed=(False, False))
            return {"kappa": kappa}

        if self.kind == "piecewise-expanding-interval":
            c = float(p.get("c0", 0.9)) + e * float(p.get("slope", 0.0))
            check_interval("c", c, 0.0, 1.0, closed=(False, True))
            return {"c": c}

        if self.kind == "lsv-intermittent":
            a = float(p.get("a0", 0.5)) + e * float(p.get("slope", 1.0))
            check_interval("a_eps", a, 0.0, 1.0, closed=(False, False))
            return {"a": a}

        if self.kind == "quadratic":
            if "a_table" in p:
                table = np.asarray(p["a_table"], dtype=float)
                a = float(np.interp(e, table[:, 0], table[:, 1]))
            else:
                a = float(p.get("a0", 2.0)) + e * float(p.get("slope", 0.0))
            check_interval("a_eps", a, 0.0, 2.0)
            return {"a": a}

        # viana
        if "a0" not in p:
            raise DomainError("The Viana family needs an explicit a0.")
        alpha = float(p.get("alpha", 0.01)) + e * float(p.get("slope", 0.0))
        return {"a0": float(p["a0"]), "alpha": alpha}

    @property
    def burn_in(self) -> int:
        """Transient iterations discarded before statistics are collected."""
        default = 1000 if self.kind == "viana" else 0
        return int(self.params.get("burn_in", default))

    def branches(self, eps: float) -> Optional[list[Branch]]:
        """The monotone branches of T_eps, None for the cylinder.

        Args:
            eps: The family parameter.

        Returns:
            The branches covering the phase space.
        """
        s = self.schedule(eps)

        if self.kind == "doubling-drift":
            c = float(mod1(s["c"]))
            cuts = [0.0, (1.0 - c) / 2.0, (2.0 - c) / 2.0, 1.0]
            out = []
            for k in range(3):
                lo, hi = cuts[k], min(cuts[k + 1], 1.0)
                if hi > lo:
                    out.append(Branch(lo, hi, lambda y, k=k: 2.0 * y + c - k))
            return out

        if self.kind == "smooth-expanding-torus":
            kappa = s["kappa"]

            def lift(y: np.ndarray) -> np.ndarray:
                return 2.0 * y + kappa * np.sin(2.0 * np.pi * y) / (2.0 * np.pi)

            return [Branch(0.0, 0.5, lift), Branch(0.5, 1.0, lambda y: lift(y) - 1.0)]

        if self.kind == "piecewise-expanding-interval":
            c = s["c"]
            return [
                Branch(-1.0, 0.0, lambda y: c + (1.0 + c) * y),
                Branch(0.0, 1.0, lambda y: c - (1.0 + c) * y),
            ]

        if self.kind == "lsv-intermittent":
            a = s["a"]
            return [
                Branch(
                    0.0, 0.5, lambda y: np.minimum(y + 2.0**a * y ** (1.0 + a), 1.0)
                ),
                Branch(0.5, 1.0, lambda y: 2.0 * y - 1.0),
            ]

        if self.kind == "quadratic":
            a = s["a"]
            return [
                Branch(-1.0, 0.0, lambda x: 1.0 - a * x**2),
                Branch(0.0, 1.0, lambda x: 1.0 - a * x**2),
            ]

        return None

    def sample_lebesgue(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform draws from the phase space.

        Args:
            rng: The generator.
            size: The number of points.

        Returns:
            The points.
        """
        ps = self.phase_space
        if ps.name == "cylinder":
            theta = rng.random(size)
            y = ps.low + ps.length * rng.random(size)
            return np.stack([theta, y], axis=-1)

        return ps.low + ps.length * rng.random(size)


def apply_family(family: FastFamily, eps: float, y: Point) -> Point:
    """One step of T_eps.

    Args:
        family: The family.
        eps: The family parameter, in [0, eps0).
        y: Points in the phase space.

    Returns:
        The images.

    Raises:
        DomainError: When eps is out of range.
    """
    s = family.schedule(eps)
    kind = family.kind

    if kind == "doubling-drift":
        check_interval("y", y, 0.0, 1.0, closed=(True, False))
        out = mod1(2.0 * np.asarray(y, dtype=float) + s["c"])
        return out if np.ndim(y) else float(out)
    if kind == "smooth-expanding-torus":
        return torus_apply(s["kappa"], y)
    if kind == "piecewise-expanding-interval":
        return tent_apply(s["c"], y)
    if kind == "lsv-intermittent":
        return lsv_apply(s["a"], y)
    if kind == "quadratic":
        return quadratic_apply(s["a"], y)

    return viana_apply(s["a0"], s["alpha"], y)


def _to_fraction(value: Union[float, Fraction]) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(float(value))


def _frac(q: Fraction) -> Fraction:
    return q - floor(q)


def dyadic_orbit(
    y0: Union[Sequence[Union[float, Fraction]], np.ndarray],
    drift: Union[float, Fraction],
    n_steps: int,
    rng: Optional[np.random.Generator] = None,
    shift_bits: int = 1,
) -> np.ndarray:
    """Orbits of y -> 2^s y + drift mod 1 without floating-point collapse.

    With w = y + drift/(2^s - 1) mod 1 the map becomes the plain shift
    w -> 2^s w mod 1, which drops s leading binary digits per step. The state w
    is kept as a multiple of 2^-53 and the s digits that enter at the bottom
    are supplied explicitly, so every step is exact in double precision:

    * Fraction starting points contribute the digits of their exact binary
      expansion;
    * float starting points are truncated to 53 digits and continued with
      random digits when rng is given (a Lebesgue-random real with that
      rounding), with zeros otherwise.

    Args:
        y0: Starting points in [0, 1).
        drift: The additive constant.
        n_steps: The number of steps.
        rng: Source of trailing digits for float starting points.
        shift_bits: s, the number of digits shifted out per step.

    Returns:
        Array (n_steps + 1, m) of orbit points in [0, 1).
    """
    base = 2**shift_bits
    offset = _to_fraction(drift) / (base - 1)
    starts = list(np.atleast_1d(np.asarray(y0, dtype=object)))
    m = len(starts)
    exact = [isinstance(s, Fraction) for s in starts]

    w = np.empty(m, dtype=float)
    tails: list[Optional[Fraction]] = []
    for i, s in enumerate(starts):
        w_exact = _frac(_to_fraction(s) + offset)
        top = floor(w_exact * 2**MANTISSA_BITS)
        w[i] = top / _SCALE
        tails.append(w_exact * 2**MANTISSA_BITS - top if exact[i] else None)

    digits = np.zeros((n_steps, m), dtype=float)
    if rng is not None and not all(exact):
        digits[:, ~np.asarray(exact)] = rng.integers(
            0, base, size=(n_steps, m - int(sum(exact)))
        )
    for i, tail in enumerate(tails):
        if tail is None:
            continue
        for n in range(n_steps):
            tail = tail * base
            d = floor(tail)
            digits[n, i] = d
            tail -= d
            if tail == 0:
                break

    off = float(offset)
    orbit = np.empty((n_steps + 1, m), dtype=float)
    orbit[0] = mod1(w - off)
    for n in range(n_steps):
        shifted = base * w
        w = shifted - np.floor(shifted) + digits[n] / _SCALE
        orbit[n + 1] = mod1(w - off)

    return orbit


def fast_orbit(
    family: FastFamily,
    eps: float,
    y0: Union[Sequence, np.ndarray],
    n_steps: int,
    rng: Optional[np.random.Generator] = None,
    drift: Optional[Union[float, Fraction]] = None,
) -> np.ndarray:
    """The orbits y_0, ..., y_n of T_eps for an ensemble of starting points.

    Doubling-type families go through dyadic_orbit, the theta coordinate of the
    Viana family likewise; everything else is iterated in floating point.

    Args:
        family: The family.
        eps: The family parameter.
        y0: The starting points, shape (m,) or (m, 2) for the cylinder.
        n_steps: The number of steps.
        rng: Source of trailing binary digits for the shift-type coordinates.
        drift: Exact drift overriding the scheduled one (doubling-drift only).

    Returns:
        Array (n_steps + 1, m) or (n_steps + 1, m, 2).
    """
    s = family.schedule(eps)

    if family.kind == "doubling-drift":
        c = s["c"] if drift is None else drift
        return dyadic_orbit(y0, c, n_steps, rng=rng)

    if family.kind == "viana":
        y0 = np.asarray(y0, dtype=float).reshape(-1, 2)
        theta = dyadic_orbit(y0[:, 0], 0.0, n_steps, rng=rng, shift_bits=4)
        orbit = np.empty((n_steps + 1,) + y0.shape, dtype=float)
        orbit[:, :, 0] = theta
        orbit[0, :, 1] = y0[:, 1]
        amp = np.sin(2.0 * np.pi * theta)
        for n in range(n_steps):
            orbit[n + 1, :, 1] = s["a0"] + s["alpha"] * amp[n] - orbit[n, :, 1] ** 2
        return orbit

    y = np.atleast_1d(np.asarray(y0, dtype=float))
    orbit = np.empty((n_steps + 1,) + y.shape, dtype=float)
    orbit[0] = y
    for n in range(n_steps):
        orbit[n + 1] = apply_family(family, eps, orbit[n])

    return orbit


def burn_in_points(
    family: FastFamily,
    eps: float,
    y0: np.ndarray,
    steps: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Iterates starting points through a transient and returns the endpoints.

    Args:
        family: The family.
        eps: The family parameter.
        y0: The starting points.
        steps: The transient length.
        rng: Digit source for shift-type coordinates.

    Returns:
        The points after the transient.
    """
    if steps <= 0:
        return np.asarray(y0, dtype=float)
    out = fast_orbit(family, eps, y0, steps, rng=rng)[-1]
    if family.kind == "viana":
        lost = ~family.phase_space.contains(out)
        if np.any(lost):
            logger.warning(
                f"{int(lost.sum())} Viana orbits left the box during burn-in."
            )

    return out


def family_from_config(table: dict[str, Any]) -> FastFamily:
    """Builds a family from the [family] table of a scenario.

    Args:
        table: The table, with 'kind', optional 'eps0' and the schedule keys.

    Returns:
        The family.
    """
    table = dict(table)
    kind = table.pop("kind", None)
    if kind is None:
        raise DomainError("The [family] table needs a 'kind'.")
    eps0 = float(table.pop("eps0", 1.0))
    if "a_table" in table:
        table["a_table"] = [list(map(float, row)) for row in table["a_table"]]

    return FastFamily(kind=kind, params=table, eps0=eps0)
