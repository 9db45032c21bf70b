"""Contains the exceptions of the lab and the argument checks raising them."""

from typing import Any, Optional

import numpy as np


class LabError(Exception):
    """Base class for all errors raised by the lab."""

    pass


class DomainError(LabError, ValueError):
    """Raised when a parameter or a point lies outside its admissible range."""

    pass


class UsageError(LabError, ValueError):
    """Raised when a function is called with inconsistent arguments."""

    pass


class PreconditionError(UsageError):
    """Raised when the precondition of an asserted statement does not hold.

    Attributes:
        threshold: The threshold that had to be exceeded.
    """

    def __init__(self, msg: str, threshold: float) -> None:
        """Initialise the error.

        Args:
            msg: The message.
            threshold: The violated threshold.
        """
        super().__init__(msg)
        self.threshold = threshold


class NumericError(LabError, ArithmeticError):
    """Raised when a computed state stops being finite.

    Attributes:
        step: The iteration index at which the problem appeared.
    """

    def __init__(self, msg: str, step: Optional[int] = None) -> None:
        """Initialise the error.

        Args:
            msg: The message.
            step: The step index, if known.
        """
        if step is not None:
            msg = f"{msg} (step {step})"
        super().__init__(msg)
        self.step = step


class IterationLimitError(NumericError):
    """Raised when an iteration does not converge within its budget.

    Attributes:
        residual: The residual at the last iteration.
    """

    def __init__(self, msg: str, residual: float, step: Optional[int] = None) -> None:
        """Initialise the error.

        Args:
            msg: The message.
            residual: The last residual.
            step: The number of iterations performed.
        """
        super().__init__(f"{msg}, residual {residual:.3e}", step=step)
        self.residual = residual


class TruncationError(LabError):
    """Raised when an excursion exceeds its iteration cap.

    Attributes:
        partial_orbit: The orbit computed before the cap was hit.
    """

    def __init__(self, msg: str, partial_orbit: np.ndarray) -> None:
        """Initialise the error.

        Args:
            msg: The message.
            partial_orbit: The points visited so far.
        """
        super().__init__(msg)
        self.partial_orbit = partial_orbit


class ScenarioError(LabError):
    """Raised when a module error occurs during a scenario run.

    Attributes:
        epsilon: The epsilon value being processed.
        sample: The sample index, when the failure is tied to one orbit.
    """

    def __init__(
        self, msg: str, epsilon: float, sample: Optional[int] = None
    ) -> None:
        """Initialise the error.

        Args:
            msg: The underlying message.
            epsilon: The epsilon value being processed.
            sample: The sample index, if any.
        """
        where = f"epsilon={epsilon:g}"
        if sample is not None:
            where += f", sample={sample}"
        super().__init__(f"{msg} [{where}]")
        self.epsilon = epsilon
        self.sample = sample


def check_interval(
    name: str,
    value: Any,
    lower: float,
    upper: float,
    closed: tuple[bool, bool] = (True, True),
) -> None:
    """Checks that every entry of value lies in the interval [lower, upper].

    Args:
        name: The name used in the error message.
        value: Scalar or array to check.
        lower: The lower end.
        upper: The upper end.
        closed: Whether the lower and upper ends are included.

    Raises:
        DomainError: When an entry lies outside the interval.
    """
    arr = np.asarray(value, dtype=float)
    low_ok = arr >= lower if closed[0] else arr > lower
    up_ok = arr <= upper if closed[1] else arr < upper
    if not np.all(low_ok & up_ok):
        left = "[" if closed[0] else "("
        right = "]" if closed[1] else ")"
        raise DomainError(f"{name} must lie in {left}{lower}, {upper}{right}.")


def check_epsilon(eps: float, eps0: float, allow_zero: bool = True) -> None:
    """Checks that eps is an admissible family parameter.

    Args:
        eps: The parameter.
        eps0: The exclusive upper bound of the family.
        allow_zero: Whether eps = 0 is admissible.

    Raises:
        DomainError: When eps lies outside [0, eps0) (or (0, eps0)).
    """
    check_interval("epsilon", eps, 0.0, eps0, closed=(allow_zero, False))


def check_finite(name: str, value: np.ndarray, step: Optional[int] = None) -> None:
    """Checks that an array holds only finite numbers.

    Args:
        name: The name used in the error message.
        value: The array to check.
        step: The iteration index, reported on failure.

    Raises:
        NumericError: When a NaN or infinity is present.
    """
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{name} is not finite", step=step)


def check_sample_size(n: int, minimum: int = 100) -> None:
    """Checks that a Monte Carlo estimate uses enough samples.

    Args:
        n: The number of samples.
        minimum: The smallest admissible number.

    Raises:
        UsageError: When n < minimum.
    """
    if n < minimum:
        raise UsageError(f"At least {minimum} samples are needed, got {n}.")
