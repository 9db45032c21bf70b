"""Records of asserted inequalities."""

import logging

from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

import numpy as np

from numpy.typing import ArrayLike

logger = logging.getLogger()


@dataclass
class Verdict:
    """The outcome of checking one inequality lhs <= rhs over many cases.

    Attributes:
        name: Name of the inequality.
        holds: Whether every checked case satisfied it.
        max_slack: The largest value of lhs - rhs over the cases (negative when
            the inequality holds strictly everywhere).
        checked: The number of cases checked.
        violations: The number of cases with lhs > rhs.
        asserted: Whether a failure should fail the run.
        details: Anything else worth recording.
    """

    name: str
    holds: bool
    max_slack: float
    checked: int = 0
    violations: int = 0
    asserted: bool = True
    details: dict[str, Any] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.holds

    def to_dict(self) -> dict[str, Any]:
        """Json-friendly representation."""
        out = asdict(self)
        out["max_slack"] = float(self.max_slack)
        return out


def compare(
    name: str,
    lhs: ArrayLike,
    rhs: ArrayLike,
    atol: float = 1e-12,
    asserted: bool = True,
    **details: Any,
) -> Verdict:
    """Checks lhs <= rhs + atol entrywise.

    Args:
        name: Name of the inequality.
        lhs: The left-hand sides.
        rhs: The right-hand sides, broadcast against lhs.
        atol: Roundoff allowance.
        asserted: Whether a failure should fail the run.
        **details: Extra fields stored on the verdict.

    Returns:
        The verdict.
    """
    lhs_arr = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs_arr = np.broadcast_to(np.asarray(rhs, dtype=float), lhs_arr.shape)
    if lhs_arr.size == 0:
        return Verdict(name, True, -np.inf, 0, 0, asserted, dict(details))

    slack = lhs_arr - rhs_arr
    violations = int(np.sum(slack > atol))
    verdict = Verdict(
        name=name,
        holds=violations == 0,
        max_slack=float(np.max(slack)),
        checked=int(lhs_arr.size),
        violations=violations,
        asserted=asserted,
        details=dict(details),
    )
    if not verdict.holds:
        logger.warning(
            f"{name}: {violations}/{verdict.checked} cases violated,"
            f" max slack {verdict.max_slack:.3e}"
        )
    else:
        logger.info(f"{name}: holds on {verdict.checked} cases")

    return verdict


def all_hold(verdicts: Iterable[Verdict]) -> bool:
    """Whether every asserted verdict holds."""
    return all(v.holds for v in verdicts if v.asserted)
