"""Log-log rate fitting shared by the scaling checks."""

import logging

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from scipy import stats

from averaging.utils.checks import UsageError

logger = logging.getLogger()


@dataclass
class RateSeries:
    """A series of (abscissa, statistic) points and its log-log fit.

    Attributes:
        points: The (epsilon or n, statistic) pairs in the order given.
        slope: The fitted log-log slope, None when no fit was made.
        intercept: The fitted log-log intercept.
        r_squared: The coefficient of determination of the fit.
        window: The (low, high) abscissa range the fit used.
        label: Free-form name of the statistic.
    """

    points: list[tuple[float, float]]
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r_squared: Optional[float] = None
    window: Optional[tuple[float, float]] = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        """Whether a fit is attached."""
        return self.slope is not None

    def to_records(self) -> list[dict]:
        """Flattens the series for CSV output.

        Returns:
            One dict per point, the fit repeated on every row.
        """
        return [
            {
                "x": x,
                "value": v,
                "label": self.label,
                "slope": self.slope,
                "intercept": self.intercept,
                "r_squared": self.r_squared,
            }
            for x, v in self.points
        ]


def fit_rate(
    points: Sequence[tuple[float, float]],
    window: Optional[tuple[float, float]] = None,
    label: str = "",
) -> RateSeries:
    """Ordinary least squares of log(statistic) against log(abscissa).

    Only points with a positive statistic inside the window take part in the
    fit; all points are kept in the returned series.

    Args:
        points: The (abscissa, statistic) pairs.
        window: Inclusive abscissa range to fit over, all points when None.
        label: Name of the statistic.

    Returns:
        The series with slope, intercept and R^2 attached.

    Raises:
        UsageError: When fewer than 3 usable points remain.
    """
    pts = [(float(x), float(v)) for x, v in points]
    usable = [
        (x, v)
        for x, v in pts
        if v > 0
        and x > 0
        and (window is None or window[0] <= x <= window[1])
    ]
    if len(usable) < 3:
        raise UsageError(
            f"A rate fit needs at least 3 positive points, got {len(usable)}."
        )

    lx = np.log([x for x, _ in usable])
    lv = np.log([v for _, v in usable])

    if np.ptp(lv) == 0.0:
        slope, intercept, r_squared = 0.0, float(lv[0]), 1.0
    else:
        res = stats.linregress(lx, lv)
        slope, intercept, r_squared = (
            float(res.slope),
            float(res.intercept),
            float(res.rvalue**2),
        )

    used = (min(x for x, _ in usable), max(x for x, _ in usable))
    logger.info(f"Rate fit {label or 'series'}: slope {slope:.4f}, R^2 {r_squared:.4f}")

    return RateSeries(
        points=pts,
        slope=slope,
        intercept=intercept,
        r_squared=r_squared,
        window=used,
        label=label,
    )


def default_window(abscissae: Sequence[float]) -> Optional[tuple[float, float]]:
    """The default fit window: everything except the largest abscissa.

    Args:
        abscissae: The epsilon values of a series.

    Returns:
        The window, or None when dropping a point would leave fewer than 3.
    """
    xs = sorted(float(x) for x in abscissae)
    if len(xs) < 4:
        return None
    return (xs[0], xs[-2])
