"""CSV and JSON output of lab results."""

import json
import logging

from pathlib import Path
from typing import Any, Iterable, Mapping, Union

import numpy as np
import pandas as pd

from averaging.utils.verdicts import Verdict

logger = logging.getLogger()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Verdict):
        return _jsonable(obj.to_dict())
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_table(
    records: Union[pd.DataFrame, Iterable[Mapping[str, Any]]],
    path: Union[str, Path],
    seed: Union[int, None] = None,
) -> Path:
    """Writes a table as UTF-8 comma separated values with a header row.

    Args:
        records: A dataframe or an iterable of row dicts.
        path: The output file.
        seed: The run seed, added as a column when given.

    Returns:
        The path written.
    """
    df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
    if seed is not None:
        df = df.assign(seed=seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
    logger.debug(f"Wrote {len(df)} rows to {path}.")

    return path


def path_table(
    t: np.ndarray, x: np.ndarray, extra: Union[Mapping[str, np.ndarray], None] = None
) -> pd.DataFrame:
    """Builds the (t, x_1..x_d, ...) table of a path.

    Args:
        t: The times.
        x: The states, shape (len(t), d).
        extra: Further named columns.

    Returns:
        The dataframe.
    """
    x = np.asarray(x, dtype=float).reshape(len(t), -1)
    df = pd.DataFrame({"t": t})
    for i in range(x.shape[1]):
        df[f"x_{i + 1}"] = x[:, i]
    for name, col in (extra or {}).items():
        df[name] = col

    return df


def write_json(obj: Any, path: Union[str, Path]) -> Path:
    """Writes verdicts or records as indented JSON.

    Args:
        obj: The object, verdicts and numpy values allowed.
        path: The output file.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2)
    logger.debug(f"Wrote {path}.")

    return path
