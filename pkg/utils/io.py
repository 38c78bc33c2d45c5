"""
File I/O for experiment artifacts.

Writers go through a temporary file in the target directory followed by
os.replace, so a reader never sees a half-written file.
"""

import json
import os
import tempfile
from contextlib import contextmanager
from typing import Any, Iterator

import numpy as np
import pandas as pd

from services.errors import InvalidParameterError

FLOAT_FORMAT = "%.17g"


@contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """Yield a temporary path next to `path`; rename it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_csv(df: pd.DataFrame, path: str) -> str:
    with atomic_path(path) as tmp:
        df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_matrix_csv(M: np.ndarray, path: str) -> str:
    """Plain matrix CSV: one row per line, no header."""
    with atomic_path(path) as tmp:
        pd.DataFrame(np.atleast_2d(M)).to_csv(
            tmp, index=False, header=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    return path


def read_matrix_csv(path: str) -> np.ndarray:
    """
    Headerless float64 matrix.

    Raises:
        InvalidParameterError: empty file or a cell that is not a number.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip")
    except ValueError as e:  # EmptyDataError and ParserError included
        raise InvalidParameterError(f"{path} is not a numeric matrix: {e}") from e
    return frame.to_numpy()


def _default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(data: Any, path: str) -> str:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_default)
            f.write("\n")
    return path


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
