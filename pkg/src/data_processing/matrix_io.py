"""
Numeric data matrices for mixture clustering (CSV or TSV, optional header and
row ids).
"""

import io
from typing import List, Tuple

import numpy as np
import pandas as pd

from data_processing.seqio import TextInput, _as_text
from utils.errors import DataError
from utils.logger import setup_logger

# Logger for numeric matrix input
logger = setup_logger(name="matrix_io", log_filename="matrix_io.log")


def _is_number(value: str) -> bool:
    try:
        float(value)
        return True
    except ValueError:
        return False


def parse_matrix(text: TextInput) -> Tuple[List[str], List[str], np.ndarray]:
    """
    Parse a numeric matrix.

    The delimiter is a tab if the first line contains one, otherwise a comma.
    A first row with any non-numeric field is a header; a first column with
    any non-numeric field holds row ids.

    Returns
    -------
    tuple
        (row ids, column names, n x p float array).

    Raises
    ------
    DataError
        On empty input, ragged rows or non-numeric values.
    """
    content = _as_text(text)
    lines = [line for line in content.splitlines() if line.strip()]
    if not lines:
        raise DataError("Data matrix is empty")
    # Blank lines are dropped before sniffing the delimiter
    sep = "\t" if "\t" in lines[0] else ","

    try:
        frame = pd.read_csv(io.StringIO("\n".join(lines)), sep=sep, header=None, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataError(f"Data matrix rows have different lengths: {e}") from e

    # Header and id column are detected from the text itself
    frame = frame.apply(lambda column: column.str.strip())
    first_row_text = not all(_is_number(value) for value in frame.iloc[0, 1:])
    # Single numeric column under a text label
    label_over_numbers = not _is_number(frame.iloc[0, 0]) and all(_is_number(value) for value in frame.iloc[1:, 0])
    has_header = first_row_text or label_over_numbers
    body = frame.iloc[1:] if has_header else frame
    has_ids = not all(_is_number(value) for value in body.iloc[:, 0])

    # Split off ids and names, synthesizing them when absent
    values = body.iloc[:, 1:] if has_ids else body
    if values.shape[0] == 0 or values.shape[1] == 0:
        raise DataError("Data matrix has no numeric values")
    ids = [str(value) for value in body.iloc[:, 0]] if has_ids else [str(i) for i in range(values.shape[0])]
    if has_header:
        header = [str(value) for value in frame.iloc[0]]
        columns = header[1:] if has_ids else header
    else:
        columns = [f"x{j}" for j in range(values.shape[1])]

    # Convert, then reject NaN and infinities by row
    try:
        data = values.to_numpy(dtype=float)
    except ValueError as e:
        raise DataError(f"Data matrix holds a non-numeric value: {e}") from e
    if not np.all(np.isfinite(data)):
        row = int(np.flatnonzero(~np.all(np.isfinite(data), axis=1))[0])
        raise DataError("Data matrix holds a missing or infinite value", record=ids[row])

    logger.info(f"Parsed data matrix with {data.shape[0]} rows and {data.shape[1]} columns")
    return ids, columns, data


def write_matrix(ids: List[str], columns: List[str], data: np.ndarray) -> bytes:
    """Serialize as TSV with a header and an id column."""
    frame = pd.DataFrame(np.asarray(data), columns=columns)
    frame.insert(0, "id", ids)
    return frame.to_csv(sep="\t", index=False, float_format="%.17g").encode("utf-8")
