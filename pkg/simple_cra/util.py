import logging
import os
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

logger = logging.getLogger("cra")

UNITS = {"K": 10**3, "M": 10**6, "G": 10**9}


def validateparam(parameter, valid_values, error_to_raise):
    """Raise `error_to_raise` when `parameter` is set and not one of `valid_values`.

    Args:
        parameter: value to check, None is always accepted
        valid_values: container of accepted values
        error_to_raise (Exception | str): exception instance to raise, a plain string raises ValueError
    """
    if parameter is not None:
        if parameter not in valid_values:
            if isinstance(error_to_raise, Exception):
                raise error_to_raise
            raise ValueError(error_to_raise)


def relative_error(a, b):
    """Element-wise |a-b| / max(|a|, |b|, 1e-6) in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def pick_unit(count: int, smallest: str = "K") -> str:
    if count >= UNITS["G"]:
        return "G"
    if count >= UNITS["M"]:
        return "M"
    return smallest


def format_count(count: int, unit: str = None) -> str:
    """Render a raw count with a K/M/G suffix, e.g. 918540 -> '918.54K'.

    Rounding is half-up at two decimals.
    """
    if unit is None:
        unit = pick_unit(count)
    scaled = (Decimal(int(count)) / Decimal(UNITS[unit])).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return f"{scaled}{unit}"


def parse_pair(text: str) -> tuple:
    """Parse 'H,W' into a pair of positive ints."""
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'H,W', got '{text}'")
    h, w = (int(p) for p in parts)
    if h < 1 or w < 1:
        raise ValueError(f"pair values must be positive, got '{text}'")
    return (h, w)


def num_threads() -> int:
    """Worker count from CRA_NUM_THREADS, defaulting to the available cores."""
    value = os.environ.get("CRA_NUM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning(f"ignoring CRA_NUM_THREADS='{value}': not an integer")
    return os.cpu_count() or 1
