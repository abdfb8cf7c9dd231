"""Small shared helpers."""

import math

# Absolute slack absorbing binary-fraction drift in ratio*count products
# (e.g. 0.7*10 evaluates to 6.999999999999999).
_COUNT_EPS = 1e-9


def floor_count(ratio: float, n: int) -> int:
    """floor(ratio * n), robust to float representation of the ratio."""
    return int(math.floor(ratio * n + _COUNT_EPS))


def ceil_count(ratio: float, n: int) -> int:
    """ceil(ratio * n), robust to float representation of the ratio."""
    return int(math.ceil(ratio * n - _COUNT_EPS))
