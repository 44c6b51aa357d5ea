import math
from collections.abc import Iterable


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def log2_exact(n: int) -> int:
    if not is_power_of_two(n):
        msg = f"{n} is not a power of two"
        raise ValueError(msg)
    return n.bit_length() - 1


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def gmean(values: Iterable[float]) -> float:
    """Geometric mean of strictly positive values; 1.0 for an empty input."""
    values = list(values)
    if not values:
        return 1.0
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))
