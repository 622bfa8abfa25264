"""Log and tropical semirings over log-domain weights.

Weights are log-scores (higher is better).  Serialized files store costs,
i.e. negated weights; conversion happens only at the I/O boundary.
"""
import math
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")


def log_add(a, b):
    """log(exp(a) + exp(b)) via the max-plus-log1p identity."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def log_sum(values):
    """Log-sum of an iterable of log-weights; -inf when empty."""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.float64)
    if arr.size == 0:
        return NEG_INF
    m = arr.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(arr - m).sum()))


@dataclass(frozen=True)
class Semiring:
    kind: str

    def __post_init__(self):
        if self.kind not in ("log", "tropical"):
            raise ValueError(f"unknown semiring kind {self.kind!r}")

    @property
    def zero(self):
        return NEG_INF

    @property
    def one(self):
        return 0.0

    def plus(self, a, b):
        if self.kind == "log":
            return log_add(a, b)
        return a if a >= b else b

    def times(self, a, b):
        if a == NEG_INF or b == NEG_INF:
            return NEG_INF
        return a + b

    def sum(self, values):
        if self.kind == "log":
            return log_sum(values)
        return max(values, default=NEG_INF)

    def __repr__(self):
        return f"Semiring({self.kind!r})"


LOG = Semiring("log")
TROPICAL = Semiring("tropical")
