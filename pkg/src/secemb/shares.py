"""Two-party additive secret sharing over the ring.

Used for the dense part of every update and for the per-user item counts
from which the padded row count ``m'`` is chosen.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .ring import DEFAULT_PARAMS, RingError, RingParams, RingVector

__all__ = ["DenseShares", "ass_split", "ass_aggregate", "reconstruct", "secure_count_average"]


@dataclass(frozen=True)
class DenseShares:
    share0: RingVector
    share1: RingVector

    def __post_init__(self) -> None:
        if len(self.share0) != len(self.share1):
            raise RingError("share lengths differ")

    def reconstruct(self) -> RingVector:
        return self.share0 + self.share1


def _uniform(rng: np.random.Generator | None, params: RingParams, size: int) -> np.ndarray:
    if rng is None:
        raw = np.frombuffer(secrets.token_bytes(8 * size), dtype="<u8").astype(np.uint64)
        return raw & params.mask
    return params.random(rng, size)


def ass_split(rng: np.random.Generator | None, secret: RingVector) -> DenseShares:
    """Split ``secret`` into a uniform share and its complement.

    ``rng=None`` draws the mask from the OS entropy pool.
    """
    p = secret.params
    mask = _uniform(rng, p, len(secret))
    return DenseShares(RingVector(mask, p), RingVector(p.sub(secret.elems, mask), p))


def ass_aggregate(shares: Sequence[RingVector]) -> RingVector:
    """Sum of one server's shares across users."""
    if not shares:
        raise RingError("nothing to aggregate")
    p, n = shares[0].params, len(shares[0])
    acc = np.zeros(n, dtype=np.uint64)
    for s in shares:
        if s.params != p or len(s) != n:
            raise RingError("shares must have equal length and ring parameters")
        acc += s.elems
    return RingVector(acc, p)


def reconstruct(a0: RingVector, a1: RingVector) -> RingVector:
    return a0 + a1


def secure_count_average(
    counts: Sequence[int],
    alpha: float = 2.0,
    rng: np.random.Generator | None = None,
    params: RingParams = DEFAULT_PARAMS,
) -> int:
    """``ceil(alpha * mean(counts))`` computed through shared counts.

    Each count is split between the two servers, the servers sum their
    shares, and only the total is reconstructed.
    """
    if len(counts) == 0:
        raise ValueError("counts must be non-empty")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if min(counts) < 0:
        raise ValueError("counts must be non-negative")
    if sum(counts) >= params.modulus:
        raise RingError("count total does not fit the ring")
    parts = [ass_split(rng, RingVector(np.array([c], dtype=np.uint64), params)) for c in counts]
    total0 = ass_aggregate([s.share0 for s in parts])
    total1 = ass_aggregate([s.share1 for s in parts])
    total = int(reconstruct(total0, total1).elems[0])
    # exact rational arithmetic so the rounding never depends on float error
    value = Fraction(alpha) * Fraction(total, len(counts))
    return max(1, math.ceil(value))
