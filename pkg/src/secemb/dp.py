"""Clipping and server-side Gaussian noise for differentially private aggregation.

Clients clip each per-sample gradient to L2 norm ``delta2``. Each server then
perturbs its own aggregate share with independent Gaussian noise of scale
``sigma = sqrt(ln(1.25 / delta)) * delta2 / epsilon``, so the reconstructed
aggregate carries noise of variance ``2 sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ring import RingVector

__all__ = ["DpConfig", "clip", "clip_rows", "noise_sigma", "add_server_noise"]


@dataclass(frozen=True)
class DpConfig:
    epsilon: float = 1.0
    delta: float = 1e-5
    delta2: float = 1.0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.delta2 > 0:
            raise ValueError("delta2 must be positive")

    @property
    def sigma(self) -> float:
        return noise_sigma(self)

    @property
    def total_std(self) -> float:
        """Standard deviation of the noise left after both shares are combined."""
        return math.sqrt(2.0) * self.sigma


def clip(g, delta2: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, delta2 / ||g||_2)``."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= delta2:
        return g.copy()
    # the 2^-40 margin exceeds the rounding error of any norm evaluation order,
    # so the bound holds for the exact real norm, not just for this one
    out = g * (delta2 / norm * (1.0 - 2.0**-40))
    while float(np.linalg.norm(out)) > delta2:
        out = np.nextafter(out, 0.0)
    return out


def clip_rows(g, delta2: float) -> np.ndarray:
    """Apply :func:`clip` to every row of a 2-D array."""
    g = np.asarray(g, dtype=np.float64)
    return np.stack([clip(row, delta2) for row in g]) if g.size else g.copy()


def noise_sigma(cfg: DpConfig) -> float:
    return math.sqrt(math.log(1.25 / cfg.delta)) * cfg.delta2 / cfg.epsilon


def add_server_noise(rng: np.random.Generator, shares: RingVector, sigma: float) -> RingVector:
    """Add quantized ``N(0, sigma^2)`` noise to one server's shares."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return shares
    p = shares.params
    noise = p.quantize(rng.normal(0.0, sigma, size=len(shares)))
    return RingVector(p.add(shares.elems, noise), p)
