"""Fixed-point arithmetic over the ring Z_{2^b}.

Every value that leaves a client is an element of this ring. Reals are
encoded as two's-complement integers scaled by ``2**f``; group operations are
plain modular integer arithmetic, so additive sharings reconstruct exactly.

Vectors are numpy ``uint64`` arrays holding residues in ``[0, 2**b)``. Since
``2**b`` divides ``2**64``, numpy's wrapping uint64 arithmetic followed by a
mask is exact modular arithmetic for every supported width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "RingParams",
    "RingScalar",
    "RingVector",
    "RingError",
    "RingOverflowError",
    "DEFAULT_PARAMS",
    "quantize",
    "dequantize",
    "ring_arith",
]


class RingError(ValueError):
    """Raised on mismatched ring parameters or malformed ring data."""


class RingOverflowError(RingError):
    """Raised when a real value does not fit the signed fixed-point range."""


@dataclass(frozen=True)
class RingParams:
    """Ring width ``b`` and fractional bits ``f`` of the fixed-point code."""

    b: int = 32
    f: int = 16

    def __post_init__(self) -> None:
        if not (0 < self.f < self.b <= 64):
            raise RingError(f"need 0 < f < b <= 64, got b={self.b}, f={self.f}")
        if self.b % 8:
            raise RingError(f"b must be a multiple of 8 for byte serialization, got {self.b}")

    @property
    def modulus(self) -> int:
        return 1 << self.b

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.b) - 1)

    @property
    def nbytes(self) -> int:
        return self.b // 8

    @property
    def scale(self) -> float:
        return float(1 << self.f)

    @property
    def real_bound(self) -> float:
        """Exclusive bound on ``|x|`` accepted by :meth:`quantize`."""
        return float(2 ** (self.b - 1 - self.f))

    # -- array-level primitives ------------------------------------------------

    def reduce(self, a) -> np.ndarray:
        a = np.asarray(a)
        if a.dtype != np.uint64:
            a = a.astype(np.int64).astype(np.uint64) if a.dtype.kind == "i" else a.astype(np.uint64)
        return a & self.mask

    def quantize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size and not np.all(np.abs(x) < self.real_bound):
            worst = float(np.max(np.abs(x)))
            raise RingOverflowError(
                f"|x|={worst} does not fit b={self.b}, f={self.f} (bound {self.real_bound})"
            )
        scaled = np.rint(x * self.scale).astype(np.int64)
        return scaled.astype(np.uint64) & self.mask

    def to_signed(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.uint64) & self.mask
        if self.b == 64:
            return a.view(np.int64)
        half = np.uint64(1 << (self.b - 1))
        signed = a.astype(np.int64)
        return np.where(a >= half, signed - np.int64(1 << self.b), signed)

    def dequantize(self, a) -> np.ndarray:
        return self.to_signed(a).astype(np.float64) / self.scale

    def add(self, a, b) -> np.ndarray:
        return (np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)) & self.mask

    def sub(self, a, b) -> np.ndarray:
        return (np.asarray(a, dtype=np.uint64) - np.asarray(b, dtype=np.uint64)) & self.mask

    def neg(self, a) -> np.ndarray:
        return (np.uint64(0) - np.asarray(a, dtype=np.uint64)) & self.mask

    def mul(self, a, b) -> np.ndarray:
        return (np.asarray(a, dtype=np.uint64) * np.asarray(b, dtype=np.uint64)) & self.mask

    def matmul(self, a, b) -> np.ndarray:
        """Ring matrix product; uint64 matmul wraps mod 2**64, which is exact here."""
        return (np.asarray(a, dtype=np.uint64) @ np.asarray(b, dtype=np.uint64)) & self.mask

    def random(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.integers(0, 1 << 64, size=shape, dtype=np.uint64, endpoint=False) & self.mask

    def to_bytes(self, a) -> bytes:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.uint64) & self.mask)
        if self.b == 64:
            return a.astype("<u8").tobytes()
        if self.b in (8, 16, 32):
            return a.astype(f"<u{self.nbytes}").tobytes()
        raw = a.astype("<u8").view(np.uint8).reshape(-1, 8)[:, : self.nbytes]
        return raw.tobytes()

    def from_bytes(self, data: bytes, count: int | None = None) -> np.ndarray:
        nb = self.nbytes
        if len(data) % nb:
            raise RingError(f"{len(data)} bytes is not a multiple of the {nb}-byte element size")
        if count is not None and len(data) != count * nb:
            raise RingError(f"expected {count * nb} bytes for {count} elements, got {len(data)}")
        if self.b in (8, 16, 32, 64):
            return np.frombuffer(data, dtype=f"<u{nb}").astype(np.uint64)
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, nb)
        padded = np.zeros((raw.shape[0], 8), dtype=np.uint8)
        padded[:, :nb] = raw
        return padded.view("<u8").reshape(-1).astype(np.uint64)


DEFAULT_PARAMS = RingParams()


def _check_same(p: RingParams, q: RingParams) -> None:
    if p != q:
        raise RingError(f"ring parameter mismatch: {p} vs {q}")


@dataclass(frozen=True)
class RingScalar:
    """A single ring element; ``value`` is the unsigned residue."""

    value: int
    params: RingParams = DEFAULT_PARAMS

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", int(self.value) % self.params.modulus)

    def __add__(self, other: RingScalar) -> RingScalar:
        return ring_arith(self, other, "add")

    def __sub__(self, other: RingScalar) -> RingScalar:
        return ring_arith(self, ring_arith(other, None, "neg"), "add")

    def __neg__(self) -> RingScalar:
        return ring_arith(self, None, "neg")

    def __mul__(self, other: RingScalar) -> RingScalar:
        return ring_arith(self, other, "mul")

    def signed(self) -> int:
        half = 1 << (self.params.b - 1)
        return self.value - self.params.modulus if self.value >= half else self.value

    def real(self) -> float:
        return self.signed() / self.params.scale

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(self.params.nbytes, "little")


@dataclass(frozen=True, eq=False)
class RingVector:
    """Fixed-length vector of ring elements; the backing array is read-only."""

    elems: np.ndarray
    params: RingParams = field(default=DEFAULT_PARAMS)

    def __post_init__(self) -> None:
        arr = np.array(self.elems, dtype=np.uint64, copy=True).reshape(-1) & self.params.mask
        arr.setflags(write=False)
        object.__setattr__(self, "elems", arr)

    @classmethod
    def zeros(cls, length: int, params: RingParams = DEFAULT_PARAMS) -> RingVector:
        return cls(np.zeros(length, dtype=np.uint64), params)

    @classmethod
    def from_reals(cls, xs: Iterable[float], params: RingParams = DEFAULT_PARAMS) -> RingVector:
        return cls(params.quantize(np.asarray(list(xs) if not isinstance(xs, np.ndarray) else xs)), params)

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams = DEFAULT_PARAMS) -> RingVector:
        return cls(params.from_bytes(data), params)

    def __len__(self) -> int:
        return self.elems.shape[0]

    def __getitem__(self, k: int) -> RingScalar:
        return RingScalar(int(self.elems[k]), self.params)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RingVector):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.elems, other.elems)

    def __hash__(self) -> int:
        return hash((self.params, self.elems.tobytes()))

    def _binary(self, other: RingVector, fn) -> RingVector:
        _check_same(self.params, other.params)
        if len(self) != len(other):
            raise RingError(f"length mismatch: {len(self)} vs {len(other)}")
        return RingVector(fn(self.elems, other.elems), self.params)

    def __add__(self, other: RingVector) -> RingVector:
        return self._binary(other, self.params.add)

    def __sub__(self, other: RingVector) -> RingVector:
        return self._binary(other, self.params.sub)

    def __neg__(self) -> RingVector:
        return RingVector(self.params.neg(self.elems), self.params)

    def scale_by(self, k: int | RingScalar) -> RingVector:
        """Multiply every element by an unscaled ring integer (selector semantics)."""
        if isinstance(k, RingScalar):
            _check_same(self.params, k.params)
            k = k.value
        return RingVector(self.params.mul(self.elems, np.uint64(int(k) % self.params.modulus)), self.params)

    def reals(self) -> np.ndarray:
        return self.params.dequantize(self.elems)

    def signed(self) -> np.ndarray:
        return self.params.to_signed(self.elems)

    def to_bytes(self) -> bytes:
        return self.params.to_bytes(self.elems)


def quantize(x: float, params: RingParams = DEFAULT_PARAMS) -> RingScalar:
    """Encode a real as ``round(x * 2**f) mod 2**b``."""
    return RingScalar(int(params.quantize(np.asarray([x]))[0]), params)


def dequantize(a: RingScalar) -> float:
    return a.real()


def ring_arith(a: RingScalar, b: RingScalar | None, op: str) -> RingScalar:
    """Exact group/ring operation on scalars; ``b`` is ignored for ``neg``."""
    p = a.params
    if op == "neg":
        return RingScalar(-a.value, p)
    if b is None:
        raise RingError(f"operation {op!r} needs two operands")
    _check_same(p, b.params)
    if op == "add":
        return RingScalar(a.value + b.value, p)
    if op == "mul":
        return RingScalar(a.value * b.value, p)
    raise RingError(f"unknown ring operation {op!r}")
