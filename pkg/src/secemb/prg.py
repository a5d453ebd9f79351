"""Length-doubling PRG and seed-to-group conversion.

``G`` maps a 128-bit seed to two child seeds and two control bits. It is
built from fixed-key AES-128 in Matyas-Meyer-Oseas mode,
``E_k(s) xor s``, with one fixed key per output block:

    s_left  = MMO_{k_L}(s)
    s_right = MMO_{k_R}(s)
    t_left  = bit 0 of MMO_{k_T}(s)
    t_right = bit 1 of MMO_{k_T}(s)

``convert`` expands a seed in counter mode under a fourth fixed key,
``MMO_{k_C}(s xor ctr_j)``, and reads the stream as little-endian ring
elements. Both functions are batched over numpy arrays of seeds shaped
``(..., 16)``; the scalar wrappers exist for tests and small callers.

The frozen vectors in ``data/prg_vectors.json`` pin this construction.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import threading
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ring import DEFAULT_PARAMS, RingParams, RingScalar, RingVector

__all__ = [
    "LAMBDA",
    "SEED_BYTES",
    "PrgOutput",
    "expand",
    "expand_batch",
    "convert_scalar",
    "convert_vector",
    "convert_batch",
    "convert_native",
    "native_dtype",
    "counting",
    "PrgCounter",
]

LAMBDA = 128
SEED_BYTES = LAMBDA // 8


def _fixed_key(label: str) -> bytes:
    return hashlib.sha256(b"secemb/prg/v1/" + label.encode()).digest()[:16]


_KEYS = {name: _fixed_key(name) for name in ("left", "right", "ctrl", "convert")}
_local = threading.local()


def _encryptor(name: str):
    # cryptography contexts are not thread-safe; keep one per thread.
    cache = getattr(_local, "enc", None)
    if cache is None:
        cache = _local.enc = {}
    enc = cache.get(name)
    if enc is None:
        enc = cache[name] = Cipher(algorithms.AES(_KEYS[name]), modes.ECB()).encryptor()
    return enc


def _mmo(name: str, blocks: np.ndarray) -> np.ndarray:
    """Fixed-key MMO over a C-contiguous ``(N, 16)`` uint8 array."""
    blocks = np.ascontiguousarray(blocks, dtype=np.uint8)
    out = np.frombuffer(_encryptor(name).update(blocks.tobytes()), dtype=np.uint8)
    return out.reshape(blocks.shape) ^ blocks


# -- instrumentation -----------------------------------------------------------


class PrgCounter:
    """Counts seed expansions performed by :func:`expand_batch`."""

    def __init__(self) -> None:
        self.expansions = 0
        self.convert_blocks = 0


_counter: contextvars.ContextVar[PrgCounter | None] = contextvars.ContextVar("secemb_prg_counter", default=None)


@contextlib.contextmanager
def counting():
    """Context manager yielding a :class:`PrgCounter` for the enclosed calls."""
    counter = PrgCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


# -- G ------------------------------------------------------------------------


@dataclass(frozen=True)
class PrgOutput:
    s_left: bytes
    t_left: int
    s_right: bytes
    t_right: int

    def to_bytes(self) -> bytes:
        return self.s_left + bytes([self.t_left]) + self.s_right + bytes([self.t_right])


def expand_batch(seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Apply ``G`` to every seed in an ``(..., 16)`` uint8 array.

    Returns ``(s_left, t_left, s_right, t_right)`` with the seed arrays shaped
    like the input and the bit arrays shaped like the input minus its last axis.
    """
    seeds = np.asarray(seeds, dtype=np.uint8)
    lead = seeds.shape[:-1]
    flat = seeds.reshape(-1, SEED_BYTES)
    counter = _counter.get()
    if counter is not None:
        counter.expansions += flat.shape[0]
    s_left = _mmo("left", flat)
    s_right = _mmo("right", flat)
    ctrl = _mmo("ctrl", flat)[:, 0]
    t_left = ctrl & 1
    t_right = (ctrl >> 1) & 1
    return (
        s_left.reshape(*lead, SEED_BYTES),
        t_left.reshape(lead),
        s_right.reshape(*lead, SEED_BYTES),
        t_right.reshape(lead),
    )


def _seed_array(s: bytes) -> np.ndarray:
    if len(s) != SEED_BYTES:
        raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(s)}")
    return np.frombuffer(bytes(s), dtype=np.uint8).reshape(1, SEED_BYTES)


def expand(s: bytes) -> PrgOutput:
    sl, tl, sr, tr = expand_batch(_seed_array(s))
    return PrgOutput(sl[0].tobytes(), int(tl[0]), sr[0].tobytes(), int(tr[0]))


# -- Convert ------------------------------------------------------------------

_TWEAK_CACHE: dict[int, np.ndarray] = {}


def _tweaks(nblocks: int) -> np.ndarray:
    tw = _TWEAK_CACHE.get(nblocks)
    if tw is None:
        ctr = np.arange(nblocks, dtype="<u8")
        tw = np.zeros((nblocks, SEED_BYTES), dtype=np.uint8)
        tw[:, :8] = ctr.view(np.uint8).reshape(nblocks, 8)
        _TWEAK_CACHE[nblocks] = tw
    return tw


def _convert_stream(seeds: np.ndarray, length: int, params: RingParams) -> tuple[tuple, np.ndarray]:
    if length < 1:
        raise ValueError("convert length must be >= 1")
    seeds = np.asarray(seeds, dtype=np.uint8)
    lead = seeds.shape[:-1]
    flat = seeds.reshape(-1, SEED_BYTES)
    need = length * params.nbytes
    nblocks = -(-need // SEED_BYTES)
    counter = _counter.get()
    if counter is not None:
        counter.convert_blocks += flat.shape[0] * nblocks
    blocks = flat[:, None, :] ^ _tweaks(nblocks)[None, :, :]
    stream = _mmo("convert", blocks.reshape(-1, SEED_BYTES)).reshape(flat.shape[0], nblocks * SEED_BYTES)
    if nblocks * SEED_BYTES != need:
        stream = np.ascontiguousarray(stream[:, :need])
    return lead, stream


def native_dtype(params: RingParams) -> np.dtype | None:
    """Machine dtype whose wrapping arithmetic is exactly the ring, if one exists."""
    return np.dtype(f"<u{params.nbytes}") if params.b in (8, 16, 32, 64) else None


def convert_native(seeds: np.ndarray, length: int, params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """:func:`convert_batch` in the ring's native unsigned dtype (byte-aligned widths only)."""
    dt = native_dtype(params)
    if dt is None:
        raise ValueError(f"no native dtype for b={params.b}")
    lead, stream = _convert_stream(seeds, length, params)
    return stream.view(dt).reshape(*lead, length)


def convert_batch(seeds: np.ndarray, length: int, params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """Map each seed to ``length`` pseudorandom ring elements.

    ``seeds`` has shape ``(..., 16)``; the result has shape ``(..., length)``
    and dtype uint64.
    """
    if native_dtype(params) is not None:
        return convert_native(seeds, length, params).astype(np.uint64)
    lead, stream = _convert_stream(seeds, length, params)
    nb = params.nbytes
    rows = stream.shape[0]
    padded = np.zeros((rows * length, 8), dtype=np.uint8)
    padded[:, :nb] = stream.reshape(-1, nb)
    vals = padded.view("<u8").reshape(rows, length)
    return vals.reshape(*lead, length) & params.mask


def convert_vector(s: bytes, length: int, params: RingParams = DEFAULT_PARAMS) -> RingVector:
    return RingVector(convert_batch(_seed_array(s), length, params)[0], params)


def convert_scalar(s: bytes, params: RingParams = DEFAULT_PARAMS) -> RingScalar:
    return RingScalar(int(convert_batch(_seed_array(s), 1, params)[0, 0]), params)
