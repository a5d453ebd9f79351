"""Two-party distributed point functions, split into path and convert phases.

A key for party ``b`` is ``s_b || t_b || CW_1 .. CW_n || CW_{n+1}``. The
first part (a :class:`PathKey`) steers the two parties' GGM trees so that
their seeds agree everywhere except on the path to ``alpha``; the last word
(a :class:`ConvertWord`) turns the leaf seeds into additive shares of
``beta`` in ``Z_{2^b}^L``. Because the convert word is computed from the
client-retained :class:`PathSecret`, one path can carry several payloads.
That is what lets the aggregation stage reuse the retrieval-stage tree.

Bit ``i`` of the path (``i = 1..n``) is the ``i``-th most significant bit of
the index, so full-domain leaves come out in natural index order.

Everything is batched: a :class:`PathKeyBatch` holds ``K`` keys of the same
party and depth as stacked arrays, and the generation and evaluation
routines work level by level on the whole batch.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass

import numpy as np

from . import prg
from .prg import LAMBDA, SEED_BYTES
from .ring import DEFAULT_PARAMS, RingParams, RingVector

__all__ = [
    "KEY_VERSION",
    "MAX_FULL_DOMAIN_BITS",
    "DpfError",
    "MalformedKeyError",
    "CorrectionWord",
    "PathKey",
    "PathKeyBatch",
    "PathSecret",
    "PathSecretBatch",
    "ConvertWord",
    "DpfKey",
    "domain_bits",
    "path_gen",
    "path_gen_batch",
    "path_eval",
    "path_eval_batch",
    "eval_full_domain",
    "eval_full_domain_batch",
    "convert_gen",
    "convert_gen_batch",
    "convert_eval",
    "convert_eval_batch",
    "gen",
    "eval_point",
    "eval",
    "hyb_cw",
    "path_key_size",
    "dpf_key_size",
    "key_bits_formula",
    "serialize_key",
    "deserialize_key",
    "serialize_path_batch",
    "deserialize_path_batch",
    "pack_key_bits",
]

KEY_VERSION = 1
MAX_FULL_DOMAIN_BITS = 32
_CW_BYTES = SEED_BYTES + 1


class DpfError(ValueError):
    pass


class MalformedKeyError(DpfError):
    """Raised when key bytes cannot be parsed; ``offset`` locates the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def domain_bits(m: int) -> int:
    """``ceil(log2 m)``, with a floor of one bit."""
    if m < 1:
        raise DpfError("domain size must be positive")
    return max(1, (m - 1).bit_length())


def _random_seeds(rng: np.random.Generator | None, count: int) -> np.ndarray:
    raw = secrets.token_bytes(count * SEED_BYTES) if rng is None else rng.bytes(count * SEED_BYTES)
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, SEED_BYTES).copy()


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# -- key material ---------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionWord:
    seed: bytes
    t_left: int
    t_right: int


@dataclass(frozen=True, eq=False)
class PathKeyBatch:
    """``K`` path keys for one party, all of depth ``n``."""

    party: int
    n: int
    seeds: np.ndarray  # (K, 16) uint8
    t: np.ndarray  # (K,) uint8
    cw_seeds: np.ndarray  # (K, n, 16) uint8
    cw_bits: np.ndarray  # (K, n, 2) uint8: [t_left, t_right]

    def __post_init__(self) -> None:
        k = self.seeds.shape[0]
        if self.seeds.shape != (k, SEED_BYTES) or self.t.shape != (k,):
            raise DpfError("inconsistent path key batch shapes")
        if self.cw_seeds.shape != (k, self.n, SEED_BYTES) or self.cw_bits.shape != (k, self.n, 2):
            raise DpfError("inconsistent correction word shapes")
        for name in ("seeds", "t", "cw_seeds", "cw_bits"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    def __len__(self) -> int:
        return self.seeds.shape[0]

    def __getitem__(self, i: int) -> PathKey:
        return PathKey(self.party, self.n, self.seeds[i].tobytes(), int(self.t[i]),
                       self.cw_seeds[i], self.cw_bits[i])

    def take(self, idx) -> PathKeyBatch:
        return PathKeyBatch(self.party, self.n, self.seeds[idx], self.t[idx], self.cw_seeds[idx], self.cw_bits[idx])

    @classmethod
    def stack(cls, keys: list[PathKey]) -> PathKeyBatch:
        if not keys:
            raise DpfError("cannot stack an empty key list")
        party, n = keys[0].party, keys[0].n
        if any(k.party != party or k.n != n for k in keys):
            raise DpfError("stacked keys must share party and depth")
        return cls(
            party,
            n,
            np.stack([np.frombuffer(k.seed, dtype=np.uint8) for k in keys]),
            np.array([k.t for k in keys], dtype=np.uint8),
            np.stack([k.cw_seeds for k in keys]),
            np.stack([k.cw_bits for k in keys]),
        )


@dataclass(frozen=True, eq=False)
class PathKey:
    party: int
    n: int
    seed: bytes
    t: int
    cw_seeds: np.ndarray  # (n, 16)
    cw_bits: np.ndarray  # (n, 2)

    @property
    def cws(self) -> tuple[CorrectionWord, ...]:
        return tuple(
            CorrectionWord(self.cw_seeds[i].tobytes(), int(self.cw_bits[i, 0]), int(self.cw_bits[i, 1]))
            for i in range(self.n)
        )

    def as_batch(self) -> PathKeyBatch:
        return PathKeyBatch.stack([self])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PathKey):
            return NotImplemented
        return (
            (self.party, self.n, self.seed, self.t) == (other.party, other.n, other.seed, other.t)
            and np.array_equal(self.cw_seeds, other.cw_seeds)
            and np.array_equal(self.cw_bits, other.cw_bits)
        )


@dataclass(frozen=True, eq=False)
class PathSecretBatch:
    """Client-retained leaf state: ``t_1^(n)``, ``s_0^(n)``, ``s_1^(n)`` per key."""

    t1: np.ndarray  # (K,)
    s0: np.ndarray  # (K, 16)
    s1: np.ndarray  # (K, 16)

    def __len__(self) -> int:
        return self.t1.shape[0]

    def __getitem__(self, i: int) -> PathSecret:
        return PathSecret(int(self.t1[i]), self.s0[i].tobytes(), self.s1[i].tobytes())

    def take(self, idx) -> PathSecretBatch:
        return PathSecretBatch(self.t1[idx], self.s0[idx], self.s1[idx])

    @classmethod
    def stack(cls, items: list[PathSecret]) -> PathSecretBatch:
        return cls(
            np.array([p.t1n for p in items], dtype=np.uint8),
            np.stack([np.frombuffer(p.s0n, dtype=np.uint8) for p in items]),
            np.stack([np.frombuffer(p.s1n, dtype=np.uint8) for p in items]),
        )


@dataclass(frozen=True)
class PathSecret:
    t1n: int
    s0n: bytes
    s1n: bytes


@dataclass(frozen=True)
class ConvertWord:
    payload: RingVector

    def __len__(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class DpfKey:
    path: PathKey
    convert: ConvertWord


# -- path phase -------------------------------------------------------------------


def path_gen_batch(
    rng: np.random.Generator | None, n: int, alphas
) -> tuple[PathKeyBatch, PathKeyBatch, PathSecretBatch]:
    """Generate path keys for every index in ``alphas``.

    ``t_b^(0) = b`` is fixed rather than sampled; the root seeds and nothing
    else are random.
    """
    alphas = np.asarray(alphas, dtype=np.int64).reshape(-1)
    if n < 1:
        raise DpfError("n must be >= 1")
    if alphas.size and (alphas.min() < 0 or alphas.max() >= (1 << n)):
        raise DpfError(f"alpha outside the domain [0, 2^{n})")
    k = alphas.shape[0]
    root = _random_seeds(rng, 2 * k)
    s0, s1 = root[:k].copy(), root[k:].copy()
    t0 = np.zeros(k, dtype=np.uint8)
    t1 = np.ones(k, dtype=np.uint8)
    cw_seeds = np.empty((k, n, SEED_BYTES), dtype=np.uint8)
    cw_bits = np.empty((k, n, 2), dtype=np.uint8)
    s0_root, s1_root = s0.copy(), s1.copy()
    rows = np.arange(k)

    for i in range(n):
        a = ((alphas >> (n - 1 - i)) & 1).astype(np.uint8)
        sl0, tl0, sr0, tr0 = prg.expand_batch(s0)
        sl1, tl1, sr1, tr1 = prg.expand_batch(s1)
        keep_right = a.astype(bool)[:, None]
        s_cw = np.where(keep_right, sl0 ^ sl1, sr0 ^ sr1)
        tl_cw = tl0 ^ tl1 ^ a ^ 1
        tr_cw = tr0 ^ tr1 ^ a
        cw_seeds[:, i] = s_cw
        cw_bits[:, i, 0] = tl_cw
        cw_bits[:, i, 1] = tr_cw
        t_cw_keep = np.where(a == 1, tr_cw, tl_cw)
        s0 = np.where(keep_right, sr0, sl0) ^ (s_cw * t0[:, None])
        s1 = np.where(keep_right, sr1, sl1) ^ (s_cw * t1[:, None])
        t0 = np.where(a == 1, tr0, tl0) ^ (t0 & t_cw_keep)
        t1 = np.where(a == 1, tr1, tl1) ^ (t1 & t_cw_keep)
    del rows

    k0 = PathKeyBatch(0, n, s0_root, np.zeros(k, np.uint8), cw_seeds, cw_bits)
    k1 = PathKeyBatch(1, n, s1_root, np.ones(k, np.uint8), cw_seeds, cw_bits)
    return k0, k1, PathSecretBatch(_readonly(t1), _readonly(s0), _readonly(s1))


def path_gen(rng: np.random.Generator | None, n: int, alpha: int) -> tuple[PathKey, PathKey, PathSecret]:
    k0, k1, sec = path_gen_batch(rng, n, [alpha])
    return k0[0], k1[0], sec[0]


def _corrected_children(keys: PathKeyBatch, level: int, seeds: np.ndarray, t: np.ndarray):
    """Expand ``seeds`` (K, W, 16) at tree level ``level`` and apply corrections."""
    sl, tl, sr, tr = prg.expand_batch(seeds)
    scw = keys.cw_seeds[:, level][:, None, :]  # (K,1,16)
    tlcw = keys.cw_bits[:, level, 0][:, None]
    trcw = keys.cw_bits[:, level, 1][:, None]
    mask = t[..., None]  # (K,W,1) in {0,1}
    sl ^= scw * mask
    sr ^= scw * mask
    tl ^= t & tlcw
    tr ^= t & trcw
    return sl, tl, sr, tr


def path_eval_batch(keys: PathKeyBatch, xs) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate key ``k`` at ``xs[k]``; returns ``(t (K,), s (K, 16))``."""
    xs = np.asarray(xs, dtype=np.int64).reshape(-1)
    n = keys.n
    if xs.shape[0] != len(keys):
        raise DpfError("need one input per key")
    if xs.size and (xs.min() < 0 or xs.max() >= (1 << n)):
        raise DpfError(f"x outside the domain [0, 2^{n})")
    s = keys.seeds[:, None, :].copy()
    t = keys.t[:, None].copy()
    for i in range(n):
        sl, tl, sr, tr = _corrected_children(keys, i, s, t)
        right = ((xs >> (n - 1 - i)) & 1).astype(bool)[:, None]
        s = np.where(right[..., None], sr, sl)
        t = np.where(right, tr, tl)
    return t[:, 0], s[:, 0]


def path_eval(party: int, key: PathKey, x: int) -> tuple[int, bytes]:
    if party != key.party:
        raise DpfError(f"key belongs to party {key.party}, not {party}")
    t, s = path_eval_batch(key.as_batch(), [x])
    return int(t[0]), s[0].tobytes()


def eval_full_domain_batch(keys: PathKeyBatch, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Leaf control bits and seeds for every input ``x < limit`` of every key.

    One pass over the tree per batch; nodes whose subtree lies entirely at or
    beyond ``limit`` are never expanded. Returns ``t (K, limit)`` and
    ``s (K, limit, 16)``.
    """
    n = keys.n
    if n > MAX_FULL_DOMAIN_BITS:
        raise DpfError(f"full-domain evaluation limited to n <= {MAX_FULL_DOMAIN_BITS}")
    size = 1 << n
    limit = size if limit is None else limit
    if not 1 <= limit <= size:
        raise DpfError(f"limit must lie in [1, 2^{n}]")
    s = keys.seeds[:, None, :].copy()
    t = keys.t[:, None].copy()
    k = len(keys)
    for i in range(n):
        sl, tl, sr, tr = _corrected_children(keys, i, s, t)
        width = s.shape[1]
        s = np.empty((k, 2 * width, SEED_BYTES), dtype=np.uint8)
        t = np.empty((k, 2 * width), dtype=np.uint8)
        s[:, 0::2], s[:, 1::2] = sl, sr
        t[:, 0::2], t[:, 1::2] = tl, tr
        span = 1 << (n - 1 - i)  # leaves under each node of the next level
        needed = -(-limit // span)
        if needed < s.shape[1]:
            s, t = s[:, :needed], t[:, :needed]
    return t[:, :limit], s[:, :limit]


def eval_full_domain(party: int, key: PathKey, limit: int | None = None) -> list[tuple[int, bytes]]:
    if party != key.party:
        raise DpfError(f"key belongs to party {key.party}, not {party}")
    t, s = eval_full_domain_batch(key.as_batch(), limit)
    return [(int(t[0, x]), s[0, x].tobytes()) for x in range(t.shape[1])]


# -- convert phase ----------------------------------------------------------------


def convert_gen_batch(secrets_: PathSecretBatch, betas: np.ndarray, params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """Final correction words for payloads ``betas`` of shape ``(K, L)``."""
    betas = np.asarray(betas, dtype=np.uint64)
    if betas.ndim != 2 or betas.shape[0] != len(secrets_):
        raise DpfError("betas must have shape (K, L) matching the secrets")
    length = betas.shape[1]
    c0 = prg.convert_batch(secrets_.s0, length, params)
    c1 = prg.convert_batch(secrets_.s1, length, params)
    cw = params.add(params.sub(betas, c0), c1)
    flip = secrets_.t1.astype(bool)[:, None]
    return np.where(flip, params.neg(cw), cw)


def convert_gen(secret: PathSecret, beta: RingVector) -> ConvertWord:
    p = beta.params
    cw = convert_gen_batch(PathSecretBatch.stack([secret]), beta.elems[None, :], p)
    return ConvertWord(RingVector(cw[0], p))


def convert_eval_batch(party: int, t: np.ndarray, s: np.ndarray, cw: np.ndarray,
                       params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """``(-1)^party * (Convert(s) + t * cw)`` with broadcasting over leading axes.

    ``t`` is ``(...)``, ``s`` is ``(..., 16)`` and ``cw`` broadcasts against
    ``(..., L)``.
    """
    cw = np.asarray(cw, dtype=np.uint64)
    conv = prg.convert_batch(s, cw.shape[-1], params)
    v = params.add(conv, np.asarray(t, dtype=np.uint64)[..., None] * cw)
    return params.neg(v) if party else v


def convert_eval(party: int, t: int, s: bytes, cw: ConvertWord) -> RingVector:
    p = cw.payload.params
    if len(s) != SEED_BYTES:
        raise DpfError("seed length mismatch")
    out = convert_eval_batch(party, np.array([t]), np.frombuffer(s, np.uint8)[None], cw.payload.elems[None], p)
    return RingVector(out[0], p)


# -- whole keys -------------------------------------------------------------------


def gen(rng: np.random.Generator | None, n: int, alpha: int, beta: RingVector) -> tuple[DpfKey, DpfKey]:
    """Keys whose evaluations sum to ``beta`` at ``alpha`` and to zero elsewhere."""
    p0, p1, sec = path_gen(rng, n, alpha)
    cw = convert_gen(sec, beta)
    return DpfKey(p0, cw), DpfKey(p1, cw)


def eval_point(party: int, key: DpfKey, x: int) -> RingVector:
    t, s = path_eval(party, key.path, x)
    return convert_eval(party, t, s, key.convert)


def hyb_cw(rng: np.random.Generator, n: int, alpha: int, beta: RingVector) -> ConvertWord:
    """Convert word built over uniformly random per-level correction words.

    Test-only: this is the intermediate hybrid of the aggregation-stage
    simulation argument. Its output should be indistinguishable from a real
    :func:`convert_gen` output.
    """
    p = beta.params
    s = _random_seeds(rng, 2)
    t = np.array([0, 1], dtype=np.uint8)
    for i in range(n):
        a = (alpha >> (n - 1 - i)) & 1
        sl, tl, sr, tr = prg.expand_batch(s)
        cw = np.frombuffer(rng.bytes(SEED_BYTES + 1), dtype=np.uint8)
        s_cw, t_cw = cw[:SEED_BYTES], (cw[SEED_BYTES] >> (1 if a else 0)) & 1
        keep_s, keep_t = (sr, tr) if a else (sl, tl)
        s = keep_s ^ (s_cw[None, :] * t[:, None])
        t = keep_t ^ (t & t_cw)
    sec = PathSecretBatch(t[1:2], s[0:1], s[1:2])
    return ConvertWord(RingVector(convert_gen_batch(sec, beta.elems[None, :], p)[0], p))


# -- sizes and wire format ------------------------------------------------------


def key_bits_formula(n: int, length: int, params: RingParams = DEFAULT_PARAMS) -> int:
    """Information bits of one key: ``lambda + 1 + n(lambda + 2) + b L``."""
    return LAMBDA + 1 + n * (LAMBDA + 2) + params.b * length


def path_key_size(n: int) -> int:
    """Byte-aligned path key size: version, n, seed, t, then n correction words."""
    return 2 + SEED_BYTES + 1 + n * _CW_BYTES


def dpf_key_size(n: int, length: int, params: RingParams = DEFAULT_PARAMS) -> int:
    return path_key_size(n) + length * params.nbytes


def _path_records(keys: PathKeyBatch) -> np.ndarray:
    k, n = len(keys), keys.n
    rec = np.empty((k, path_key_size(n)), dtype=np.uint8)
    rec[:, 0] = KEY_VERSION
    rec[:, 1] = n
    rec[:, 2 : 2 + SEED_BYTES] = keys.seeds
    rec[:, 2 + SEED_BYTES] = keys.t
    cw = rec[:, 3 + SEED_BYTES :].reshape(k, n, _CW_BYTES)
    cw[:, :, :SEED_BYTES] = keys.cw_seeds
    cw[:, :, SEED_BYTES] = keys.cw_bits[:, :, 0] | (keys.cw_bits[:, :, 1] << 1)
    return rec


def serialize_path_batch(keys: PathKeyBatch, convert: np.ndarray | None = None,
                         params: RingParams = DEFAULT_PARAMS) -> bytes:
    """Concatenated fixed-size key records, each optionally followed by its convert word."""
    rec = _path_records(keys)
    if convert is not None:
        convert = np.asarray(convert, dtype=np.uint64)
        if convert.ndim != 2 or convert.shape[0] != len(keys):
            raise DpfError("convert words must have shape (K, L)")
        tail = np.frombuffer(params.to_bytes(convert), dtype=np.uint8).reshape(len(keys), -1)
        rec = np.concatenate([rec, tail], axis=1)
    return rec.tobytes()


def _parse_header(data: bytes, base: int) -> int:
    if len(data) - base < 2:
        raise MalformedKeyError("truncated key header", min(len(data), base + len(data[base:])))
    if data[base] != KEY_VERSION:
        raise MalformedKeyError(f"unsupported key version {data[base]}", base)
    n = data[base + 1]
    if n < 1:
        raise MalformedKeyError("key depth must be >= 1", base + 1)
    return n


def deserialize_path_batch(data: bytes, count: int, convert_len: int = 0,
                           params: RingParams = DEFAULT_PARAMS) -> tuple[PathKeyBatch, np.ndarray | None]:
    """Parse ``count`` concatenated key records (see :func:`serialize_path_batch`)."""
    if count < 1:
        raise DpfError("count must be >= 1")
    n = _parse_header(data, 0)
    rec_len = path_key_size(n) + convert_len * params.nbytes
    if len(data) != count * rec_len:
        short = min(len(data), count * rec_len)
        raise MalformedKeyError(f"expected {count} records of {rec_len} bytes, got {len(data)} bytes", short)
    rec = np.frombuffer(data, dtype=np.uint8).reshape(count, rec_len)
    bad = np.nonzero((rec[:, 0] != KEY_VERSION) | (rec[:, 1] != n))[0]
    if bad.size:
        raise MalformedKeyError("inconsistent record header", int(bad[0]) * rec_len)
    t = rec[:, 2 + SEED_BYTES]
    party = int(t[0])
    if party not in (0, 1) or np.any(t != party):
        raise MalformedKeyError("root control bit must equal the party for every record", 2 + SEED_BYTES)
    cw = rec[:, 3 + SEED_BYTES : path_key_size(n)].reshape(count, n, _CW_BYTES)
    bits = cw[:, :, SEED_BYTES]
    if np.any(bits > 3):
        raise MalformedKeyError("correction-word control byte uses reserved bits", 3 + SEED_BYTES + SEED_BYTES)
    keys = PathKeyBatch(
        party,
        n,
        rec[:, 2 : 2 + SEED_BYTES].copy(),
        t.copy(),
        cw[:, :, :SEED_BYTES].copy(),
        np.stack([bits & 1, bits >> 1], axis=-1).astype(np.uint8),
    )
    conv = None
    if convert_len:
        tail = rec[:, path_key_size(n) :].tobytes()
        conv = params.from_bytes(tail).reshape(count, convert_len)
    return keys, conv


def serialize_key(key: DpfKey | PathKey) -> bytes:
    if isinstance(key, PathKey):
        return serialize_path_batch(key.as_batch())
    p = key.convert.payload
    return serialize_path_batch(key.path.as_batch(), p.elems[None, :], p.params)


def deserialize_key(data: bytes, params: RingParams | None = None) -> DpfKey | PathKey:
    """Parse one key. With ``params`` the bytes past the path part form a convert word."""
    n = _parse_header(data, 0)
    plen = path_key_size(n)
    if len(data) < plen:
        raise MalformedKeyError(f"truncated path key: need {plen} bytes", len(data))
    extra = len(data) - plen
    if params is None:
        if extra:
            raise MalformedKeyError("trailing bytes after path key", plen)
        keys, _ = deserialize_path_batch(data, 1)
        return keys[0]
    if extra == 0 or extra % params.nbytes:
        raise MalformedKeyError("convert word length is not a positive multiple of the element size", plen)
    keys, conv = deserialize_path_batch(data, 1, extra // params.nbytes, params)
    return DpfKey(keys[0], ConvertWord(RingVector(conv[0], params)))


def pack_key_bits(key: DpfKey) -> tuple[bytes, int]:
    """Bit-granular packing with no header; returns ``(bytes, nbits)``."""
    fields: list[np.ndarray] = [
        np.unpackbits(np.frombuffer(key.path.seed, np.uint8)),
        np.array([key.path.t], dtype=np.uint8),
    ]
    for i in range(key.path.n):
        fields.append(np.unpackbits(key.path.cw_seeds[i]))
        fields.append(key.path.cw_bits[i].astype(np.uint8))
    payload = key.convert.payload
    nb = payload.params.b
    elems = payload.elems
    shifts = np.arange(nb - 1, -1, -1, dtype=np.uint64)
    fields.append(((elems[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8).reshape(-1))
    bits = np.concatenate(fields)
    return np.packbits(bits).tobytes(), int(bits.size)


eval = eval_point  # noqa: A001 - mirrors the Eval algorithm name
