"""Client and server roles for private retrieval and secure sparse aggregation.

A round for one client runs:

1. ``pad_or_trunc_idx`` fixes exactly ``m'`` item slots.
2. ``client_build_retrieval`` sends each server one key per slot. The key is
   a path key plus a scalar convert word for the selector ``beta = 1``.
3. ``server_answer_retrieval`` evaluates every key over the whole item
   domain and returns shares of the selected rows. The per-leaf path state
   is kept for step 5.
4. The client recovers its rows and trains locally.
5. ``client_build_update`` encodes the gradient rows. The ``final`` variant
   sends only vector convert words over the retained paths. ``rowenc``
   sends fresh full keys per row. ``init`` sends one fresh scalar key per
   coordinate. The dense gradient is additively shared in every variant.
6. ``server_accumulate_update`` adds the client's contribution to the
   server's accumulator, and ``servers_reconstruct_and_apply`` combines
   both accumulators and steps the model.

The secure-FedRec baseline (full download, dense shared upload) is here
too, as a cost and correctness comparator.
"""

from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import dpf, prg
from .dpf import PathKeyBatch, PathSecretBatch
from .ring import DEFAULT_PARAMS, RingParams, RingVector
from .shares import ass_split

__all__ = [
    "VARIANTS",
    "MsgType",
    "ProtocolError",
    "CacheMissError",
    "DesyncError",
    "InteractionSet",
    "PaddedIndexSet",
    "SparseUpdate",
    "RetrievalRequest",
    "RetrievalResponse",
    "UpdateMessage",
    "ServerState",
    "frame",
    "unframe",
    "parse_message",
    "pad_or_trunc_idx",
    "pad_or_trunc_emb",
    "client_build_retrieval",
    "server_answer_retrieval",
    "client_recover_rows",
    "client_recover_embeddings",
    "client_build_update",
    "server_accumulate_update",
    "servers_reconstruct_and_apply",
    "baseline_download",
    "baseline_build_update",
    "baseline_secfedrec_round",
    "update_theoretical_bits",
    "retrieval_theoretical_bits",
    "validate_message",
    "find_leaks",
]

VARIANTS = ("final", "rowenc", "init")
_VARIANT_CODE = {"final": 1, "rowenc": 2, "init": 3, "baseline": 4}
_CODE_VARIANT = {v: k for k, v in _VARIANT_CODE.items()}
_CHUNK_BYTES = 1 << 25


class ProtocolError(ValueError):
    pass


class CacheMissError(ProtocolError):
    """A ``final`` update arrived without retained retrieval state."""


class DesyncError(ProtocolError):
    """The two servers' public tables differ."""


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SECEMB_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_sum(fn: Callable[[slice], np.ndarray], total: int, step: int) -> np.ndarray | None:
    """Sum ``fn`` over consecutive slices; parallel if ``SECEMB_THREADS`` > 1.

    Results are combined in slice order, so the sum is deterministic.
    """
    slices = [slice(a, min(a + step, total)) for a in range(0, total, step)]
    if not slices:
        return None
    workers = min(_threads(), len(slices))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, slices))
    else:
        parts = [fn(s) for s in slices]
    acc = parts[0].copy()
    for p in parts[1:]:
        acc += p
    return acc


# -- framing ------------------------------------------------------------------------


class MsgType(IntEnum):
    RETRIEVAL_REQ = 1
    RETRIEVAL_RESP = 2
    UPDATE = 3
    SYNC = 4


_FRAME_HDR = struct.Struct("<IB")


def frame(msg_type: MsgType, payload: bytes) -> bytes:
    """4-byte little-endian payload length, 1-byte type tag, payload."""
    return _FRAME_HDR.pack(len(payload), int(msg_type)) + payload


def unframe(data: bytes) -> tuple[MsgType, bytes]:
    if len(data) < _FRAME_HDR.size:
        raise ProtocolError("truncated frame header")
    length, tag = _FRAME_HDR.unpack_from(data)
    try:
        kind = MsgType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message type {tag}") from None
    if len(data) != _FRAME_HDR.size + length:
        raise ProtocolError(f"frame declares {length} payload bytes, carries {len(data) - _FRAME_HDR.size}")
    return kind, data[_FRAME_HDR.size :]


# -- client-side data ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InteractionSet:
    user: int
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self) -> None:
        items = np.asarray(self.items, dtype=np.int64)
        if len(np.unique(items)) != len(items):
            raise ProtocolError("duplicate items in interaction set")
        if np.asarray(self.ratings).shape != items.shape:
            raise ProtocolError("one rating per item required")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", np.asarray(self.ratings, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class PaddedIndexSet:
    """Exactly ``m'`` distinct slots; ``real_mask`` flags the genuine ones."""

    indices: np.ndarray
    real_mask: np.ndarray
    source_pos: np.ndarray  # for genuine slots, position in the original item list; -1 for padding
    n_source: int  # length of the original item list

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def genuine(self) -> np.ndarray:
        return self.indices[self.real_mask]


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    """``m'`` ring rows aligned with a :class:`PaddedIndexSet`; padding rows are zero."""

    rows: np.ndarray  # (m', L) uint64
    params: RingParams = DEFAULT_PARAMS

    def __len__(self) -> int:
        return self.rows.shape[0]


def pad_or_trunc_idx(rng: np.random.Generator, items: Sequence[int], m_prime: int, m: int) -> PaddedIndexSet:
    """Pad a user's item set with non-rated items, or subsample it, to ``m'`` slots.

    Slots are shuffled so padding positions carry no structure.
    """
    items = np.asarray(items, dtype=np.int64)
    if m_prime > m:
        raise ProtocolError(f"m' = {m_prime} exceeds the item count {m}")
    if m_prime < 1:
        raise ProtocolError("m' must be >= 1")
    if items.size and (items.min() < 0 or items.max() >= m):
        raise ProtocolError("item index outside [0, m)")
    k = items.shape[0]
    if k > m_prime:
        pos = np.sort(rng.choice(k, size=m_prime, replace=False))
        indices, real, src = items[pos], np.ones(m_prime, bool), pos.astype(np.int64)
    else:
        pool = np.setdiff1d(np.arange(m, dtype=np.int64), items, assume_unique=False)
        pad = rng.choice(pool, size=m_prime - k, replace=False) if m_prime > k else np.empty(0, np.int64)
        indices = np.concatenate([items, pad])
        real = np.concatenate([np.ones(k, bool), np.zeros(m_prime - k, bool)])
        src = np.concatenate([np.arange(k), -np.ones(m_prime - k, np.int64)])
    order = rng.permutation(m_prime)
    return PaddedIndexSet(indices[order], real[order], src[order], k)


def pad_or_trunc_emb(g, padded: PaddedIndexSet, params: RingParams = DEFAULT_PARAMS) -> SparseUpdate:
    """Lay the gradient rows of the original item list out on the padded slots.

    ``g`` is either real (quantized here) or already a ring array; its rows
    follow the user's original item order. Truncated items are dropped and
    padding slots get zero rows.
    """
    g = np.asarray(g)
    if g.ndim != 2:
        raise ProtocolError("gradient must be a 2-D array")
    if g.shape[0] != padded.n_source:
        raise ProtocolError(f"gradient has {g.shape[0]} rows, the item list has {padded.n_source}")
    kept = padded.source_pos[padded.real_mask]
    ring = g if g.dtype == np.uint64 else params.quantize(g)
    rows = np.zeros((len(padded), g.shape[1]), dtype=np.uint64)
    rows[padded.real_mask] = ring[kept]
    return SparseUpdate(rows, params)


# -- messages -----------------------------------------------------------------------


_REQ_HDR = struct.Struct("<IH")
_RESP_HDR = struct.Struct("<IIH")
_UPD_HDR = struct.Struct("<IBIHI")


@dataclass(frozen=True, eq=False)
class RetrievalRequest:
    client: int
    keys: PathKeyBatch
    convert: np.ndarray  # (K, 1)
    params: RingParams = DEFAULT_PARAMS

    def payload(self) -> bytes:
        return _REQ_HDR.pack(self.client, len(self.keys)) + dpf.serialize_path_batch(self.keys, self.convert, self.params)

    def to_bytes(self) -> bytes:
        return frame(MsgType.RETRIEVAL_REQ, self.payload())

    @classmethod
    def from_payload(cls, data: bytes, params: RingParams = DEFAULT_PARAMS) -> RetrievalRequest:
        if len(data) < _REQ_HDR.size:
            raise ProtocolError("truncated retrieval request")
        client, count = _REQ_HDR.unpack_from(data)
        keys, conv = dpf.deserialize_path_batch(data[_REQ_HDR.size :], count, 1, params)
        return cls(client, keys, conv, params)


@dataclass(frozen=True, eq=False)
class RetrievalResponse:
    client: int
    rows: np.ndarray  # (K, L) uint64 shares
    params: RingParams = DEFAULT_PARAMS

    def payload(self) -> bytes:
        k, width = self.rows.shape
        return _RESP_HDR.pack(self.client, k, width) + self.params.to_bytes(self.rows)

    def to_bytes(self) -> bytes:
        return frame(MsgType.RETRIEVAL_RESP, self.payload())

    @classmethod
    def from_payload(cls, data: bytes, params: RingParams = DEFAULT_PARAMS) -> RetrievalResponse:
        if len(data) < _RESP_HDR.size:
            raise ProtocolError("truncated retrieval response")
        client, k, width = _RESP_HDR.unpack_from(data)
        body = data[_RESP_HDR.size :]
        if len(body) != k * width * params.nbytes:
            raise ProtocolError("retrieval response length mismatch")
        return cls(client, params.from_bytes(body).reshape(k, width), params)


@dataclass(frozen=True, eq=False)
class UpdateMessage:
    """One server's share of a client update.

    ``final``: ``convert`` is (m', L), no keys. ``rowenc``: m' keys and
    (m', L) convert words. ``init``: m'·L keys and (m'·L, 1) convert words,
    key ``k`` carrying coordinate ``k % L`` of slot ``k // L``.
    ``baseline``: ``convert`` holds the full (m, L) table share.
    """

    client: int
    variant: str
    row_len: int
    convert: np.ndarray
    dense: np.ndarray
    keys: PathKeyBatch | None = None
    params: RingParams = DEFAULT_PARAMS

    def payload(self) -> bytes:
        count = self.convert.shape[0]
        hdr = _UPD_HDR.pack(self.client, _VARIANT_CODE[self.variant], count, self.row_len, self.dense.shape[0])
        if self.keys is None:
            body = self.params.to_bytes(self.convert)
        else:
            body = dpf.serialize_path_batch(self.keys, self.convert, self.params)
        return hdr + body + self.params.to_bytes(self.dense)

    def to_bytes(self) -> bytes:
        return frame(MsgType.UPDATE, self.payload())

    @classmethod
    def from_payload(cls, data: bytes, params: RingParams = DEFAULT_PARAMS) -> UpdateMessage:
        if len(data) < _UPD_HDR.size:
            raise ProtocolError("truncated update message")
        client, code, count, width, dense_len = _UPD_HDR.unpack_from(data)
        if code not in _CODE_VARIANT:
            raise ProtocolError(f"unknown variant code {code}")
        variant = _CODE_VARIANT[code]
        nb = params.nbytes
        dense_bytes = dense_len * nb
        body = data[_UPD_HDR.size : len(data) - dense_bytes]
        if len(data) - _UPD_HDR.size < dense_bytes:
            raise ProtocolError("update message shorter than its dense part")
        dense = params.from_bytes(data[len(data) - dense_bytes :], dense_len)
        keys = None
        if variant in ("final", "baseline"):
            if len(body) != count * width * nb:
                raise ProtocolError("update body length mismatch")
            conv = params.from_bytes(body).reshape(count, width)
        else:
            clen = width if variant == "rowenc" else 1
            keys, conv = dpf.deserialize_path_batch(body, count, clen, params)
        return cls(client, variant, width, conv, dense, keys, params)


def parse_message(data: bytes, params: RingParams = DEFAULT_PARAMS):
    kind, payload = unframe(data)
    if kind is MsgType.RETRIEVAL_REQ:
        return RetrievalRequest.from_payload(payload, params)
    if kind is MsgType.RETRIEVAL_RESP:
        return RetrievalResponse.from_payload(payload, params)
    if kind is MsgType.UPDATE:
        return UpdateMessage.from_payload(payload, params)
    raise ProtocolError(f"no payload schema for {kind.name}")


def retrieval_theoretical_bits(m_prime: int, m: int, params: RingParams = DEFAULT_PARAMS) -> int:
    """Information bits of one server's retrieval request."""
    return m_prime * dpf.key_bits_formula(dpf.domain_bits(m), 1, params)


def update_theoretical_bits(variant: str, m_prime: int, m: int, row_len: int, dense_len: int,
                            params: RingParams = DEFAULT_PARAMS) -> int:
    """Information bits of one server's update message."""
    n = dpf.domain_bits(m)
    dense = dense_len * params.b
    if variant == "final":
        return m_prime * row_len * params.b + dense
    if variant == "rowenc":
        return m_prime * dpf.key_bits_formula(n, row_len, params) + dense
    if variant == "init":
        return m_prime * row_len * dpf.key_bits_formula(n, 1, params) + dense
    if variant == "baseline":
        return m * row_len * params.b + dense
    raise ProtocolError(f"unknown variant {variant!r}")


# -- server state ---------------------------------------------------------------------


@dataclass
class ServerState:
    """One server's public model copy, accumulator and per-round path cache.

    With ``cache_paths=False`` the server keeps the retrieval keys instead
    of their evaluated leaves and re-evaluates them when the update arrives.
    """

    party: int
    m: int
    row_len: int
    table: np.ndarray  # (m, L) uint64
    theta: np.ndarray  # (|theta|,) uint64
    params: RingParams = DEFAULT_PARAMS
    cache_paths: bool = True
    path_cache: dict = field(default_factory=dict)
    acc_table: np.ndarray | None = None
    acc_theta: np.ndarray | None = None
    n_updates: int = 0

    def __post_init__(self) -> None:
        if self.party not in (0, 1):
            raise ProtocolError("party must be 0 or 1")
        self.table = np.array(self.table, dtype=np.uint64).reshape(self.m, self.row_len) & self.params.mask
        self.theta = np.array(self.theta, dtype=np.uint64).reshape(-1) & self.params.mask
        self.reset_round()

    @classmethod
    def pair(cls, table: np.ndarray, theta: np.ndarray, params: RingParams = DEFAULT_PARAMS,
             cache_paths: bool = True) -> tuple[ServerState, ServerState]:
        table = np.asarray(table, dtype=np.uint64)
        m, width = table.shape
        return (
            cls(0, m, width, table.copy(), np.array(theta, dtype=np.uint64), params, cache_paths),
            cls(1, m, width, table.copy(), np.array(theta, dtype=np.uint64), params, cache_paths),
        )

    @property
    def n(self) -> int:
        return dpf.domain_bits(self.m)

    def reset_round(self) -> None:
        self.path_cache = {}
        self.acc_table = np.zeros((self.m, self.row_len), dtype=np.uint64)
        self.acc_theta = np.zeros(self.theta.shape[0], dtype=np.uint64)
        self.n_updates = 0

    def table_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.params.to_bytes(self.table))
        h.update(self.params.to_bytes(self.theta))
        return h.hexdigest()

    def leaves(self, client: int) -> tuple[np.ndarray, np.ndarray]:
        """Evaluated ``(t, s)`` leaves for ``client``'s retrieval keys; pops the cache entry."""
        try:
            entry = self.path_cache.pop(client)
        except KeyError:
            raise CacheMissError(f"no retained retrieval state for client {client}") from None
        if isinstance(entry, PathKeyBatch):
            return dpf.eval_full_domain_batch(entry, self.m)
        return entry

    def drop(self, client: int) -> None:
        self.path_cache.pop(client, None)


def _key_chunk(width: int, m: int) -> int:
    return max(1, _CHUNK_BYTES // max(1, m * width * 8))


def _fold_leaves(party: int, t: np.ndarray, s: np.ndarray, cw: np.ndarray, params: RingParams) -> np.ndarray:
    """``sum_k (-1)^party (Convert(s_kj) + t_kj cw_k)`` for every leaf ``j``; returns (m, L)."""
    k, m = t.shape
    width = cw.shape[1]
    dt = prg.native_dtype(params)

    def part(sl: slice) -> np.ndarray:
        if dt is None:
            v = dpf.convert_eval_batch(0, t[sl], s[sl], cw[sl, None, :], params)
            return v.sum(axis=0, dtype=np.uint64)
        # native wrapping arithmetic is exact in the ring and avoids widening
        conv = prg.convert_native(s[sl], width, params)
        conv += t[sl, :, None].astype(dt) * cw[sl, None, :].astype(dt)
        return conv.sum(axis=0, dtype=dt).astype(np.uint64)

    out = _ordered_sum(part, k, _key_chunk(width, m))
    if out is None:
        return np.zeros((m, width), np.uint64)
    out &= params.mask
    return params.neg(out) if party else out


def _fold_keys(party: int, keys: PathKeyBatch, cw: np.ndarray, m: int, params: RingParams) -> np.ndarray:
    """Full-domain evaluate fresh keys and fold them as in :func:`_fold_leaves`."""
    width = cw.shape[1]
    step = max(1, min(_key_chunk(width, m), (1 << 26) // (m * 17)))

    def part(sl: slice) -> np.ndarray:
        t, s = dpf.eval_full_domain_batch(keys.take(sl), m)
        return _fold_leaves(party, t, s, cw[sl], params)

    out = _ordered_sum(part, len(keys), step)
    return np.zeros((m, width), np.uint64) if out is None else out & params.mask


# -- retrieval ------------------------------------------------------------------------


def client_build_retrieval(
    rng: np.random.Generator | None, padded: PaddedIndexSet, m: int, client: int = 0,
    params: RingParams = DEFAULT_PARAMS,
) -> tuple[RetrievalRequest, RetrievalRequest, PathSecretBatch]:
    """One selector key per slot for each server, plus the retained path secrets."""
    n = dpf.domain_bits(m)
    k0, k1, secrets_ = dpf.path_gen_batch(rng, n, padded.indices)
    ones = np.ones((len(padded), 1), dtype=np.uint64)
    cw = dpf.convert_gen_batch(secrets_, ones, params)
    return (
        RetrievalRequest(client, k0, cw, params),
        RetrievalRequest(client, k1, cw, params),
        secrets_,
    )


def server_answer_retrieval(state: ServerState, request: RetrievalRequest) -> RetrievalResponse:
    """Shares of ``table[alpha_k]`` for every key ``k`` in the request."""
    keys = request.keys
    if keys.party != state.party:
        raise ProtocolError(f"server {state.party} received keys for party {keys.party}")
    if keys.n != state.n:
        raise ProtocolError(f"key depth {keys.n} does not match the item domain (n={state.n})")
    p = state.params
    t, s = dpf.eval_full_domain_batch(keys, state.m)
    sel = dpf.convert_eval_batch(state.party, t, s, request.convert[:, None, :], p)[..., 0]
    rows = p.matmul(sel, state.table)
    state.path_cache[request.client] = (t, s) if state.cache_paths else keys
    return RetrievalResponse(request.client, rows, p)


def client_recover_rows(resp0: RetrievalResponse, resp1: RetrievalResponse) -> np.ndarray:
    """Ring rows for every slot, padding included."""
    if resp0.rows.shape != resp1.rows.shape or resp0.client != resp1.client:
        raise ProtocolError("responses are not aligned")
    return resp0.params.add(resp0.rows, resp1.rows)


def client_recover_embeddings(resp0: RetrievalResponse, resp1: RetrievalResponse,
                              padded: PaddedIndexSet) -> dict[int, np.ndarray]:
    """Dequantized rows of the genuine items; padding rows are discarded."""
    rows = client_recover_rows(resp0, resp1)
    if rows.shape[0] != len(padded):
        raise ProtocolError("response row count differs from the index set")
    reals = resp0.params.dequantize(rows)
    return {int(i): reals[k] for k, i in enumerate(padded.indices) if padded.real_mask[k]}


# -- aggregation ----------------------------------------------------------------------


def client_build_update(
    rng: np.random.Generator | None,
    variant: str,
    sparse: SparseUpdate,
    dense: np.ndarray | RingVector,
    retained: PathSecretBatch | None,
    padded: PaddedIndexSet,
    m: int,
    client: int = 0,
) -> tuple[UpdateMessage, UpdateMessage]:
    """Encode a client's sparse rows and dense gradient for the two servers."""
    p = sparse.params
    rows = sparse.rows
    k, width = rows.shape
    if k != len(padded):
        raise ProtocolError("sparse rows and index set disagree on m'")
    dense_vec = dense if isinstance(dense, RingVector) else RingVector(np.asarray(dense, dtype=np.uint64), p)
    dshare = ass_split(rng, dense_vec)
    d0, d1 = dshare.share0.elems, dshare.share1.elems
    n = dpf.domain_bits(m)
    if variant == "final":
        if retained is None or len(retained) != k:
            raise ProtocolError("the final variant needs this round's retained path secrets")
        cw = dpf.convert_gen_batch(retained, rows, p)
        return (UpdateMessage(client, variant, width, cw, d0, None, p),
                UpdateMessage(client, variant, width, cw, d1, None, p))
    if variant == "rowenc":
        k0, k1, sec = dpf.path_gen_batch(rng, n, padded.indices)
        cw = dpf.convert_gen_batch(sec, rows, p)
        return (UpdateMessage(client, variant, width, cw, d0, k0, p),
                UpdateMessage(client, variant, width, cw, d1, k1, p))
    if variant == "init":
        alphas = np.repeat(padded.indices, width)
        k0, k1, sec = dpf.path_gen_batch(rng, n, alphas)
        cw = dpf.convert_gen_batch(sec, rows.reshape(-1, 1), p)
        return (UpdateMessage(client, variant, width, cw, d0, k0, p),
                UpdateMessage(client, variant, width, cw, d1, k1, p))
    raise ProtocolError(f"unknown variant {variant!r}")


def server_accumulate_update(state: ServerState, message: UpdateMessage) -> None:
    """Add one client's contribution to this server's accumulator shares."""
    p = state.params
    if message.row_len != state.row_len:
        raise ProtocolError("update row length does not match the table")
    if message.dense.shape != state.acc_theta.shape:
        raise ProtocolError("dense share length does not match theta")
    if message.variant == "final":
        t, s = state.leaves(message.client)
        if t.shape[0] != message.convert.shape[0]:
            raise ProtocolError("convert word count differs from the retained key count")
        contrib = _fold_leaves(state.party, t, s, message.convert, p)
    elif message.variant == "rowenc":
        state.drop(message.client)
        contrib = _fold_keys(state.party, message.keys, message.convert, state.m, p)
    elif message.variant == "init":
        state.drop(message.client)
        width = state.row_len
        keys, cw = message.keys, message.convert
        if len(keys) % width:
            raise ProtocolError("init update key count is not a multiple of the row length")
        step = max(1, (1 << 20) // (state.m * 17 * width)) * width

        def part(sl: slice) -> np.ndarray:
            t, s = dpf.eval_full_domain_batch(keys.take(sl), state.m)
            v = dpf.convert_eval_batch(state.party, t, s, cw[sl, None, :], p)[..., 0]
            return v.reshape(-1, width, state.m).sum(axis=0, dtype=np.uint64).T

        out = _ordered_sum(part, len(keys), step)
        contrib = np.zeros((state.m, width), np.uint64) if out is None else out & p.mask
    elif message.variant == "baseline":
        if message.convert.shape != state.acc_table.shape:
            raise ProtocolError("baseline share has the wrong shape")
        contrib = message.convert
    else:
        raise ProtocolError(f"unknown variant {message.variant!r}")
    state.acc_table = p.add(state.acc_table, contrib)
    state.acc_theta = p.add(state.acc_theta, message.dense)
    state.n_updates += 1


def servers_reconstruct_and_apply(
    state0: ServerState,
    state1: ServerState,
    lr: float,
    aggregation: str = "mean",
    noise: Callable[[ServerState], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Combine accumulators, step both tables identically and start a new round.

    ``noise``, if given, is applied to each server's accumulator before the
    exchange (each server perturbs its own share). The update is
    ``x <- quantize(real(x) - lr * real(g) / c)`` with ``c`` the number of
    contributing clients (``mean``) or 1 (``sum``). Returns the
    reconstructed ring aggregates ``(g_table, g_theta)``.
    """
    if state0.table_hash() != state1.table_hash():
        raise DesyncError("server tables differ before the update")
    if state0.n_updates != state1.n_updates:
        raise DesyncError("servers accumulated different numbers of updates")
    if aggregation not in ("mean", "sum"):
        raise ProtocolError(f"unknown aggregation {aggregation!r}")
    p = state0.params
    if noise is not None:
        noise(state0)
        noise(state1)
    g_table = p.add(state0.acc_table, state1.acc_table)
    g_theta = p.add(state0.acc_theta, state1.acc_theta)
    count = state0.n_updates
    if count:
        scale = lr / count if aggregation == "mean" else lr
        new_table = apply_step(state0.table, g_table, scale, p)
        new_theta = apply_step(state0.theta, g_theta, scale, p)
        for st in (state0, state1):
            st.table = new_table.copy()
            st.theta = new_theta.copy()
    state0.reset_round()
    state1.reset_round()
    if state0.table_hash() != state1.table_hash():
        raise DesyncError("server tables differ after the update")
    return g_table, g_theta


def apply_step(x: np.ndarray, g: np.ndarray, scale: float, params: RingParams) -> np.ndarray:
    """``quantize(real(x) - scale * real(g))``; shared by every pipeline."""
    return params.quantize(params.dequantize(x) - scale * params.dequantize(g))


# -- baseline -------------------------------------------------------------------------


def baseline_download(state: ServerState, client: int = 0) -> RetrievalResponse:
    """Full plaintext model download from one server."""
    return RetrievalResponse(client, state.table.copy(), state.params)


def baseline_build_update(rng: np.random.Generator | None, sparse: SparseUpdate, padded: PaddedIndexSet,
                          m: int, dense: np.ndarray, client: int = 0) -> tuple[UpdateMessage, UpdateMessage]:
    """Scatter the rows into a dense ``(m, L)`` gradient and share all of it."""
    p = sparse.params
    width = sparse.rows.shape[1]
    full = np.zeros((m, width), dtype=np.uint64)
    full[padded.indices] = sparse.rows
    sh = ass_split(rng, RingVector(full.reshape(-1), p))
    dsh = ass_split(rng, RingVector(np.asarray(dense, dtype=np.uint64), p))
    return (
        UpdateMessage(client, "baseline", width, sh.share0.elems.reshape(m, width), dsh.share0.elems, None, p),
        UpdateMessage(client, "baseline", width, sh.share1.elems.reshape(m, width), dsh.share1.elems, None, p),
    )


def baseline_secfedrec_round(
    clients: Iterable[Callable[[np.ndarray], tuple[SparseUpdate, PaddedIndexSet, np.ndarray]]],
    state0: ServerState,
    state1: ServerState,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, str, int]]:
    """Run the baseline for a set of clients; accumulates into both servers.

    Each client is a callable taking the downloaded ring table and returning
    its sparse update, index set and dense ring gradient. Returns ledger
    entries ``(client_position, direction, bytes)``.
    """
    ledger: list[tuple[int, str, int]] = []
    for pos, train in enumerate(clients):
        down = baseline_download(state0, pos)
        ledger.append((pos, "down", len(down.to_bytes())))
        sparse, padded, dense = train(down.rows)
        u0, u1 = baseline_build_update(rng, sparse, padded, state0.m, dense, pos)
        b0, b1 = u0.to_bytes(), u1.to_bytes()
        ledger.append((pos, "up", len(b0) + len(b1)))
        server_accumulate_update(state0, parse_message(b0, state0.params))
        server_accumulate_update(state1, parse_message(b1, state1.params))
    return ledger


# -- message hygiene ------------------------------------------------------------------


def validate_message(data: bytes, m_prime: int, m: int, row_len: int, dense_len: int,
                     params: RingParams = DEFAULT_PARAMS) -> list[str]:
    """Check a framed client-to-server or server-to-client message against its schema.

    Returns a list of violations (empty when the message is clean). The
    schema admits only a client id, public counts and shape fields, key
    records and ring shares; slot counts must equal the public ``m'``.
    """
    problems: list[str] = []
    try:
        msg = parse_message(data, params)
    except (ProtocolError, dpf.DpfError, ValueError) as exc:
        return [f"unparseable: {exc}"]
    n = dpf.domain_bits(m)
    if isinstance(msg, RetrievalRequest):
        if len(msg.keys) != m_prime:
            problems.append(f"request carries {len(msg.keys)} keys, public m' is {m_prime}")
        if msg.keys.n != n:
            problems.append("key depth differs from the public domain size")
    elif isinstance(msg, RetrievalResponse):
        if msg.rows.shape not in ((m_prime, row_len), (m, row_len)):
            problems.append(f"response shape {msg.rows.shape} is not public")
    elif isinstance(msg, UpdateMessage):
        expected = {"final": m_prime, "rowenc": m_prime, "init": m_prime * row_len, "baseline": m}[msg.variant]
        if msg.convert.shape[0] != expected:
            problems.append(f"{msg.variant} update carries {msg.convert.shape[0]} entries, expected {expected}")
        if msg.row_len != row_len or msg.dense.shape[0] != dense_len:
            problems.append("update shape fields differ from the public model shape")
        if msg.keys is not None and msg.keys.n != n:
            problems.append("key depth differs from the public domain size")
        size = update_theoretical_bits(msg.variant, m_prime, m, row_len, dense_len, params)
        if len(data) * 8 < size:
            problems.append("update shorter than its information content")
    return problems


def find_leaks(data: bytes, items: Sequence[int], ratings: Sequence[float], private: Sequence[np.ndarray],
               params: RingParams = DEFAULT_PARAMS) -> list[str]:
    """Search raw message bytes for plaintext encodings of client secrets.

    Looks for the rated index list (as 2-, 4- and 8-byte little-endian
    integers), the rating list (float64, float32 and ring-encoded) and every
    private vector (float64, float32 and ring-encoded). Encodings shorter
    than 8 bytes are skipped because random key material matches them by
    chance. All-zero encodings are skipped because they match padding.
    """
    leaks: list[str] = []
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    candidates: list[tuple[str, bytes]] = []
    if items.size:
        srt = np.sort(items)
        for dt in ("<u2", "<u4", "<u8"):
            candidates.append((f"item indices as {dt}", items.astype(dt).tobytes()))
            candidates.append((f"sorted item indices as {dt}", srt.astype(dt).tobytes()))
    if ratings.size:
        candidates += [
            ("ratings as float64", ratings.astype("<f8").tobytes()),
            ("ratings as float32", ratings.astype("<f4").tobytes()),
            ("ratings ring-encoded", params.to_bytes(params.quantize(ratings))),
        ]
    for k, vec in enumerate(private):
        vec = np.atleast_1d(np.asarray(vec, dtype=np.float64))
        candidates += [
            (f"private vector {k} as float64", vec.astype("<f8").tobytes()),
            (f"private vector {k} as float32", vec.astype("<f4").tobytes()),
            (f"private vector {k} ring-encoded", params.to_bytes(params.quantize(vec))),
        ]
    for label, needle in candidates:
        if len(needle) >= 8 and any(needle) and needle in data:
            leaks.append(label)
    return leaks
