"""Particle record wire format.

A record is a sequence of little-endian 8-byte words::

    id (u64) | kind (u64, 0 node / 1 MP) | domain_count (u64)
    fixed payload: one f64 per scalar of every transported field
    variable payload: domain_count entries
        node: influence MP id (u64)
        MP:   support node id (u64), N, Bx, By, Bz (f64 each)

A :class:`HaloMessage` is a little-endian u32 record count followed by the
concatenated records. :func:`serialize`/:func:`deserialize` handle one
particle with :mod:`struct`; :func:`encode_store`/:func:`decode_records` are
the vectorised batch equivalents used by the solver.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .store import (ID_DTYPE, MaterialPoint, MaterialPointStore, MaterialState, Node,
                    NodeStore, SupportDomain)

KIND_NODE = 0
KIND_MP = 1
HEADER_WORDS = 3
VAR_WORDS = {KIND_NODE: 1, KIND_MP: 5}
_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def _layout(store_cls):
    names = [n for n in store_cls.FIELDS if n not in store_cls.LOCAL_FIELDS]
    sizes = [int(np.prod(store_cls.FIELDS[n][0], dtype=int)) for n in names]
    return names, sizes


NODE_LAYOUT = _layout(NodeStore)
MP_LAYOUT = _layout(MaterialPointStore)
FIXED_WORDS = {KIND_NODE: sum(NODE_LAYOUT[1]), KIND_MP: sum(MP_LAYOUT[1])}
_STORE = {KIND_NODE: NodeStore, KIND_MP: MaterialPointStore}
_LAYOUT = {KIND_NODE: NODE_LAYOUT, KIND_MP: MP_LAYOUT}


def record_words(kind: int, domain_count: int) -> int:
    return HEADER_WORDS + FIXED_WORDS[kind] + VAR_WORDS[kind] * domain_count


# ---------------------------------------------------------------------------
# single record (struct based)
# ---------------------------------------------------------------------------

def _fixed_values(p) -> list[float]:
    kind = KIND_NODE if isinstance(p, Node) else KIND_MP
    names, _ = _LAYOUT[kind]
    vals: list[float] = []
    for name in names:
        if kind == KIND_MP and name in MaterialPointStore._STATE:
            v = getattr(p.state, MaterialPointStore._STATE[name])
        else:
            v = getattr(p, name)
        vals.extend(float(x) for x in np.ravel(v))
    return vals


def serialize(particle) -> bytes:
    """Encode a single :class:`Node` or :class:`MaterialPoint`."""
    if isinstance(particle, Node):
        dom = np.asarray(particle.influence, dtype=ID_DTYPE)
        head = struct.pack("<3Q", particle.id, KIND_NODE, len(dom))
        fixed = _fixed_values(particle)
        var = struct.pack(f"<{len(dom)}Q", *(int(i) for i in dom))
    elif isinstance(particle, MaterialPoint):
        sup = particle.support
        head = struct.pack("<3Q", particle.id, KIND_MP, len(sup))
        fixed = _fixed_values(particle)
        var = b"".join(struct.pack("<Q4d", int(i), float(n), *map(float, b))
                       for i, n, b in zip(sup.ids, sup.N, np.reshape(sup.B, (-1, 3))))
    else:
        raise TypeError(f"cannot serialize {type(particle).__name__}")
    return head + struct.pack(f"<{len(fixed)}d", *fixed) + var


def deserialize(buf: bytes, offset: int = 0):
    """Decode one record; returns ``(particle, next_offset)``."""
    if len(buf) - offset < 24:
        raise DecodeError("truncated record header", offset)
    pid, kind, count = struct.unpack_from("<3Q", buf, offset)
    if kind not in FIXED_WORDS:
        raise DecodeError(f"unknown particle kind {kind}", offset + 8)
    end = offset + 8 * record_words(kind, count)
    if end > len(buf):
        raise DecodeError(f"truncated record for particle {pid}", offset)
    pos = offset + 24
    names, sizes = _LAYOUT[kind]
    fixed = struct.unpack_from(f"<{FIXED_WORDS[kind]}d", buf, pos)
    pos += 8 * FIXED_WORDS[kind]
    store_cls = _STORE[kind]
    kw = {}
    k = 0
    for name, size in zip(names, sizes):
        shape, dt = store_cls.FIELDS[name]
        vals = np.array(fixed[k:k + size]).reshape(shape).astype(dt)
        kw[name] = vals if shape else vals.item()
        k += size
    if kind == KIND_NODE:
        ids = np.array(struct.unpack_from(f"<{count}Q", buf, pos), dtype=ID_DTYPE)
        return Node(id=pid, influence=ids, **kw), end
    entries = np.array(struct.unpack_from(f"<{5 * count}d", buf, pos)).reshape(count, 5)
    ids = np.array([struct.unpack_from("<Q", buf, pos + 40 * j)[0] for j in range(count)],
                   dtype=ID_DTYPE)
    state = MaterialState(be=kw.pop("be"), eps_p_bar=kw.pop("eps_p"),
                          temperature=kw.pop("temperature"), fractured=kw.pop("fractured"))
    sup = SupportDomain(ids=ids, N=entries[:, 1].copy(), B=entries[:, 2:5].copy())
    return MaterialPoint(id=pid, state=state, support=sup, **kw), end


# ---------------------------------------------------------------------------
# batch encoding
# ---------------------------------------------------------------------------

def _fixed_matrix(store, kind) -> np.ndarray:
    names, sizes = _LAYOUT[kind]
    n = len(store)
    cols = [np.asarray(getattr(store, name), dtype=np.float64).reshape(n, size)
            for name, size in zip(names, sizes)]
    return np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))


def encode_store(store) -> bytes:
    """Concatenated records for every row of a node or MP store."""
    kind = KIND_NODE if isinstance(store, NodeStore) else KIND_MP
    n = len(store)
    if n == 0:
        return b""
    F = FIXED_WORDS[kind]
    w = VAR_WORDS[kind]
    cnt = getattr(store, store.COUNT).astype(np.int64)
    lens = HEADER_WORDS + F + w * cnt
    offs = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lens, out=offs[1:])
    u = np.zeros(int(offs[-1]), dtype=_U64)
    f = u.view(_F64)
    start = offs[:-1]
    u[start] = store.ids.astype(np.uint64)
    u[start + 1] = kind
    u[start + 2] = cnt.astype(np.uint64)
    f[start[:, None] + HEADER_WORDS + np.arange(F)[None, :]] = _fixed_matrix(store, kind)
    width = store.width
    mask = np.arange(width)[None, :] < cnt[:, None]
    rows, slots = np.nonzero(mask)
    base = start[rows] + HEADER_WORDS + F + w * slots
    if kind == KIND_NODE:
        u[base] = store.inf_ids[rows, slots].astype(np.uint64)
    else:
        u[base] = store.sup_ids[rows, slots].astype(np.uint64)
        f[base + 1] = store.sup_N[rows, slots]
        B = store.sup_B[rows, slots]
        f[base + 2] = B[:, 0]
        f[base + 3] = B[:, 1]
        f[base + 4] = B[:, 2]
    return u.tobytes()


@njit(cache=True)
def _scan(u, n_records, fixed_node, fixed_mp):
    offs = np.empty(n_records, dtype=np.int64)
    kinds = np.empty(n_records, dtype=np.int64)
    counts = np.empty(n_records, dtype=np.int64)
    pos = 0
    total = u.shape[0]
    for i in range(n_records):
        if pos + 3 > total:
            return offs, kinds, counts, i, pos, 1
        k = np.int64(u[pos + 1])
        c = np.int64(u[pos + 2])
        if k == 0:
            size = 3 + fixed_node + c
        elif k == 1:
            size = 3 + fixed_mp + 5 * c
        else:
            return offs, kinds, counts, i, pos, 2
        if c < 0 or pos + size > total:
            return offs, kinds, counts, i, pos, 1
        offs[i] = pos
        kinds[i] = k
        counts[i] = c
        pos += size
    return offs, kinds, counts, n_records, pos, 0


def _decode_kind(u, f, offs, counts, kind):
    store_cls = _STORE[kind]
    n = len(offs)
    width = int(counts.max()) if n else 0
    store = store_cls(n, width)
    store.ids = u[offs].astype(ID_DTYPE)
    names, sizes = _LAYOUT[kind]
    F = FIXED_WORDS[kind]
    fixed = f[offs[:, None] + HEADER_WORDS + np.arange(F)[None, :]]
    k = 0
    for name, size in zip(names, sizes):
        shape, dt = store_cls.FIELDS[name]
        setattr(store, name, fixed[:, k:k + size].reshape((n, *shape)).astype(dt))
        k += size
    setattr(store, store_cls.COUNT, counts.copy())
    w = VAR_WORDS[kind]
    mask = np.arange(width)[None, :] < counts[:, None]
    rows, slots = np.nonzero(mask)
    base = offs[rows] + HEADER_WORDS + F + w * slots
    if kind == KIND_NODE:
        store.inf_ids[rows, slots] = u[base].astype(ID_DTYPE)
    else:
        store.sup_ids[rows, slots] = u[base].astype(ID_DTYPE)
        store.sup_N[rows, slots] = f[base + 1]
        store.sup_B[rows, slots, 0] = f[base + 2]
        store.sup_B[rows, slots, 1] = f[base + 3]
        store.sup_B[rows, slots, 2] = f[base + 4]
    order = np.argsort(store.ids, kind="stable")
    return store.take(order)


def decode_records(payload: bytes, n_records: int) -> tuple[NodeStore, MaterialPointStore]:
    """Decode ``n_records`` concatenated records into node and MP stores."""
    if len(payload) % 8:
        raise DecodeError("payload length not a multiple of 8", len(payload))
    u = np.frombuffer(payload, dtype=_U64)
    f = u.view(_F64)
    offs, kinds, counts, done, pos, err = _scan(u, n_records, FIXED_WORDS[KIND_NODE],
                                                FIXED_WORDS[KIND_MP])
    if err == 1:
        raise DecodeError(f"truncated record {done} of {n_records}", 8 * pos)
    if err == 2:
        raise DecodeError(f"unknown particle kind in record {done}", 8 * pos + 8)
    if pos != len(u):
        raise DecodeError(f"{len(u) - pos} trailing words after {n_records} records", 8 * pos)
    is_node = kinds == KIND_NODE
    nodes = _decode_kind(u, f, offs[is_node], counts[is_node], KIND_NODE)
    mps = _decode_kind(u, f, offs[~is_node], counts[~is_node], KIND_MP)
    return nodes, mps


@dataclass
class HaloMessage:
    count: int
    records: bytes = b""

    @classmethod
    def from_stores(cls, *stores) -> "HaloMessage":
        stores = [s for s in stores if s is not None and len(s)]
        return cls(sum(len(s) for s in stores), b"".join(encode_store(s) for s in stores))

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.count) + self.records

    @classmethod
    def from_bytes(cls, buf: bytes) -> "HaloMessage":
        if len(buf) < 4:
            raise DecodeError("truncated message header", 0)
        (count,) = struct.unpack_from("<I", buf, 0)
        return cls(count, bytes(buf[4:]))

    def decode(self) -> tuple[NodeStore, MaterialPointStore]:
        try:
            return decode_records(self.records, self.count)
        except DecodeError as exc:
            raise DecodeError(str(exc).rsplit(" at byte", 1)[0], exc.offset + 4) from None
