"""Dynamic halo regions.

Each worker publishes the bounding box of its owned particles together with
its halo width. Boxes are extended by the global maximum width, so two ranks
are neighbours exactly when their extended boxes intersect; the relation is
symmetric by construction. A rank sends a neighbour every owned particle of
the requested kind that lies inside the neighbour's extended box.

:func:`exchange` moves opaque byte messages in two rounds (sizes first, then
payloads) over any :class:`~potm.transport.Transport`.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .store import MaterialPointStore, MissingParticleError, NodeStore
from .wire import HaloMessage

logger = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


class MissingNeighborError(MissingParticleError):
    """A domain references a particle that is neither owned nor in the halo."""


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if np.any(lo > hi):
            raise ValueError("bounding box min exceeds max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, *arrays) -> "BoundingBox | None":
        pts = [np.asarray(a, dtype=float).reshape(-1, 3) for a in arrays if len(a)]
        if not pts:
            return None
        allp = np.concatenate(pts)
        return cls(allp.min(axis=0), allp.max(axis=0))

    def extended(self, r: float) -> "BoundingBox":
        return BoundingBox(self.min - r, self.max + r)

    def intersects(self, other: "BoundingBox") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(frozen=True)
class Neighborhood:
    sources: tuple[int, ...] = ()
    targets: tuple[int, ...] = ()

    @classmethod
    def symmetric(cls, ranks) -> "Neighborhood":
        r = tuple(sorted(set(int(x) for x in ranks)))
        return cls(r, r)


def all_gather_bboxes(transport, bbox: BoundingBox | None) -> list[BoundingBox | None]:
    return transport.all_gather(bbox)


def detect_neighbors(bboxes, my_rank: int, r_max: float, dim: int = 3) -> Neighborhood:
    """Ranks whose box extended by ``r_max`` meets this rank's extended box."""
    if r_max < 0:
        raise ValueError("r_max must be non-negative")
    mine = bboxes[my_rank]
    if mine is None:
        return Neighborhood()
    thin = mine.extent[:dim] <= r_max
    if np.any(thin):
        logger.info("rank %d: bounding box extent %s not larger than halo width %.3g; "
                    "rebalance needed", my_rank, mine.extent[:dim], r_max)
    me = mine.extended(r_max)
    out = [r for r, b in enumerate(bboxes)
           if r != my_rank and b is not None and me.intersects(b.extended(r_max))]
    return Neighborhood.symmetric(out)


def select_halo(store, neighbor_bbox: BoundingBox | None, r_max: float) -> np.ndarray:
    """Rows of owned particles inside the neighbour's box extended by ``r_max``."""
    if neighbor_bbox is None or len(store) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(neighbor_bbox.extended(r_max).contains(store.x))


def exchange(transport, neighborhood: Neighborhood, messages: dict[int, bytes]) -> dict[int, bytes]:
    """Send ``messages[t]`` to every target ``t`` and receive from every source.

    Round one exchanges byte sizes, round two the payloads; a payload whose
    length differs from the announced size raises :class:`ProtocolError`.
    """
    for t in neighborhood.targets:
        transport.send(t, struct.pack("<Q", len(messages.get(t, b""))))
    for t in neighborhood.targets:
        transport.send(t, messages.get(t, b""))
    received = {}
    for s in neighborhood.sources:
        raw = transport.recv(s)
        if len(raw) != 8:
            raise ProtocolError(f"rank {transport.rank}: malformed size message from rank {s}")
        (size,) = struct.unpack("<Q", raw)
        payload = transport.recv(s)
        if len(payload) != size:
            raise ProtocolError(f"rank {transport.rank}: rank {s} announced {size} bytes "
                                f"but sent {len(payload)}")
        received[s] = payload
    return received


@dataclass
class HaloReport:
    kind: str
    width: float
    neighbors: tuple[int, ...] = ()
    received: int = 0
    sent: dict[int, int] = field(default_factory=dict)


def build_halos(sub, transport, r_local: float, kind: str, dim: int = 3,
                check: bool = True) -> HaloReport:
    """Replace the ``kind`` ('node' or 'mp') halo of ``sub`` with fresh copies.

    ``r_local`` is this rank's halo width; the global maximum is used.
    """
    owned = sub.owned.nodes if kind == "node" else sub.owned.mps
    bbox = BoundingBox.from_points(sub.owned.nodes.x, sub.owned.mps.x)
    gathered = transport.all_gather((bbox, float(r_local)))
    boxes = [g[0] for g in gathered]
    r = max(g[1] for g in gathered)
    nb = detect_neighbors(boxes, transport.rank, r, dim) if transport.world_size > 1 \
        else Neighborhood()
    sub.bbox = bbox
    sub.neighbors = list(nb.targets)
    msgs = {}
    sent = {}
    for t in nb.targets:
        rows = select_halo(owned, boxes[t], r)
        msgs[t] = HaloMessage.from_stores(owned.take(rows)).to_bytes()
        sent[t] = len(rows)
    got = exchange(transport, nb, msgs)
    parts = []
    for s in nb.sources:
        nodes, mps = HaloMessage.from_bytes(got[s]).decode()
        parts.append(nodes if kind == "node" else mps)
    store_cls = NodeStore if kind == "node" else MaterialPointStore
    # every particle has a single owner, so the parts have disjoint ids
    halo = store_cls.concat(parts) if parts else store_cls()
    halo.is_halo[:] = True
    if kind == "node":
        sub.halo_nodes = halo
    else:
        sub.halo_mps = halo
    sub.invalidate()
    if check and kind == "node":
        _check_supports_resident(sub)
    return HaloReport(kind, r, nb.targets, len(halo), sent)


def _check_supports_resident(sub) -> None:
    mps = sub.owned.mps
    if len(mps) == 0:
        return
    local = sub.local_nodes()
    mask = np.arange(mps.width)[None, :] < mps.sup_count[:, None]
    ids = mps.sup_ids[mask]
    try:
        local.index(ids)
    except MissingParticleError as exc:
        raise MissingNeighborError(
            f"rank {sub.rank}: support node missing after nodal halo exchange ({exc})") from None
