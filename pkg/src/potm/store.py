"""Keyed particle storage.

Nodes and material points live in struct-of-arrays stores whose rows are kept
sorted by global particle id. Sorted rows give a deterministic iteration and
summation order, which is what makes runs with different worker counts
bitwise comparable. Single-particle access (``insert``/``remove``/``get``)
goes through the :class:`Node` and :class:`MaterialPoint` dataclasses; the
solver works on whole arrays.

Variable-length domains (node influence, material point support) are padded
2-D arrays with a per-row count; padding ids are ``-1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Iterator

import numpy as np

ID_DTYPE = np.int64
PAD_ID = -1


class DuplicateParticleError(KeyError):
    pass


class MissingParticleError(KeyError):
    pass


# ---------------------------------------------------------------------------
# single-particle views
# ---------------------------------------------------------------------------

def _vec(v=None):
    return np.zeros(3) if v is None else np.asarray(v, dtype=float).copy()


@dataclass
class Node:
    id: int
    x: np.ndarray = field(default_factory=_vec)
    x_prev: np.ndarray = field(default_factory=_vec)
    x0: np.ndarray = field(default_factory=_vec)
    du: np.ndarray = field(default_factory=_vec)
    du_next: np.ndarray = field(default_factory=_vec)
    mass: float = 0.0
    residual: np.ndarray = field(default_factory=_vec)
    boundary_force: np.ndarray = field(default_factory=_vec)
    slip: np.ndarray = field(default_factory=_vec)
    in_contact: bool = False
    is_boundary: bool = False
    is_halo: bool = False
    inert: bool = False
    owner: int = 0
    influence: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=ID_DTYPE))


@dataclass
class SupportDomain:
    """Support nodes of a material point, ascending by id."""
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=ID_DTYPE))
    N: np.ndarray = field(default_factory=lambda: np.zeros(0))
    B: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self):
        return len(self.ids)


@dataclass
class MaterialState:
    be: np.ndarray = field(default_factory=lambda: np.eye(3))
    eps_p_bar: float = 0.0
    temperature: float = 0.0
    fractured: bool = False


@dataclass
class MaterialPoint:
    id: int
    x: np.ndarray = field(default_factory=_vec)
    x_prev: np.ndarray = field(default_factory=_vec)
    x0: np.ndarray = field(default_factory=_vec)
    mass: float = 0.0
    volume: float = 0.0
    density: float = 0.0
    F: np.ndarray = field(default_factory=lambda: np.eye(3))
    dF: np.ndarray = field(default_factory=lambda: np.eye(3))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    body_force: np.ndarray = field(default_factory=_vec)
    support_radius: float = 0.0
    spacing: float = 0.0
    reach: float = 0.0
    state: MaterialState = field(default_factory=MaterialState)
    support: SupportDomain = field(default_factory=SupportDomain)
    is_halo: bool = False
    owner: int = 0


# ---------------------------------------------------------------------------
# struct-of-arrays stores
# ---------------------------------------------------------------------------

class _Store:
    """Rows sorted by id; ``FIELDS`` maps name -> (trailing shape, dtype)."""

    FIELDS: ClassVar[dict[str, tuple[tuple[int, ...], type]]]
    COUNT: ClassVar[str]
    RAGGED: ClassVar[dict[str, tuple[tuple[int, ...], type]]]
    # fields left out of :meth:`state_arrays` comparisons and the wire format
    LOCAL_FIELDS: ClassVar[tuple[str, ...]] = ("is_halo",)

    def __init__(self, n: int = 0, width: int = 0):
        self.ids = np.zeros(n, dtype=ID_DTYPE)
        for name, (shape, dt) in self.FIELDS.items():
            setattr(self, name, np.zeros((n, *shape), dtype=dt))
        setattr(self, self.COUNT, np.zeros(n, dtype=np.int64))
        for name, (shape, dt) in self.RAGGED.items():
            fill = PAD_ID if dt is ID_DTYPE else 0
            setattr(self, name, np.full((n, width, *shape), fill, dtype=dt))

    # -- basic protocol ------------------------------------------------------
    def __len__(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return getattr(self, next(iter(self.RAGGED))).shape[1]

    def __contains__(self, pid) -> bool:
        i = np.searchsorted(self.ids, pid)
        return bool(i < len(self.ids) and self.ids[i] == pid)

    def _all_names(self):
        return ["ids", *self.FIELDS, self.COUNT, *self.RAGGED]

    def validate(self) -> None:
        if len(self.ids) > 1 and not np.all(np.diff(self.ids) > 0):
            raise AssertionError("store ids not strictly ascending")
        for name in self._all_names():
            if getattr(self, name).shape[0] != len(self.ids):
                raise AssertionError(f"field {name} has wrong length")

    def index(self, ids) -> np.ndarray:
        """Row numbers of ``ids``; raises :class:`MissingParticleError`."""
        ids = np.asarray(ids, dtype=ID_DTYPE)
        rows = np.searchsorted(self.ids, ids)
        rows_c = np.minimum(rows, max(len(self.ids) - 1, 0))
        ok = (rows < len(self.ids)) & (self.ids[rows_c] == ids) if len(self.ids) else \
            np.zeros(ids.shape, dtype=bool)
        if not np.all(ok):
            missing = ids[~ok]
            raise MissingParticleError(
                f"{missing.size} particle id(s) not present, first {int(missing.flat[0])}")
        return rows

    def ensure_width(self, width: int) -> None:
        if width <= self.width:
            return
        for name, (shape, dt) in self.RAGGED.items():
            old = getattr(self, name)
            fill = PAD_ID if dt is ID_DTYPE else 0
            new = np.full((len(self), width, *shape), fill, dtype=dt)
            new[:, : old.shape[1]] = old
            setattr(self, name, new)

    def take(self, rows) -> "_Store":
        rows = np.asarray(rows, dtype=np.int64)
        out = self.__class__.__new__(self.__class__)
        for name in self._all_names():
            setattr(out, name, getattr(self, name)[rows].copy())
        return out

    def copy(self) -> "_Store":
        return self.take(np.arange(len(self)))

    def where(self, mask) -> "_Store":
        return self.take(np.flatnonzero(mask))

    @classmethod
    def concat(cls, stores) -> "_Store":
        """Merge stores into one sorted store; ids must be disjoint."""
        stores = [s for s in stores if s is not None]
        if not stores:
            return cls()
        width = max(s.width for s in stores)
        for s in stores:
            s.ensure_width(width)
        out = cls.__new__(cls)
        ids = np.concatenate([s.ids for s in stores])
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if len(ids) > 1:
            dup = np.flatnonzero(np.diff(ids) == 0)
            if dup.size:
                raise DuplicateParticleError(f"duplicate particle id {int(ids[dup[0]])}")
        out.ids = ids
        for name in out._all_names()[1:]:
            setattr(out, name, np.concatenate([getattr(s, name) for s in stores])[order])
        return out

    def trim(self) -> None:
        """Shrink ragged width to the largest count."""
        cnt = getattr(self, self.COUNT)
        w = int(cnt.max()) if len(cnt) else 0
        for name in self.RAGGED:
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[:, :w]))

    def domain_ids(self, row: int) -> np.ndarray:
        ids_name = next(iter(self.RAGGED))
        return getattr(self, ids_name)[row, : getattr(self, self.COUNT)[row]].copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Transported state with padding normalised, for equality checks."""
        self_t = self.copy()
        self_t.trim()
        return {n: getattr(self_t, n) for n in self_t._all_names()
                if n not in self.LOCAL_FIELDS}

    def bitwise_equal(self, other: "_Store", ignore=("owner",)) -> bool:
        """Byte equality of the transported state.

        ``owner`` is skipped by default since it depends on the partition.
        """
        a, b = self.state_arrays(), other.state_arrays()
        return all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
                   for k in a if k not in ignore)

    # -- single particles ---------------------------------------------------
    def insert(self, particle) -> None:
        if particle.id in self:
            raise DuplicateParticleError(f"particle id {particle.id} already present")
        single = self.from_particles([particle])
        merged = self.concat([self, single])
        self.__dict__.update(merged.__dict__)

    def remove(self, pid):
        if pid not in self:
            raise MissingParticleError(f"particle id {pid} not present")
        row = int(np.searchsorted(self.ids, pid))
        particle = self.get(pid)
        keep = np.ones(len(self), dtype=bool)
        keep[row] = False
        self.__dict__.update(self.where(keep).__dict__)
        return particle

    def get(self, pid):
        return self._row_to_particle(int(self.index([pid])[0]))

    def __iter__(self) -> Iterator:
        for row in range(len(self)):
            yield self._row_to_particle(row)

    @classmethod
    def from_particles(cls, particles) -> "_Store":
        particles = sorted(particles, key=lambda p: p.id)
        width = max((cls._domain_len(p) for p in particles), default=0)
        store = cls(len(particles), width)
        for row, p in enumerate(particles):
            store._fill_row(row, p)
        store.validate()
        if len(store) > 1 and np.any(np.diff(store.ids) == 0):
            raise DuplicateParticleError("duplicate particle id")
        return store


class NodeStore(_Store):
    FIELDS = {
        "x": ((3,), np.float64),
        "x_prev": ((3,), np.float64),
        "x0": ((3,), np.float64),
        "du": ((3,), np.float64),
        "du_next": ((3,), np.float64),
        "mass": ((), np.float64),
        "residual": ((3,), np.float64),
        "boundary_force": ((3,), np.float64),
        "slip": ((3,), np.float64),
        "in_contact": ((), np.bool_),
        "is_boundary": ((), np.bool_),
        "inert": ((), np.bool_),
        "owner": ((), np.int64),
        "is_halo": ((), np.bool_),
    }
    COUNT = "inf_count"
    RAGGED = {"inf_ids": ((), ID_DTYPE)}

    @staticmethod
    def _domain_len(p: Node) -> int:
        return len(p.influence)

    def _fill_row(self, row: int, p: Node) -> None:
        self.ids[row] = p.id
        for name in self.FIELDS:
            getattr(self, name)[row] = getattr(p, name)
        inf = np.unique(np.asarray(p.influence, dtype=ID_DTYPE))
        if len(inf) != len(p.influence):
            raise ValueError(f"node {p.id}: influence ids not unique")
        self.inf_count[row] = len(inf)
        self.inf_ids[row, : len(inf)] = inf

    def _row_to_particle(self, row: int) -> Node:
        kw = {name: np.copy(getattr(self, name)[row]) for name in self.FIELDS}
        for name in ("mass",):
            kw[name] = float(kw[name])
        for name in ("in_contact", "is_boundary", "inert", "is_halo"):
            kw[name] = bool(kw[name])
        kw["owner"] = int(kw["owner"])
        return Node(id=int(self.ids[row]), influence=self.domain_ids(row), **kw)


class MaterialPointStore(_Store):
    FIELDS = {
        "x": ((3,), np.float64),
        "x_prev": ((3,), np.float64),
        "x0": ((3,), np.float64),
        "mass": ((), np.float64),
        "volume": ((), np.float64),
        "density": ((), np.float64),
        "F": ((3, 3), np.float64),
        "dF": ((3, 3), np.float64),
        "sigma": ((3, 3), np.float64),
        "body_force": ((3,), np.float64),
        "support_radius": ((), np.float64),
        "spacing": ((), np.float64),
        "reach": ((), np.float64),
        "be": ((3, 3), np.float64),
        "eps_p": ((), np.float64),
        "temperature": ((), np.float64),
        "fractured": ((), np.bool_),
        "owner": ((), np.int64),
        "is_halo": ((), np.bool_),
    }
    COUNT = "sup_count"
    RAGGED = {"sup_ids": ((), ID_DTYPE), "sup_N": ((), np.float64),
              "sup_B": ((3,), np.float64)}
    _STATE = {"be": "be", "eps_p": "eps_p_bar", "temperature": "temperature",
              "fractured": "fractured"}

    @staticmethod
    def _domain_len(p: MaterialPoint) -> int:
        return len(p.support)

    def _fill_row(self, row: int, p: MaterialPoint) -> None:
        self.ids[row] = p.id
        for name in self.FIELDS:
            src = getattr(p.state, self._STATE[name]) if name in self._STATE else getattr(p, name)
            getattr(self, name)[row] = src
        sup = p.support
        ids = np.asarray(sup.ids, dtype=ID_DTYPE)
        if np.any(np.diff(ids) <= 0):
            raise ValueError(f"material point {p.id}: support ids must be strictly ascending")
        n = len(ids)
        self.sup_count[row] = n
        self.sup_ids[row, :n] = ids
        self.sup_N[row, :n] = sup.N
        self.sup_B[row, :n] = np.asarray(sup.B).reshape(n, 3) if n else 0.0

    def _row_to_particle(self, row: int) -> MaterialPoint:
        kw = {}
        for name in self.FIELDS:
            if name in self._STATE:
                continue
            v = getattr(self, name)[row]
            kw[name] = np.copy(v) if np.ndim(v) else v.item()
        n = int(self.sup_count[row])
        state = MaterialState(be=self.be[row].copy(), eps_p_bar=float(self.eps_p[row]),
                              temperature=float(self.temperature[row]),
                              fractured=bool(self.fractured[row]))
        sup = SupportDomain(ids=self.sup_ids[row, :n].copy(), N=self.sup_N[row, :n].copy(),
                            B=self.sup_B[row, :n].copy())
        return MaterialPoint(id=int(self.ids[row]), state=state, support=sup, **kw)

    def set_support(self, row: int, ids, N, B) -> None:
        n = len(ids)
        self.ensure_width(n)
        self.sup_count[row] = n
        self.sup_ids[row, :n] = ids
        self.sup_ids[row, n:] = PAD_ID
        self.sup_N[row, :n] = N
        self.sup_N[row, n:] = 0.0
        self.sup_B[row, :n] = B
        self.sup_B[row, n:] = 0.0


@dataclass
class ParticleStore:
    nodes: NodeStore = field(default_factory=NodeStore)
    mps: MaterialPointStore = field(default_factory=MaterialPointStore)

    def insert(self, particle) -> None:
        (self.nodes if isinstance(particle, Node) else self.mps).insert(particle)

    def remove(self, pid, kind: str):
        return (self.nodes if kind == "node" else self.mps).remove(pid)

    def derive_influence(self, *extra_mps: MaterialPointStore) -> None:
        derive_influence(self.nodes, self.mps, *extra_mps)

    def total_mass(self) -> float:
        return math.fsum(self.mps.mass)


def transpose_supports(mps_list) -> tuple[np.ndarray, np.ndarray]:
    """(node_id, mp_id) pairs of all supports, sorted by node then MP id."""
    node_ids = []
    mp_ids = []
    for mps in mps_list:
        if len(mps) == 0:
            continue
        mask = np.arange(mps.width)[None, :] < mps.sup_count[:, None]
        node_ids.append(mps.sup_ids[mask])
        mp_ids.append(np.broadcast_to(mps.ids[:, None], mask.shape)[mask])
    if not node_ids:
        return np.zeros(0, dtype=ID_DTYPE), np.zeros(0, dtype=ID_DTYPE)
    nid = np.concatenate(node_ids)
    pid = np.concatenate(mp_ids)
    order = np.lexsort((pid, nid))
    return nid[order], pid[order]


def derive_influence(nodes: NodeStore, *mps_list: MaterialPointStore) -> None:
    """Set node influence domains as the transpose of MP supports.

    Supports may reference nodes not held in ``nodes`` (e.g. a halo MP whose
    support reaches beyond the local region); those pairs are ignored. Nodes
    with an empty influence are flagged inert.
    """
    nid, pid = transpose_supports(mps_list)
    if len(nodes) == 0:
        return
    rows = np.searchsorted(nodes.ids, nid)
    rows_c = np.minimum(rows, len(nodes) - 1)
    keep = (rows < len(nodes)) & (nodes.ids[rows_c] == nid)
    rows, pid = rows[keep], pid[keep]
    counts = np.bincount(rows, minlength=len(nodes)).astype(np.int64)
    width = int(counts.max()) if len(counts) else 0
    starts = np.zeros(len(nodes) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    slot = np.arange(len(rows)) - starts[rows]
    inf = np.full((len(nodes), width), PAD_ID, dtype=ID_DTYPE)
    inf[rows, slot] = pid
    nodes.inf_ids = inf
    nodes.inf_count = counts
    nodes.inert = counts == 0
