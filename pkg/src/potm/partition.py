"""Recursive coordinate bisection and migration-based rebalancing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .halo import Neighborhood, exchange
from .store import ID_DTYPE, MaterialPointStore, NodeStore
from .wire import HaloMessage

logger = logging.getLogger(__name__)


class PartitionError(ValueError):
    pass


@dataclass
class PartitionPlan:
    ids: np.ndarray                      # ascending particle ids
    parts: np.ndarray                    # part of each id
    cuts: list[tuple[int, float]] = field(default_factory=list)
    part_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def assignment(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.parts.tolist()))

    def part_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=ID_DTYPE)
        rows = np.searchsorted(self.ids, ids)
        if np.any(rows >= len(self.ids)) or np.any(self.ids[np.minimum(rows, len(self.ids) - 1)] != ids):
            raise PartitionError("particle id not covered by the plan")
        return self.parts[rows]

    def relabeled(self, mapping: np.ndarray) -> "PartitionPlan":
        """Plan with part ``k`` renamed ``mapping[k]``."""
        counts = np.zeros_like(self.part_counts)
        counts[mapping] = self.part_counts
        return PartitionPlan(self.ids, mapping[self.parts], self.cuts, counts)


def part_sizes(total: int, n_parts: int) -> np.ndarray:
    base, extra = divmod(total, n_parts)
    return np.array([base + (i < extra) for i in range(n_parts)], dtype=np.int64)


def rcb(ids, positions, n_parts: int) -> PartitionPlan:
    """Recursive coordinate bisection with unit weights.

    Each region is split along the longest side of its bounding box. A region
    holding ``k`` parts sends ``ceil(k/2)`` of them left, together with the
    matching share of the global per-part quotas. Particles are ordered by
    (coordinate, id), so the result does not depend on input order.
    """
    ids = np.asarray(ids, dtype=ID_DTYPE)
    if n_parts < 1:
        raise PartitionError("n_parts must be >= 1")
    if len(ids) == 0:
        raise PartitionError("cannot partition an empty particle set")
    pos = np.asarray(positions, dtype=float).reshape(len(ids), -1)
    if n_parts > len(ids):
        raise PartitionError(f"{n_parts} parts requested for {len(ids)} particles")
    if len(np.unique(ids)) != len(ids):
        raise PartitionError("particle ids must be unique")
    sizes = part_sizes(len(ids), n_parts)
    parts = np.empty(len(ids), dtype=np.int64)
    cuts: list[tuple[int, float]] = []
    stack = [(np.arange(len(ids)), 0, n_parts)]
    while stack:
        rows, p0, k = stack.pop()
        if k == 1:
            parts[rows] = p0
            continue
        sub = pos[rows]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = np.lexsort((ids[rows], sub[:, axis]))
        kl = (k + 1) // 2
        nl = int(sizes[p0:p0 + kl].sum())
        left, right = rows[order[:nl]], rows[order[nl:]]
        cuts.append((axis, 0.5 * (pos[left[-1], axis] + pos[right[0], axis])))
        stack.append((right, p0 + kl, k - kl))
        stack.append((left, p0, kl))
    srt = np.argsort(ids)
    return PartitionPlan(ids[srt], parts[srt], cuts, np.bincount(parts, minlength=n_parts))


def imbalance(counts) -> float:
    """Largest count over the mean count (1.0 is perfect balance)."""
    c = np.asarray(counts, dtype=float)
    if len(c) == 0 or np.any(c < 0):
        raise ValueError("counts must be a non-empty list of non-negative numbers")
    if not c.any():
        raise ValueError("all counts are zero")
    return float(c.max() / c.mean())


def match_owners(plan: PartitionPlan, current_owner: np.ndarray, n_ranks: int) -> PartitionPlan:
    """Rename parts so that the number of particles keeping their owner is maximal."""
    overlap = np.zeros((n_ranks, n_ranks), dtype=np.int64)
    np.add.at(overlap, (plan.parts, current_owner), 1)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    mapping = np.empty(n_ranks, dtype=np.int64)
    mapping[rows] = cols
    return plan.relabeled(mapping)


@dataclass
class MigrationReport:
    sent: int
    received: int
    imbalance_before: float
    imbalance_after: float
    plan: PartitionPlan | None = None


def rebalance(sub, transport) -> MigrationReport:
    """Collective repartition of the owned particles of every worker.

    Halos are cleared, rank 0 computes a new plan from the gathered positions
    and broadcasts it, and particles are migrated to their new owners with
    their full state.
    """
    sub.clear_halos()
    nodes, mps = sub.owned.nodes, sub.owned.mps
    local = (np.concatenate([nodes.ids, mps.ids]), np.concatenate([nodes.x, mps.x]))
    gathered = transport.gather(local, root=0)
    plan = None
    before = after = 1.0
    if transport.rank == 0:
        ids = np.concatenate([g[0] for g in gathered])
        x = np.concatenate([g[1] for g in gathered])
        owner = np.concatenate([np.full(len(g[0]), r, dtype=np.int64)
                                for r, g in enumerate(gathered)])
        counts_before = np.array([len(g[0]) for g in gathered])
        plan = rcb(ids, x, transport.world_size)
        srt = np.argsort(ids)
        plan = match_owners(plan, owner[srt], transport.world_size)
        before, after = imbalance(counts_before), imbalance(plan.part_counts)
    plan, before, after = transport.bcast((plan, before, after), root=0)
    node_dest = plan.part_of(nodes.ids)
    mp_dest = plan.part_of(mps.ids)
    me = transport.rank
    others = [r for r in range(transport.world_size) if r != me]
    msgs = {r: HaloMessage.from_stores(nodes.where(node_dest == r), mps.where(mp_dest == r)).to_bytes()
            for r in others}
    sent = int(np.sum(node_dest != me) + np.sum(mp_dest != me))
    got = exchange(transport, Neighborhood.symmetric(others), msgs)
    in_nodes = [nodes.where(node_dest == me)]
    in_mps = [mps.where(mp_dest == me)]
    received = 0
    for r in others:
        n, m = HaloMessage.from_bytes(got[r]).decode()
        received += len(n) + len(m)
        in_nodes.append(n)
        in_mps.append(m)
    sub.owned.nodes = NodeStore.concat(in_nodes)
    sub.owned.mps = MaterialPointStore.concat(in_mps)
    sub.owned.nodes.owner[:] = me
    sub.owned.mps.owner[:] = me
    sub.invalidate()
    return MigrationReport(sent, received, before, after, plan)
