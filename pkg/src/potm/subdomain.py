"""Per-worker container of owned particles and halo copies."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import MaterialPointStore, NodeStore, ParticleStore


@dataclass
class Subdomain:
    rank: int = 0
    owned: ParticleStore = field(default_factory=ParticleStore)
    halo_nodes: NodeStore = field(default_factory=NodeStore)
    halo_mps: MaterialPointStore = field(default_factory=MaterialPointStore)
    neighbors: list[int] = field(default_factory=list)
    bbox: object | None = None
    dim: int = 3
    _local_nodes: NodeStore | None = field(default=None, repr=False)
    _local_mps: MaterialPointStore | None = field(default=None, repr=False)

    def clear_halos(self) -> None:
        self.halo_nodes = NodeStore()
        self.halo_mps = MaterialPointStore()
        self.invalidate()

    def invalidate(self) -> None:
        self._local_nodes = None
        self._local_mps = None

    def local_nodes(self) -> NodeStore:
        """Owned and halo nodes merged in id order (cached until invalidated)."""
        if self._local_nodes is None:
            self._local_nodes = NodeStore.concat([self.owned.nodes, self.halo_nodes])
        return self._local_nodes

    def local_mps(self) -> MaterialPointStore:
        if self._local_mps is None:
            self._local_mps = MaterialPointStore.concat([self.owned.mps, self.halo_mps])
        return self._local_mps

    def positions(self) -> np.ndarray:
        """Positions of all owned nodes and material points."""
        return np.concatenate([self.owned.nodes.x, self.owned.mps.x])

    @property
    def n_owned(self) -> int:
        return len(self.owned.nodes) + len(self.owned.mps)
