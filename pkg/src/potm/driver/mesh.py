"""Plain-text simplex meshes and their conversion to particles.

File layout::

    nodes N elements M dim D
    id x y z [b]        (N lines, b = 1 marks a boundary node)
    id v1 v2 v3 [v4]    (M lines, triangles in 2D, tetrahedra in 3D)

Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..lme import LME_OK
from ..search import shape_kernel
from ..store import MaterialPointStore, NodeStore


class MeshFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DegenerateElementError(ValueError):
    pass


@dataclass
class Mesh:
    coords: np.ndarray          # (N, 3)
    elements: np.ndarray        # (M, dim + 1) row indices into coords
    dim: int = 3
    boundary: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.boundary is None:
            self.boundary = np.zeros(len(self.coords), dtype=bool)
        if self.dim not in (2, 3):
            raise MeshFormatError(f"unsupported dimension {self.dim}")
        if self.elements.size and self.elements.shape[1] != self.dim + 1:
            raise MeshFormatError(f"{self.dim}D elements need {self.dim + 1} vertices")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def volumes(self) -> np.ndarray:
        """Unsigned element volumes (areas in 2D)."""
        v = self.coords[self.elements]
        e = v[:, 1:, : self.dim] - v[:, :1, : self.dim]
        fact = 6.0 if self.dim == 3 else 2.0
        return np.abs(np.linalg.det(e)) / fact

    def barycenters(self) -> np.ndarray:
        return self.coords[self.elements].mean(axis=1)


def read_mesh(path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines)
            if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise MeshFormatError("empty mesh file", 1)
    lineno, head = rows[0]
    if len(head) != 6 or head[0] != "nodes" or head[2] != "elements" or head[4] != "dim":
        raise MeshFormatError("expected 'nodes N elements M dim D'", lineno)
    try:
        n, m, dim = int(head[1]), int(head[3]), int(head[5])
    except ValueError:
        raise MeshFormatError("non-integer count in header", lineno) from None
    if len(rows) - 1 != n + m:
        raise MeshFormatError(f"expected {n} node and {m} element lines, found {len(rows) - 1}",
                              rows[-1][0])
    coords = np.zeros((n, 3))
    boundary = np.zeros(n, dtype=bool)
    file_ids = {}
    for k, (lineno, tok) in enumerate(rows[1:n + 1]):
        if len(tok) not in (4, 5):
            raise MeshFormatError("node line needs 'id x y z [b]'", lineno)
        try:
            nid = int(tok[0])
            coords[k] = [float(t) for t in tok[1:4]]
            boundary[k] = len(tok) == 5 and int(tok[4]) != 0
        except ValueError:
            raise MeshFormatError("malformed node line", lineno) from None
        if nid in file_ids:
            raise MeshFormatError(f"duplicate node id {nid}", lineno)
        file_ids[nid] = k
    nv = dim + 1
    elements = np.zeros((m, nv), dtype=np.int64)
    for k, (lineno, tok) in enumerate(rows[n + 1:]):
        if len(tok) != nv + 1:
            raise MeshFormatError(f"element line needs an id and {nv} vertices", lineno)
        try:
            elements[k] = [file_ids[int(t)] for t in tok[1:]]
        except ValueError:
            raise MeshFormatError("malformed element line", lineno) from None
        except KeyError as exc:
            raise MeshFormatError(f"unknown vertex id {exc.args[0]}", lineno) from None
    return Mesh(coords, elements, dim, boundary)


def write_mesh(path, mesh: Mesh) -> None:
    out = [f"nodes {mesh.n_nodes} elements {mesh.n_elements} dim {mesh.dim}"]
    for i, (x, b) in enumerate(zip(mesh.coords, mesh.boundary)):
        out.append(f"{i} {float(x[0])!r} {float(x[1])!r} {float(x[2])!r} {int(b)}")
    for i, e in enumerate(mesh.elements):
        out.append(f"{i} " + " ".join(str(int(v)) for v in e))
    Path(path).write_text("\n".join(out) + "\n")


def ingest_mesh(mesh, rho0: float, *, gamma: float = 1.8, newton_tol: float = 1e-10,
                newton_max_iter: int = 50, temperature: float = 0.0,
                velocity=None, dt: float = 0.0) -> tuple[NodeStore, MaterialPointStore]:
    """Nodes at mesh vertices and one material point per element barycentre.

    Node ids are ``0..N-1`` in file order, material point ids ``N + e``. The
    initial support of a material point is its element's vertices. With a
    ``velocity`` the state is bootstrapped for a uniform initial motion:
    ``du = v dt`` and previous positions one step back.
    """
    if not isinstance(mesh, Mesh):
        mesh = read_mesh(mesh)
    vol = mesh.volumes()
    scale = np.ptp(mesh.coords, axis=0).max() if mesh.n_nodes else 1.0
    bad = np.flatnonzero(vol <= 1e-14 * scale ** mesh.dim)
    if bad.size:
        raise DegenerateElementError(f"element {int(bad[0])} has zero volume")
    n, m = mesh.n_nodes, mesh.n_elements
    v = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
    shift = v * dt

    nodes = NodeStore(n, 0)
    nodes.ids = np.arange(n, dtype=np.int64)
    nodes.x = mesh.coords.copy()
    nodes.x0 = mesh.coords.copy()
    nodes.x_prev = mesh.coords - shift
    nodes.du[:] = shift
    nodes.du_next[:] = shift
    nodes.is_boundary = mesh.boundary.copy()

    nv = mesh.dim + 1
    mps = MaterialPointStore(m, nv)
    mps.ids = np.arange(n, n + m, dtype=np.int64)
    xc = mesh.barycenters()
    mps.x = xc
    mps.x0 = xc.copy()
    mps.x_prev = xc - shift
    mps.volume = vol
    mps.mass = rho0 * vol
    mps.density = mps.mass / mps.volume
    eye = np.eye(3)
    mps.F[:] = eye
    mps.dF[:] = eye
    mps.be[:] = eye
    mps.temperature[:] = temperature
    order = np.argsort(mesh.elements, axis=1)
    sup = np.take_along_axis(mesh.elements, order, axis=1)
    mps.sup_count[:] = nv
    mps.sup_ids = sup.astype(np.int64)
    dist = np.linalg.norm(mesh.coords[sup] - xc[:, None, :], axis=2)
    mps.reach = dist.max(axis=1)
    mps.spacing = mps.reach.copy()
    mps.support_radius = mps.reach.copy()
    bad = shape_kernel(mesh.coords, sup, mps.sup_count, xc, mps.spacing, np.arange(m), gamma,
                       newton_tol, newton_max_iter, mesh.dim, mps.sup_N, mps.sup_B)
    if bad >= 0:
        raise DegenerateElementError(f"element {bad}: shape functions could not be evaluated")
    assert LME_OK == 0
    return nodes, mps
