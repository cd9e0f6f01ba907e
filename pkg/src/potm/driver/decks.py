"""Synthetic meshes for tests, benchmarks and the shipped example decks."""
from __future__ import annotations

from itertools import permutations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Mesh

# Kuhn split of the unit cube: one tetrahedron per axis permutation, all
# sharing the main diagonal; neighbouring cubes get conforming faces
_KUHN = []
for _perm in permutations(range(3)):
    _corner = [0, 0, 0]
    _tet = [0]
    for _ax in _perm:
        _corner[_ax] = 1
        _tet.append(_corner[0] + 2 * _corner[1] + 4 * _corner[2])
    _KUHN.append(_tet)
_KUHN = np.array(_KUHN)


def box_mesh(shape, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Structured box of ``nx*ny*nz`` cubes, each split into six tetrahedra."""
    nx, ny, nz = shape
    ax = [np.linspace(o, o + length, k + 1) for o, length, k in zip(origin, lengths, shape)]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    coords = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                              indexing="ij"))
    corners = np.stack([vid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))
                        for c in range(8)], axis=1)
    elements = corners[:, _KUHN].reshape(-1, 4)
    tol = 1e-12 * max(lengths)
    lo, hi = np.asarray(origin), np.asarray(origin) + np.asarray(lengths)
    boundary = np.any((coords <= lo + tol) | (coords >= hi - tol), axis=1)
    return Mesh(coords, elements, 3, boundary)


def jittered_box_mesh(shape, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                     jitter: float = 0.2, seed: int = 0) -> Mesh:
    """``box_mesh`` with interior nodes moved by up to ``jitter`` cell widths."""
    m = box_mesh(shape, lengths, origin)
    rng = np.random.default_rng(seed)
    cell = np.asarray(lengths, dtype=float) / np.asarray(shape)
    inner = ~m.boundary
    m.coords[inner] += rng.uniform(-jitter, jitter, (int(inner.sum()), 3)) * cell
    return m


def cylinder_mesh(n: int, nz: int, radius: float, length: float, z0: float = 0.0) -> Mesh:
    """Cylinder along z from a ``box_mesh`` with its square cross-section mapped to a disk."""
    m = box_mesh((n, n, nz), (2.0, 2.0, length), (-1.0, -1.0, z0))
    x, y = m.coords[:, 0].copy(), m.coords[:, 1].copy()
    m.coords[:, 0] = radius * x * np.sqrt(1.0 - 0.5 * y * y)
    m.coords[:, 1] = radius * y * np.sqrt(1.0 - 0.5 * x * x)
    return m


def taylor_rod_mesh(n: int = 6, nz: int = 30, radius: float = 3.2e-3,
                    length: float = 32.4e-3) -> Mesh:
    """Copper rod with its impact face on the plane ``z = 0``."""
    return cylinder_mesh(n, nz, radius, length)


def rectangle_mesh(nx: int, ny: int, lengths=(1.0, 1.0), origin=(0.0, 0.0)) -> Mesh:
    """Structured rectangle, each cell split into two triangles."""
    xs = np.linspace(origin[0], origin[0] + lengths[0], nx + 1)
    ys = np.linspace(origin[1], origin[1] + lengths[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    coords = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    i, j = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij"))
    v00, v10 = i * (ny + 1) + j, (i + 1) * (ny + 1) + j
    v01, v11 = v00 + 1, v10 + 1
    elements = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    tol = 1e-12 * max(lengths)
    lo = np.asarray(origin)
    hi = lo + np.asarray(lengths)
    boundary = np.any((coords[:, :2] <= lo + tol) | (coords[:, :2] >= hi - tol), axis=1)
    return Mesh(coords, elements, 2, boundary)


def rod_cloud_mesh(n_nodes: int = 5966, n_elements: int = 28423, radius: float = 3.2e-3,
                   length: float = 32.4e-3, seed: int = 0) -> Mesh:
    """Random rod mesh with exactly ``n_nodes`` vertices and ``n_elements`` tetrahedra.

    Vertices are uniform in the cylinder. The elements are the most compact
    tetrahedra of their Delaunay triangulation (smallest barycentre-vertex
    distance), which drops the long slivers skimming the hull. Near-flat
    tetrahedra are excluded first.
    """
    rng = np.random.default_rng(seed)
    pts = []
    while sum(len(p) for p in pts) < n_nodes:
        c = rng.uniform([-radius, -radius, 0.0], [radius, radius, length], (2 * n_nodes, 3))
        pts.append(c[c[:, 0] ** 2 + c[:, 1] ** 2 <= radius ** 2])
    nodes = np.concatenate(pts)[:n_nodes]
    tets = Delaunay(nodes).simplices
    if len(tets) < n_elements:
        raise ValueError(f"triangulation has only {len(tets)} tetrahedra")
    v = nodes[tets]
    vol = np.abs(np.linalg.det(v[:, 1:] - v[:, :1])) / 6.0
    reach = np.linalg.norm(v - v.mean(axis=1, keepdims=True), axis=2).max(axis=1)
    # regular tetrahedron: volume = 8 reach^3 / (9 sqrt 3)
    flat = vol < 1e-3 * reach ** 3
    if np.count_nonzero(~flat) < n_elements:
        raise ValueError(f"triangulation has only {np.count_nonzero(~flat)} usable tetrahedra")
    order = np.lexsort((reach, flat))
    keep = np.sort(order[:n_elements])
    return Mesh(nodes, tets[keep], 3)


def rod_cloud(n_nodes: int = 5966, n_mps: int = 28423, radius: float = 3.2e-3,
              length: float = 32.4e-3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Node and material point positions ``(node_x, mp_x)`` of :func:`rod_cloud_mesh`."""
    m = rod_cloud_mesh(n_nodes, n_mps, radius, length, seed)
    return m.coords, m.barycenters()
