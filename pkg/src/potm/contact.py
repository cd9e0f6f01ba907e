"""Rigid-body contact.

* :class:`RigidWall` -- frictionless plane; penetrating nodes are projected
  back onto the plane after the nodal update.
* :class:`RigidTool` -- closed 2-D polygon (extruded in z) moving with a
  constant velocity. Penetrating nodes receive a penalty normal force and a
  Coulomb-capped tangential force.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit


@dataclass(frozen=True)
class RigidWall:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("wall normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


@dataclass(frozen=True)
class RigidTool:
    """Closed polygon ``profile`` (M, 2) at time zero, translated by ``velocity * t``."""

    profile: np.ndarray
    velocity: np.ndarray
    c_N: float
    c_T: float
    mu_f: float
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        prof = np.ascontiguousarray(self.profile, dtype=float)
        if prof.ndim != 2 or prof.shape[1] != 2 or len(prof) < 3:
            raise ValueError("tool profile must be an (M >= 3, 2) polygon")
        if self.c_N <= 0 or self.c_T <= 0 or self.mu_f < 0:
            raise ValueError("penalties must be positive and friction non-negative")
        m = len(prof)
        for i in range(m):
            for j in range(i + 2, m):
                if i == 0 and j == m - 1:
                    continue
                if _segments_cross(prof[i], prof[(i + 1) % m], prof[j], prof[(j + 1) % m]):
                    raise ValueError(f"tool profile self-intersects (edges {i} and {j})")
        object.__setattr__(self, "profile", prof)
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))

    def at(self, t: float) -> "RigidTool":
        """Tool translated to time ``t``."""
        return replace(self, offset=self.velocity * t)

    @property
    def vertices(self) -> np.ndarray:
        return self.profile + self.offset[:2]

    @property
    def orientation(self) -> float:
        """+1 for counter-clockwise vertex order, -1 otherwise."""
        p = self.profile
        area = np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
        return 1.0 if area > 0 else -1.0


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _gap(x, i, point, normal):
    g = 0.0
    for d in range(3):
        g = g + (x[i, d] - point[d]) * normal[d]
    return g


@njit(cache=True, nogil=True)
def wall_kernel(x, du_next, rows, point, normal):
    """Project penetrating nodes onto the plane; returns the number projected."""
    k = 0
    for q in range(rows.shape[0]):
        i = rows[q]
        g = _gap(x, i, point, normal)
        if g < 0.0:
            for d in range(3):
                x[i, d] = x[i, d] - g * normal[d]
                du_next[i, d] = du_next[i, d] - g * normal[d]
            # rounding can leave a gap of a few ulp below zero; step the
            # dominant component outward so a second pass is a no-op
            a = 0
            for d in range(1, 3):
                if abs(normal[d]) > abs(normal[a]):
                    a = d
            toward = np.inf if normal[a] > 0.0 else -np.inf
            while _gap(x, i, point, normal) < 0.0:
                old = x[i, a]
                x[i, a] = np.nextafter(old, toward)
                du_next[i, a] = du_next[i, a] + (x[i, a] - old)
            k += 1
    return k


@njit(cache=True, nogil=True)
def _inside(px, py, V):
    m = V.shape[0]
    inside = False
    j = m - 1
    for i in range(m):
        yi = V[i, 1]
        yj = V[j, 1]
        if (yi > py) != (yj > py):
            xc = V[i, 0] + (py - yi) * (V[j, 0] - V[i, 0]) / (yj - yi)
            if px < xc:
                inside = not inside
        j = i
    return inside


@njit(cache=True, nogil=True)
def _project(px, py, V, orient):
    """Closest boundary point; ties go to the lowest segment index.

    Returns ``(distance, nx, ny, segment)`` with ``n`` the outward normal.
    """
    m = V.shape[0]
    best = np.inf
    bx = 0.0
    by = 0.0
    seg = -1
    for i in range(m):
        ax = V[i, 0]
        ay = V[i, 1]
        ex = V[(i + 1) % m, 0] - ax
        ey = V[(i + 1) % m, 1] - ay
        L2 = ex * ex + ey * ey
        t = ((px - ax) * ex + (py - ay) * ey) / L2 if L2 > 0.0 else 0.0
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        cx = ax + t * ex
        cy = ay + t * ey
        d = math.sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy))
        if d < best:
            best = d
            bx = cx
            by = cy
            seg = i
    if best > 0.0:
        nx = (bx - px) / best
        ny = (by - py) / best
    else:
        ex = V[(seg + 1) % m, 0] - V[seg, 0]
        ey = V[(seg + 1) % m, 1] - V[seg, 1]
        L = math.sqrt(ex * ex + ey * ey)
        nx = orient * ey / L
        ny = -orient * ex / L
    return best, nx, ny, seg


@njit(cache=True, nogil=True)
def tool_kernel(x, du_next, slip, in_contact, rows, V, orient, tool_v, c_N, c_T, mu, dt,
                force):
    """Penalty + Coulomb forces on the listed nodes; returns the contact count.

    ``slip`` holds the accumulated tangential gap of each node and is reset on
    release. In the slip regime it is returned to the friction cone so that
    the stored gap matches the transmitted force.
    """
    k = 0
    for q in range(rows.shape[0]):
        i = rows[q]
        for d in range(3):
            force[i, d] = 0.0
        if not _inside(x[i, 0], x[i, 1], V):
            if in_contact[i]:
                for d in range(3):
                    slip[i, d] = 0.0
                in_contact[i] = False
            continue
        dist, nx, ny, _ = _project(x[i, 0], x[i, 1], V, orient)
        g = -dist
        n3 = np.array([nx, ny, 0.0])
        tN = np.empty(3)
        for d in range(3):
            tN[d] = -c_N * g * n3[d]
        tN_norm = -c_N * g
        # tangential gap increment from the relative velocity
        dg = np.empty(3)
        vn = 0.0
        for d in range(3):
            dg[d] = du_next[i, d] - tool_v[d] * dt
            vn = vn + dg[d] * n3[d]
        for d in range(3):
            dg[d] = dg[d] - vn * n3[d]
        if not in_contact[i]:
            for d in range(3):
                slip[i, d] = 0.0
        # keep only the tangential part of the stored gap
        sn = 0.0
        for d in range(3):
            sn = sn + slip[i, d] * n3[d]
        gT = np.empty(3)
        for d in range(3):
            gT[d] = slip[i, d] - sn * n3[d] + dg[d]
        tT = np.empty(3)
        tt = 0.0
        for d in range(3):
            tT[d] = -c_T * gT[d]
            tt = tt + tT[d] * tT[d]
        tt = math.sqrt(tt)
        cap = mu * tN_norm
        if tt > cap:
            dgn = math.sqrt(dg[0] * dg[0] + dg[1] * dg[1] + dg[2] * dg[2])
            if dgn > 0.0:
                for d in range(3):
                    tT[d] = -cap * dg[d] / dgn
            else:
                for d in range(3):
                    tT[d] = tT[d] * (cap / tt)
            for d in range(3):
                gT[d] = -tT[d] / c_T
        for d in range(3):
            slip[i, d] = gT[d]
            force[i, d] = tN[d] + tT[d]
        in_contact[i] = True
        k += 1
    return k


# ---------------------------------------------------------------------------
# single-node API
# ---------------------------------------------------------------------------

def wall_gap(x, wall: RigidWall) -> float:
    return float(np.dot(np.asarray(x, dtype=float) - wall.point, wall.normal))


def wall_enforce(node, wall: RigidWall, dt: float = 0.0) -> bool:
    """Project a penetrating node's candidate position onto the wall.

    The corresponding increment ``du_next`` is corrected by the same amount
    so the prescribed displacement and the position stay consistent.
    Returns True when the node was projected.
    """
    x = np.ascontiguousarray(node.x, dtype=float).reshape(1, 3)
    du = np.ascontiguousarray(node.du_next, dtype=float).reshape(1, 3)
    k = wall_kernel(x, du, np.zeros(1, np.int64), wall.point, wall.normal)
    node.x = x[0]
    node.du_next = du[0]
    return bool(k)


def tool_contact_force(node, tool: RigidTool, dt: float) -> np.ndarray:
    """Contact force on ``node`` from ``tool`` (already positioned at this step).

    Updates the node's contact memory (``slip``, ``in_contact``) and returns
    the force; the caller adds it to the boundary force.
    """
    x = np.ascontiguousarray(node.x, dtype=float).reshape(1, 3)
    du = np.ascontiguousarray(node.du_next, dtype=float).reshape(1, 3)
    slip = np.ascontiguousarray(node.slip, dtype=float).reshape(1, 3).copy()
    inc = np.array([bool(node.in_contact)])
    force = np.zeros((1, 3))
    tool_kernel(x, du, slip, inc, np.zeros(1, np.int64), tool.vertices, tool.orientation,
                tool.velocity, tool.c_N, tool.c_T, tool.mu_f, dt, force)
    node.slip = slip[0]
    node.in_contact = bool(inc[0])
    return force[0]


def default_penalty(E: float, h: float) -> float:
    """Penalty stiffness ``100 E / h`` used when none is configured."""
    return 100.0 * E / h
