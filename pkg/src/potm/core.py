"""Explicit OTM time step.

One step on a subdomain runs, in order:

1. influence domains from owned + halo material point supports
2. lumped mass and residual assembly
3. stabilisation of the residual against under-integration
4. tool contact forces
5. nodal update (central difference) and wall projection
6. nodal halo exchange
7. optional rebalance
8. material point kinematics (position, deformation gradient, volume)
9. constitutive update
10. support search and shape function recomputation
11. material point halo exchange

All sums over a node's influence run in ascending material point id and all
per-particle arithmetic is shared between code paths, so a run's particle
states do not depend on the number of workers.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .contact import RigidTool, RigidWall, tool_kernel, wall_kernel
from .halo import MissingNeighborError, build_halos
from .lme import LmeParams
from .partition import MigrationReport, imbalance, rebalance
from .search import SearchConfig, reach_kernel, update_support_domains
from .store import MissingParticleError, derive_influence
from .subdomain import Subdomain
from .transport import SerialTransport

logger = logging.getLogger(__name__)


class StepError(RuntimeError):
    def __init__(self, phase: str, step: int, rank: int, exc: BaseException):
        super().__init__(f"step {step}, rank {rank}, phase '{phase}': "
                         f"{type(exc).__name__}: {exc}")
        self.phase = phase
        self.step = step
        self.rank = rank
        self.original = exc


class ElementInversionError(RuntimeError):
    pass


@dataclass
class StepParams:
    dt: float
    stab_epsilon: float = 0.0
    body_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    step_index: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stab_epsilon < 0:
            raise ValueError("stab_epsilon must be non-negative")
        self.body_force = np.asarray(self.body_force, dtype=float)


@dataclass
class SolverConfig:
    """Step settings that stay fixed over a run."""
    search: SearchConfig = field(default_factory=SearchConfig)
    lme: LmeParams = field(default_factory=LmeParams)
    material: object | None = None
    wall: RigidWall | None = None
    tool: RigidTool | None = None
    rebalance_interval: int = 500
    rebalance_threshold: float = 1.2
    allow_inversion: bool = False
    dim: int = 3


@dataclass
class StepReport:
    step: int
    timings: dict[str, float] = field(default_factory=dict)
    halo_nodes: int = 0
    halo_mps: int = 0
    owned_nodes: int = 0
    owned_mps: int = 0
    stab_skipped: int = 0
    wall_contacts: int = 0
    tool_contacts: int = 0
    fractured: int = 0
    migration: MigrationReport | None = None

    @property
    def total_time(self) -> float:
        return self.timings.get("total", sum(self.timings.values()))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _slot(sup_ids, cnt, p, nid):
    for k in range(cnt[p]):
        if sup_ids[p, k] == nid:
            return k
    return -1


@njit(cache=True, nogil=True)
def assemble_kernel(node_ids, inf_rows, inf_cnt, sup_ids, sup_cnt, sup_N, sup_B, mp_mass,
                    mp_vol, mp_sigma, mp_bf, gravity, mass, residual):
    """Lumped mass and residual; returns the first inconsistent node row or -1."""
    for i in range(node_ids.shape[0]):
        m = 0.0
        r0 = 0.0
        r1 = 0.0
        r2 = 0.0
        nid = node_ids[i]
        for q in range(inf_cnt[i]):
            p = inf_rows[i, q]
            k = _slot(sup_ids, sup_cnt, p, nid)
            if k < 0:
                return i
            N = sup_N[p, k]
            mp = mp_mass[p]
            v = mp_vol[p]
            Bx = sup_B[p, k, 0]
            By = sup_B[p, k, 1]
            Bz = sup_B[p, k, 2]
            s = mp_sigma[p]
            m = m + N * mp
            r0 = r0 + N * (mp_bf[p, 0] + gravity[0]) * mp - (s[0, 0] * Bx + s[0, 1] * By + s[0, 2] * Bz) * v
            r1 = r1 + N * (mp_bf[p, 1] + gravity[1]) * mp - (s[1, 0] * Bx + s[1, 1] * By + s[1, 2] * Bz) * v
            r2 = r2 + N * (mp_bf[p, 2] + gravity[2]) * mp - (s[2, 0] * Bx + s[2, 1] * By + s[2, 2] * Bz) * v
        mass[i] = m
        residual[i, 0] = r0
        residual[i, 1] = r1
        residual[i, 2] = r2
    return -1


@njit(cache=True, nogil=True)
def stabilize_kernel(node_ids, node_x, node_xp, inf_rows, inf_cnt, sup_ids, sup_cnt, sup_N,
                     mp_x, mp_xp, mp_dF, eps, residual):
    """Subtract ``eps * sum_p N_I e_Ip``; returns the number of skipped pairs."""
    skipped = 0
    e = np.empty(3)
    for i in range(node_ids.shape[0]):
        nid = node_ids[i]
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for q in range(inf_cnt[i]):
            p = inf_rows[i, q]
            k = _slot(sup_ids, sup_cnt, p, nid)
            d0 = node_xp[i, 0] - mp_xp[p, 0]
            d1 = node_xp[i, 1] - mp_xp[p, 1]
            d2 = node_xp[i, 2] - mp_xp[p, 2]
            L = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if L == 0.0:
                skipped += 1
                continue
            F = mp_dF[p]
            for a in range(3):
                e[a] = (node_x[i, a] - mp_x[p, a]
                        - (F[a, 0] * d0 + F[a, 1] * d1 + F[a, 2] * d2)) / L
            N = sup_N[p, k]
            c0 = c0 + N * e[0]
            c1 = c1 + N * e[1]
            c2 = c2 + N * e[2]
        residual[i, 0] = residual[i, 0] - eps * c0
        residual[i, 1] = residual[i, 1] - eps * c1
        residual[i, 2] = residual[i, 2] - eps * c2
    return skipped


@njit(cache=True, nogil=True)
def update_nodes_kernel(x, x_prev, du, du_next, mass, residual, bforce, inert, dt):
    dt2 = dt * dt
    for i in range(x.shape[0]):
        if inert[i] or not mass[i] > 0.0:
            continue
        c = dt2 / mass[i]
        for d in range(3):
            du[i, d] = du_next[i, d]
            du_next[i, d] = du[i, d] + c * (bforce[i, d] + residual[i, d])
            x_prev[i, d] = x[i, d]
            x[i, d] = x[i, d] + du_next[i, d]


@njit(cache=True, nogil=True)
def det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True, nogil=True)
def update_mps_kernel(sup_rows, sup_cnt, sup_N, sup_B, node_x, node_du, mp_x, mp_xp, mp_F,
                      mp_dF, mp_vol, mp_rho, mp_mass, mp_h, spacing_exp):
    """Material point kinematics; returns the first row with ``det dF <= 0`` or -1.

    ``spacing_exp`` is ``1/dim`` (0 freezes the spacing).
    """
    dF = np.empty((3, 3))
    Fn = np.empty((3, 3))
    bad = -1
    for p in range(sup_cnt.shape[0]):
        x0 = 0.0
        x1 = 0.0
        x2 = 0.0
        for a in range(3):
            for b in range(3):
                dF[a, b] = 1.0 if a == b else 0.0
        for k in range(sup_cnt[p]):
            j = sup_rows[p, k]
            N = sup_N[p, k]
            x0 = x0 + N * node_x[j, 0]
            x1 = x1 + N * node_x[j, 1]
            x2 = x2 + N * node_x[j, 2]
            for a in range(3):
                u = node_du[j, a]
                for b in range(3):
                    dF[a, b] = dF[a, b] + u * sup_B[p, k, b]
        J = det3(dF)
        if not J > 0.0:
            if bad < 0:
                bad = p
            continue
        mp_xp[p, 0] = mp_x[p, 0]
        mp_xp[p, 1] = mp_x[p, 1]
        mp_xp[p, 2] = mp_x[p, 2]
        mp_x[p, 0] = x0
        mp_x[p, 1] = x1
        mp_x[p, 2] = x2
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s = s + dF[a, c] * mp_F[p, c, b]
                Fn[a, b] = s
        for a in range(3):
            for b in range(3):
                mp_F[p, a, b] = Fn[a, b]
                mp_dF[p, a, b] = dF[a, b]
        mp_vol[p] = J * mp_vol[p]
        mp_rho[p] = mp_mass[p] / mp_vol[p]
        if spacing_exp > 0.0:
            mp_h[p] = mp_h[p] * J ** spacing_exp
    return bad


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def _rows_or_missing(store, ids, what: str, rank: int):
    try:
        return store.index(ids)
    except MissingParticleError as exc:
        raise MissingNeighborError(f"rank {rank}: {what}: {exc}") from None


def derive_local_influence(sub: Subdomain) -> None:
    derive_influence(sub.owned.nodes, sub.owned.mps, sub.halo_mps)


def _influence_rows(sub: Subdomain):
    nodes = sub.owned.nodes
    local = sub.local_mps()
    ids = nodes.inf_ids
    valid = ids >= 0
    rows = np.full(ids.shape, -1, dtype=np.int64)
    if valid.any():
        rows[valid] = _rows_or_missing(local, ids[valid], "influence MP", sub.rank)
    return rows, local


def assemble(sub: Subdomain, params: StepParams) -> None:
    nodes = sub.owned.nodes
    rows, mp = _influence_rows(sub)
    bad = assemble_kernel(nodes.ids, rows, nodes.inf_count, mp.sup_ids, mp.sup_count, mp.sup_N,
                          mp.sup_B, mp.mass, mp.volume, mp.sigma, mp.body_force,
                          params.body_force, nodes.mass, nodes.residual)
    if bad >= 0:
        raise MissingNeighborError(f"node {int(nodes.ids[bad])}: influence and support disagree")


def stabilize(sub: Subdomain, params: StepParams) -> int:
    if params.stab_epsilon == 0.0:
        return 0
    nodes = sub.owned.nodes
    rows, mp = _influence_rows(sub)
    skipped = stabilize_kernel(nodes.ids, nodes.x, nodes.x_prev, rows, nodes.inf_count,
                               mp.sup_ids, mp.sup_count, mp.sup_N, mp.x, mp.x_prev, mp.dF,
                               params.stab_epsilon, nodes.residual)
    if skipped:
        logger.debug("rank %d: %d coincident node/MP pairs skipped in stabilisation",
                     sub.rank, skipped)
    return skipped


def apply_tool(sub: Subdomain, tool: RigidTool | None, params: StepParams) -> int:
    nodes = sub.owned.nodes
    nodes.boundary_force[:] = 0.0
    if tool is None or len(nodes) == 0:
        return 0
    t = tool.at(params.step_index * params.dt)
    return tool_kernel(nodes.x, nodes.du_next, nodes.slip, nodes.in_contact,
                       np.arange(len(nodes)), t.vertices, t.orientation, t.velocity, t.c_N,
                       t.c_T, t.mu_f, params.dt, nodes.boundary_force)


def update_nodes(sub: Subdomain, params: StepParams, wall: RigidWall | None = None) -> int:
    n = sub.owned.nodes
    update_nodes_kernel(n.x, n.x_prev, n.du, n.du_next, n.mass, n.residual, n.boundary_force,
                        n.inert, params.dt)
    sub.invalidate()
    if wall is None or len(n) == 0:
        return 0
    return wall_kernel(n.x, n.du_next, np.arange(len(n)), wall.point, wall.normal)


def update_material_points(sub: Subdomain, params: StepParams, *, allow_inversion=False,
                           freeze_spacing=False) -> None:
    mps = sub.owned.mps
    if len(mps) == 0:
        return
    local = sub.local_nodes()
    valid = np.arange(mps.width)[None, :] < mps.sup_count[:, None]
    rows = np.zeros(mps.sup_ids.shape, dtype=np.int64)
    rows[valid] = _rows_or_missing(local, mps.sup_ids[valid], "support node", sub.rank)
    exp = 0.0 if freeze_spacing else 1.0 / sub.dim
    bad = update_mps_kernel(rows, mps.sup_count, mps.sup_N, mps.sup_B, local.x, local.du_next,
                            mps.x, mps.x_prev, mps.F, mps.dF, mps.volume, mps.density, mps.mass,
                            mps.spacing, exp)
    if bad >= 0:
        msg = f"material point {int(mps.ids[bad])}: non-positive deformation increment determinant"
        if not allow_inversion:
            raise ElementInversionError(msg)
        logger.warning("%s (skipped)", msg)
    reach_kernel(local.x, rows, mps.sup_count, mps.x, mps.reach)
    sub.invalidate()


def constitutive_update(sub: Subdomain, material, params: StepParams) -> None:
    mps = sub.owned.mps
    if material is None or len(mps) == 0:
        return
    material.update(mps, np.flatnonzero(~mps.fractured), params.dt)


# ---------------------------------------------------------------------------
# step orchestration
# ---------------------------------------------------------------------------

def _local_max(a, default=0.0) -> float:
    return float(np.max(a)) if len(a) else default


def _du_max(nodes) -> float:
    if len(nodes) == 0:
        return 0.0
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", nodes.du_next, nodes.du_next))))


def node_halo_width(sub: Subdomain, config: SolverConfig, transport) -> tuple[float, float]:
    """(global halo width for nodes, global search cap)."""
    mps = sub.owned.mps
    stats = transport.all_gather((_local_max(mps.reach), _local_max(mps.spacing),
                                  _du_max(sub.owned.nodes)))
    reach = max(s[0] for s in stats)
    cap = config.search.search_cap(max(s[1] for s in stats))
    du = max(s[2] for s in stats)
    return max(reach, cap) + 2.0 * du, cap


def initial_mp_halo(sub: Subdomain, transport, config: SolverConfig) -> None:
    """Material point halos needed before the first step."""
    build_halos(sub, transport, _local_max(sub.owned.mps.reach), "mp", config.dim)


def rebalance_due(params: StepParams, config: SolverConfig, counts) -> bool:
    k = params.step_index
    if config.rebalance_interval <= 0 or k == 0 or k % config.rebalance_interval:
        return False
    return imbalance(counts) > config.rebalance_threshold


def step(sub: Subdomain, params: StepParams, transport=None,
         config: SolverConfig | None = None) -> StepReport:
    """One parallel OTM step (collective over ``transport``)."""
    transport = transport or SerialTransport()
    config = config or SolverConfig()
    rep = StepReport(step=params.step_index)
    t_start = time.perf_counter()
    phase = "start"

    def timed(name, fn, *a, **kw):
        nonlocal phase
        phase = name
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        rep.timings[name] = rep.timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    try:
        timed("influence", derive_local_influence, sub)
        timed("assemble", assemble, sub, params)
        rep.stab_skipped = timed("stabilize", stabilize, sub, params)
        rep.tool_contacts = timed("contact", apply_tool, sub, config.tool, params)
        rep.wall_contacts = timed("update_nodes", update_nodes, sub, params, config.wall)
        width, cap = timed("node_halo", node_halo_width, sub, config, transport)
        hn = timed("node_halo", build_halos, sub, transport, width, "node", config.dim)
        counts = timed("rebalance", transport.all_gather, sub.n_owned)
        if transport.world_size > 1 and rebalance_due(params, config, counts):
            rep.migration = timed("rebalance", rebalance, sub, transport)
            hn = timed("rebalance", build_halos, sub, transport, width, "node", config.dim)
        timed("update_mps", update_material_points, sub, params,
              allow_inversion=config.allow_inversion,
              freeze_spacing=config.search.freeze_spacing)
        timed("constitutive", constitutive_update, sub, config.material, params)
        timed("search", update_support_domains, sub, config.search, config.lme, cap)
        hm = timed("mp_halo", build_halos, sub, transport, _local_max(sub.owned.mps.reach),
                   "mp", config.dim)
    except Exception as exc:
        raise StepError(phase, params.step_index, transport.rank, exc) from exc
    rep.halo_nodes = hn.received
    rep.halo_mps = hm.received
    rep.owned_nodes = len(sub.owned.nodes)
    rep.owned_mps = len(sub.owned.mps)
    rep.fractured = int(sub.owned.mps.fractured.sum())
    rep.timings["total"] = time.perf_counter() - t_start
    return rep


def serial_step(sub: Subdomain, params: StepParams, config: SolverConfig) -> None:
    """Reference single-process step without halos or transport."""
    derive_influence(sub.owned.nodes, sub.owned.mps)
    assemble(sub, params)
    stabilize(sub, params)
    apply_tool(sub, config.tool, params)
    update_nodes(sub, params, config.wall)
    cap = config.search.search_cap(_local_max(sub.owned.mps.spacing))
    update_material_points(sub, params, allow_inversion=config.allow_inversion,
                           freeze_spacing=config.search.freeze_spacing)
    constitutive_update(sub, config.material, params)
    update_support_domains(sub, config.search, config.lme, cap)
