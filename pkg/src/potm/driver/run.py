"""Problem setup and the parallel time loop."""
from __future__ import annotations

import inspect
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..contact import RigidTool, RigidWall, default_penalty
from ..core import SolverConfig, StepParams, initial_mp_halo, step
from ..lme import LmeParams
from ..materials import J2Material, JcParams, JohnsonCookMaterial
from ..partition import PartitionPlan, rcb
from ..store import MaterialPointStore, NodeStore, ParticleStore
from ..subdomain import Subdomain
from ..transport import MpiTransport, WorkerError, run_workers
from . import decks
from .deck import DeckError, ProblemDeck, parse_generator
from .mesh import Mesh, ingest_mesh, read_mesh
from .metrics import TimingLog
from .vtk import write_vtk

logger = logging.getLogger(__name__)

GENERATORS = {
    "box": decks.box_mesh,
    "jittered_box": decks.jittered_box_mesh,
    "cylinder": decks.cylinder_mesh,
    "taylor_rod": decks.taylor_rod_mesh,
    "rectangle": decks.rectangle_mesh,
}


@dataclass
class Problem:
    """Global initial particles plus the solver settings derived from a deck."""
    nodes: NodeStore
    mps: MaterialPointStore
    config: SolverConfig
    dt: float
    n_steps: int
    stab_epsilon: float
    body_force: np.ndarray
    mean_spacing: float
    temperature_output: bool = False


@dataclass
class Diagnostics:
    step: int
    mp_mass: float
    node_mass: float
    momentum: np.ndarray
    owned: list[int] = field(default_factory=list)


@dataclass
class RunReport:
    workers: int
    steps: int
    timing: TimingLog
    diagnostics: list[Diagnostics] = field(default_factory=list)
    vtk_files: list[Path] = field(default_factory=list)
    nodes: NodeStore | None = None
    mps: MaterialPointStore | None = None
    migrations: list[tuple[int, int]] = field(default_factory=list)


def load_mesh(deck: ProblemDeck) -> Mesh:
    if deck.mesh_path is not None:
        return read_mesh(deck.resolved_mesh_path())
    name, kwargs = parse_generator(deck.generator)
    if name not in GENERATORS:
        raise DeckError(f"unknown generator {name!r}; available: {sorted(GENERATORS)}")
    fn = GENERATORS[name]
    if "seed" in inspect.signature(fn).parameters:
        kwargs.setdefault("seed", deck.seed)
    try:
        return fn(**kwargs)
    except TypeError as exc:
        raise DeckError(f"generator {name}: {exc}") from None


def build_problem(deck: ProblemDeck, mesh: Mesh | None = None) -> Problem:
    params = deck.material_parameters()
    is_jc = isinstance(params, JcParams)
    mesh = mesh if mesh is not None else load_mesh(deck)
    if deck.initial_temperature is not None:
        t0 = deck.initial_temperature
    else:
        t0 = params.T_r if is_jc else 0.0
    nodes, mps = ingest_mesh(mesh, params.rho0, gamma=deck.gamma, temperature=t0,
                             velocity=deck.initial_velocity, dt=deck.dt)
    deck.search.check(mesh.dim)
    hbar = float(np.mean(mps.spacing))
    eps = deck.stab_epsilon if deck.stab_epsilon is not None else 0.01 * params.E * hbar ** 2
    material = JohnsonCookMaterial(params) if is_jc else J2Material(params)
    wall = RigidWall(deck.wall_point, deck.wall_normal) if deck.wall_point is not None else None
    tool = None
    if deck.tool_profile is not None:
        pen = default_penalty(params.E, hbar)
        tool = RigidTool(deck.tool_profile, deck.tool_velocity,
                         deck.c_N if deck.c_N is not None else pen,
                         deck.c_T if deck.c_T is not None else pen, deck.mu_f)
    config = SolverConfig(search=deck.search, lme=LmeParams(gamma=deck.gamma), material=material,
                          wall=wall, tool=tool, rebalance_interval=deck.rebalance_interval,
                          rebalance_threshold=deck.rebalance_threshold,
                          allow_inversion=deck.allow_inversion, dim=mesh.dim)
    return Problem(nodes, mps, config, deck.dt, deck.n_steps, eps, deck.body_force, hbar, is_jc)


def initial_plan(nodes: NodeStore, mps: MaterialPointStore, n_parts: int) -> PartitionPlan:
    return rcb(np.concatenate([nodes.ids, mps.ids]), np.concatenate([nodes.x, mps.x]), n_parts)


def make_subdomain(nodes: NodeStore, mps: MaterialPointStore, plan: PartitionPlan, rank: int,
                   dim: int = 3) -> Subdomain:
    n = nodes.where(plan.part_of(nodes.ids) == rank)
    m = mps.where(plan.part_of(mps.ids) == rank)
    n.owner[:] = rank
    m.owner[:] = rank
    return Subdomain(rank, ParticleStore(n, m), dim=dim)


def _diagnostics(sub: Subdomain, transport, k: int, dt: float) -> Diagnostics | None:
    n, m = sub.owned.nodes, sub.owned.mps
    local = (m.mass, n.mass, (n.mass[:, None] * n.du_next).sum(axis=0) / dt)
    got = transport.gather(local, root=0)
    if got is None:
        return None
    return Diagnostics(
        step=k,
        mp_mass=math.fsum(np.concatenate([g[0] for g in got])),
        node_mass=math.fsum(np.concatenate([g[1] for g in got])),
        momentum=np.sum([g[2] for g in got], axis=0),
        owned=[len(g[0]) + len(g[1]) for g in got],
    )


def run_worker(transport, deck: ProblemDeck, problem: Problem, collect: bool = True,
               steps_callback=None) -> RunReport | None:
    """Time loop of one rank; returns the gathered report on rank 0."""
    t_setup = time.perf_counter()
    rank = transport.rank
    cfg = problem.config
    plan = initial_plan(problem.nodes, problem.mps, transport.world_size)
    sub = make_subdomain(problem.nodes, problem.mps, plan, rank, cfg.dim)
    initial_mp_halo(sub, transport, cfg)
    log = TimingLog(setup_seconds=time.perf_counter() - t_setup)
    out_dir = Path(deck.out)
    if not out_dir.is_absolute():
        out_dir = deck.base_dir / out_dir
    files: list[Path] = []
    diags: list[Diagnostics] = []
    migrations: list[tuple[int, int]] = []
    for k in range(problem.n_steps):
        params = StepParams(problem.dt, problem.stab_epsilon, problem.body_force, k)
        rep = step(sub, params, transport, cfg)
        if rep.migration is not None:
            migrations.append((k, rep.migration.sent))
        done = k + 1
        if deck.write_interval and done % deck.write_interval == 0:
            t0 = time.perf_counter()
            files.append(write_vtk(sub, done, out_dir / "vtk", problem.dt, deck.vtk_binary,
                                   problem.temperature_output))
            dt_out = time.perf_counter() - t0
            rep.timings["output"] = dt_out
            rep.timings["total"] += dt_out
        log.add(rep, rank)
        if deck.diagnostics_interval and done % deck.diagnostics_interval == 0:
            d = _diagnostics(sub, transport, done, problem.dt)
            if d is not None:
                diags.append(d)
        if steps_callback is not None:
            steps_callback(sub, transport, done)
    logs = transport.gather((log, files, migrations), root=0)
    final = transport.gather((sub.owned.nodes, sub.owned.mps) if collect else None, root=0)
    if rank != 0:
        return None
    timing = TimingLog()
    all_files: list[Path] = []
    for lg, fl, _ in logs:
        timing.extend(lg)
        all_files.extend(fl)
    report = RunReport(transport.world_size, problem.n_steps, timing.sorted(), diags,
                       sorted(all_files), migrations=logs[0][2])
    if collect:
        report.nodes = NodeStore.concat([f[0] for f in final])
        report.mps = MaterialPointStore.concat([f[1] for f in final])
    return report


def run(deck: ProblemDeck, workers: int | None = None, problem: Problem | None = None,
        collect: bool = True, timeout: float = 600.0) -> RunReport:
    """Run a deck on the in-process backend, or under ``mpirun`` for ``cluster``.

    Phase errors propagate as :class:`~potm.core.StepError` naming the step
    and rank.
    """
    problem = problem if problem is not None else build_problem(deck)
    if deck.backend == "cluster":
        transport = MpiTransport()
        return run_worker(transport, deck, problem, collect)
    n = workers if workers is not None else deck.workers
    try:
        return run_workers(run_worker, n, (deck, problem, collect), timeout=timeout)[0]
    except WorkerError as exc:
        raise exc.original from None
