import csv
from dataclasses import replace
from itertools import combinations

import meshio
import numpy as np
import pytest

from potm.core import StepError
from potm.driver.cli import main
from potm.driver.deck import DeckError, ProblemDeck, parse_generator
from potm.driver.decks import box_mesh, rectangle_mesh, rod_cloud_mesh, taylor_rod_mesh
from potm.driver.mesh import (DegenerateElementError, Mesh, MeshFormatError, ingest_mesh,
                              read_mesh, write_mesh)
from potm.driver.metrics import TimingLog, format_table, metrics, write_table
from potm.driver.run import build_problem, run
from potm.driver.vtk import write_points, write_vtk
from potm.store import NodeStore, ParticleStore
from potm.subdomain import Subdomain

COPPER = dict(E=117e9, nu=0.35, H=100e6, sigma_y0=400e6, rho0=8930.0)


# ---------------------------------------------------------------------------
# mesh ingestion
# ---------------------------------------------------------------------------

UNIT_TET = """nodes 4 elements 1 dim 3
# comment lines are skipped
10 0 0 0 1
11 1 0 0
12 0 1 0
13 0 0 1
0 10 11 12 13
"""


def test_unit_tetrahedron(tmp_path):
    p = tmp_path / "tet.mesh"
    p.write_text(UNIT_TET)
    nodes, mps = ingest_mesh(p, 6.0)
    assert (len(nodes), len(mps)) == (4, 1)
    assert mps.volume[0] == pytest.approx(1 / 6, rel=1e-15)
    assert mps.mass[0] == pytest.approx(1.0, rel=1e-15)
    assert np.allclose(mps.x[0], 0.25)
    assert mps.domain_ids(0).tolist() == [0, 1, 2, 3]
    assert nodes.is_boundary.tolist() == [True, False, False, False]
    # barycentre of a tetrahedron: LME reduces to barycentric coordinates
    assert np.allclose(mps.sup_N[0], 0.25, atol=1e-9)


def test_two_tets_sharing_a_face():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]],
             [[0, 1, 2, 3], [1, 2, 3, 4]])
    nodes, mps = ingest_mesh(m, 1.0)
    assert (len(nodes), len(mps)) == (5, 2)
    assert mps.ids.tolist() == [5, 6]


def test_reference_scale_rod():
    nodes, mps = ingest_mesh(rod_cloud_mesh(), 8930.0)
    assert (len(nodes), len(mps)) == (5966, 28423)


def test_triangles_in_2d():
    nodes, mps = ingest_mesh(rectangle_mesh(3, 2, (3.0, 2.0)), 2.0)
    assert len(mps) == 12 and mps.volume.sum() == pytest.approx(6.0)


@pytest.mark.parametrize("text, line", [
    ("nodes 1 elements 0 dim 3\n0 0 0\n", 2),
    ("nodes x elements 0 dim 3\n", 1),
    ("nodes 4 elements 1 dim 3\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n0 0 1 2 9\n", 6),
    ("nodes 2 elements 0 dim 3\n0 0 0 0\n0 1 0 0\n", 3),
    ("points 1\n", 1),
])
def test_malformed_mesh_reports_line(tmp_path, text, line):
    p = tmp_path / "bad.mesh"
    p.write_text(text)
    with pytest.raises(MeshFormatError) as info:
        read_mesh(p)
    assert info.value.line == line


def test_degenerate_element_rejected():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2, 3]])
    with pytest.raises(DegenerateElementError):
        ingest_mesh(m, 1.0)


def test_mesh_round_trip(tmp_path):
    m = box_mesh((2, 1, 1))
    write_mesh(tmp_path / "b.mesh", m)
    r = read_mesh(tmp_path / "b.mesh")
    assert np.array_equal(r.coords, m.coords) and np.array_equal(r.elements, m.elements)
    assert np.array_equal(r.boundary, m.boundary)


def test_synthetic_rod_sizes():
    m = taylor_rod_mesh(6, 30)
    assert (m.n_nodes, m.n_elements) == (1519, 6480)
    assert m.volumes().sum() == pytest.approx(np.pi * 3.2e-3 ** 2 * 32.4e-3, rel=0.02)


def test_initial_velocity_bootstrap():
    v, dt = np.array([0, 0, -227.0]), 4e-9
    nodes, mps = ingest_mesh(box_mesh((1, 1, 1)), 1.0, velocity=v, dt=dt)
    assert np.allclose(nodes.du_next, v * dt) and np.allclose(nodes.du, v * dt)
    assert np.allclose(nodes.x - nodes.x_prev, v * dt)


# ---------------------------------------------------------------------------
# decks
# ---------------------------------------------------------------------------

DECK = """
generator = box(shape=(2, 2, 3), lengths=(1e-2, 1e-2, 1.5e-2))
material = j2
E = 117e9
nu = 0.35
rho0 = 8930
H = 100e6
sigma_y0 = 400e6
dt = 4e-9         # inline comment
n_steps = 3
min_support = 8
wall_point = 0, 0, 0
wall_normal = 0, 0, 1
initial_velocity = 0, 0, -227
stab_epsilon = auto
"""


def test_deck_parsing():
    d = ProblemDeck.from_text(DECK)
    assert d.dt == 4e-9 and d.n_steps == 3 and d.search.min_support == 8
    assert d.material_parameters().sigma_y0 == 400e6
    assert d.wall_normal.tolist() == [0, 0, 1] and d.stab_epsilon is None
    assert parse_generator("box(shape=(2, 2, 3))") == ("box", {"shape": (2, 2, 3)})


def test_shipped_decks_parse():
    from pathlib import Path
    for p in sorted((Path(__file__).parent.parent / "decks").glob("*.cfg")):
        ProblemDeck.from_file(p)


@pytest.mark.parametrize("extra, msg", [
    ("colour = red", "unknown key"),
    ("dt = -1", "dt"),
    ("wall_normal = 0, 1", "comma-separated"),
    ("mesh_path = a.mesh", "exactly one"),
    ("workers = 0", "workers"),
    ("material = rubber", "material"),
])
def test_deck_errors(extra, msg):
    text = "\n".join(line for line in DECK.splitlines() if not line.startswith(extra.split()[0] + " "))
    with pytest.raises(DeckError, match=msg):
        ProblemDeck.from_text(text + "\n" + extra + "\n")


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def small_deck(tmp_path, **kw):
    base = dict(generator="taylor_rod(n=3, nz=10)", material="j2", material_params=COPPER,
                dt=4e-9, n_steps=10, wall_point=np.zeros(3), wall_normal=np.array([0, 0, 1.0]),
                initial_velocity=np.array([0, 0, -227.0]), out=str(tmp_path))
    base.update(kw)
    return ProblemDeck(**base)


def test_zero_steps_is_setup_only(tmp_path):
    rep = run(small_deck(tmp_path, n_steps=0))
    assert rep.steps == 0 and rep.timing.rows == [] and rep.diagnostics == []
    assert len(rep.nodes) + len(rep.mps) > 0


def test_one_and_four_workers_identical(tmp_path):
    deck = small_deck(tmp_path, rebalance_interval=5, rebalance_threshold=0.0)
    prob = build_problem(deck)
    a = run(deck, workers=1, problem=prob)
    b = run(deck, workers=4, problem=prob)
    assert b.migrations and b.migrations[0][0] == 5
    assert a.nodes.bitwise_equal(b.nodes) and a.mps.bitwise_equal(b.mps)
    for d in b.diagnostics:
        assert abs(d.node_mass - d.mp_mass) <= 1e-12 * d.mp_mass


def test_phase_error_names_step_and_rank(tmp_path):
    deck = small_deck(tmp_path, dt=4e-6, n_steps=50)
    with pytest.raises(StepError) as info:
        run(deck, workers=2)
    assert info.value.step >= 0 and info.value.rank in (0, 1)
    assert "step" in str(info.value) and "phase" in str(info.value)


def test_vtk_frames_deterministic_and_spatially_partitioned(tmp_path):
    a = run(small_deck(tmp_path / "a", n_steps=4, write_interval=2), workers=3)
    b = run(small_deck(tmp_path / "b", n_steps=4, write_interval=2), workers=3)
    assert len(a.vtk_files) == 6
    for fa, fb in zip(a.vtk_files, b.vtk_files):
        assert fa.read_bytes() == fb.read_bytes()
    first = min(f.name[-11:] for f in a.vtk_files)
    frames = [meshio.read(f) for f in a.vtk_files if f.name.endswith(first)]
    assert len(frames) == 3
    pts = [f.points for f in frames]
    for f in frames:
        assert len(np.unique(f.point_data["owner"])) == 1
    # cut planes are set at step 0, particles have since moved at most |v| t
    tol = 2 * 227.0 * 2 * 4e-9
    for p, q in combinations(pts, 2):
        assert any(p[:, d].max() <= q[:, d].min() + tol or q[:, d].max() <= p[:, d].min() + tol
                   for d in range(3))


def test_vtk_empty_and_single_point(tmp_path):
    path = write_vtk(Subdomain(), 0, tmp_path, 1.0)
    assert meshio.read(path).points.shape == (0, 3)
    nodes = NodeStore(1, 0)
    sub = Subdomain(0, ParticleStore(nodes))
    for binary in (False, True):
        path = write_vtk(sub, 1 + binary, tmp_path, 1.0, binary=binary, temperature=True)
        m = meshio.read(path)
        assert m.points.tolist() == [[0.0, 0.0, 0.0]]
        assert set(m.point_data) >= {"kind", "owner", "displacement", "velocity", "von_mises",
                                     "eps_p", "temperature", "fractured"}


def test_vtk_binary_matches_ascii(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random((7, 3))
    data = {"s": rng.random(7), "v": rng.random((7, 3)), "k": np.arange(7, dtype=np.int32)}
    write_points(tmp_path / "a.vtk", x, data, binary=False)
    write_points(tmp_path / "b.vtk", x, data, binary=True)
    a, b = meshio.read(tmp_path / "a.vtk"), meshio.read(tmp_path / "b.vtk")
    assert np.array_equal(a.points, b.points)
    for k in data:
        assert np.array_equal(a.point_data[k], b.point_data[k])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_equal_times_give_unit_speedup():
    rows = metrics({1: 5.0, 2: 5.0, 4: 5.0})
    assert [r.speedup for r in rows] == [1.0, 1.0, 1.0]
    assert [r.efficiency for r in rows] == [1.0, 0.5, 0.25]


@pytest.mark.parametrize("t1, p, tp, speedup, eff", [
    (2697.26, 50, 86.19, 31.29, 62.58),
    (11348.8932, 100, 139.88, 81.13, 81.13),
])
def test_published_scaling_rows(t1, p, tp, speedup, eff):
    row = metrics({1: t1, p: tp})[1]
    assert abs(row.speedup - speedup) <= 0.01
    assert abs(100 * row.efficiency - eff) <= 0.01


def test_missing_baseline():
    with pytest.raises(KeyError, match="baseline"):
        metrics({2: 1.0, 4: 0.5})


def test_table_outputs(tmp_path):
    rows = metrics({1: 10.0, 2: 6.0})
    text = write_table(rows, tmp_path / "m.txt", tmp_path / "m.csv")
    assert text == format_table(rows) == (tmp_path / "m.txt").read_text()
    assert len(set(len(line) for line in text.splitlines())) == 1
    with open(tmp_path / "m.csv") as fh:
        got = list(csv.DictReader(fh))
    assert float(got[1]["speedup"]) == 10.0 / 6.0


def test_timing_log(tmp_path):
    rep = run(small_deck(tmp_path, n_steps=3), workers=2)
    log = rep.timing
    assert log.steps == [0, 1, 2]
    per = {}
    for step, phase, rank, sec, _, _ in log.rows:
        per.setdefault((step, rank), {})[phase] = sec
    for phases in per.values():
        assert sum(v for k, v in phases.items() if k != "total") <= phases["total"]
    log.write_csv(tmp_path / "t.csv")
    back = TimingLog.read_csv(tmp_path / "t.csv")
    assert back.rows == log.rows
    assert log.wallclock() == sum(max(s for st, ph, _, s, _, _ in log.rows
                                      if st == k and ph == "total") for k in log.steps)
    assert set(log.halo_sizes()) == {0, 1, 2}


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_run_and_metrics(tmp_path, capsys):
    cfg = tmp_path / "deck.cfg"
    cfg.write_text(DECK + "workers = 2\n")
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--steps", "2",
                 "--write-interval", "1"]) == 0
    assert (out / "timing_p2.csv").exists() and (out / "diagnostics_p2.csv").exists()
    assert len(list((out / "vtk").glob("*.vtk"))) == 4
    assert main(["--config", str(cfg), "--out", str(out), "--steps", "2", "--workers", "1"]) == 0
    capsys.readouterr()
    assert main(["--metrics", str(out / "timing_p1.csv"), str(out / "timing_p2.csv"),
                 "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == ["workers", "wallclock_s", "speedup",
                                             "efficiency_pct"]
    assert (out / "metrics.csv").exists()


def test_cli_scaling(tmp_path, capsys):
    cfg = tmp_path / "deck.cfg"
    cfg.write_text(DECK)
    assert main(["--config", str(cfg), "--out", str(tmp_path), "--scaling", "1,2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines[1:]] == ["1", "2"]


def test_cli_bad_deck(tmp_path):
    cfg = tmp_path / "deck.cfg"
    cfg.write_text("dt = 1\n")
    assert main(["--config", str(cfg)]) == 2


def test_cli_overrides_keep_deck(tmp_path):
    d = ProblemDeck.from_text(DECK, base_dir=tmp_path)
    assert replace(d, n_steps=7).search == d.search
