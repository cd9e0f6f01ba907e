import numpy as np
import pytest

from potm.lme import LmeParams, evaluate
from potm.search import (SearchConfig, SupportUnsatisfiableError, build_grid, query_radius,
                         update_supports)
from potm.store import MaterialPoint, MaterialPointStore


def brute(ids, X, x, r):
    d2 = ((X - x) ** 2).sum(axis=1)
    return np.sort(ids[d2 <= r * r])


def test_single_node_grid():
    g = build_grid([5], [[1.0, 2.0, 3.0]], 1.0)
    assert len(g.cells()) == 1


def test_cell_index_formula():
    g = build_grid([0, 1], [[0.0, 0, 0], [2.5, 0, 0]], 1.0)
    assert sorted(k[0] for k in g.cells()) == [0, 2]


def test_every_node_in_exactly_one_cell():
    rng = np.random.default_rng(0)
    X = rng.random((1000, 3))
    ids = rng.permutation(10 ** 5)[:1000]
    g = build_grid(ids, X, 0.13)
    members = [pid for cell in g.cells().values() for pid, _ in cell]
    assert sorted(members) == sorted(ids.tolist())
    for idx, cell in g.cells().items():
        for pid, x in cell:
            assert tuple(g.cell_index(x).tolist()) == idx


def test_rebuild_idempotent():
    rng = np.random.default_rng(1)
    X = rng.random((200, 3))
    a = build_grid(np.arange(200), X, 0.2)
    b = build_grid(np.arange(200), X, 0.2)
    assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("keys", "starts", "rows"))


def test_empty_grid_and_closed_ball():
    assert len(query_radius(build_grid([], np.zeros((0, 3)), 1.0), [0, 0, 0], 0.5)) == 0
    g = build_grid([1, 2], [[0.0, 0, 0], [0.5, 0, 0]], 1.0)
    assert list(query_radius(g, [0.0, 0, 0], 0.5)) == [1, 2]


def test_radius_above_cell_size_rejected():
    g = build_grid([1], [[0.0, 0, 0]], 1.0)
    with pytest.raises(ValueError):
        query_radius(g, [0, 0, 0], 1.5)


def test_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(5):
        X = rng.random((1000, 3))
        ids = rng.permutation(5000)[:1000]
        cs = 0.15
        g = build_grid(ids, X, cs)
        for _ in range(100):
            x = rng.uniform(-0.1, 1.1, 3)
            r = rng.uniform(0, cs)
            np.testing.assert_array_equal(query_radius(g, x, r), brute(ids, X, x, r))


def lattice(n=6, h=1.0):
    g = np.arange(n) * h
    return np.array([[a, b, c] for a in g for b in g for c in g])


def test_cube_centre_support():
    X = np.array([[i, j, k] for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0)])
    ids = np.arange(8)
    mps = MaterialPointStore.from_particles([MaterialPoint(id=100, x=np.full(3, 0.5), spacing=0.5)])
    cfg = SearchConfig(radius_factor=1.8, min_support=8)
    update_supports(mps, ids, X, [0], cfg, LmeParams(gamma=1.8), cap=cfg.search_cap(0.5))
    assert mps.sup_count[0] == 8
    assert abs(mps.sup_N[0, :8].sum() - 1) < 1e-12


def test_supports_match_brute_force_and_lme():
    rng = np.random.default_rng(3)
    X = lattice(7, 1.0) + rng.uniform(-0.2, 0.2, (343, 3))
    ids = np.arange(343) * 3
    xs = rng.uniform(1.5, 4.5, (40, 3))
    h = rng.uniform(0.8, 1.0, 40)
    mps = MaterialPointStore.from_particles(
        [MaterialPoint(id=10 ** 6 + i, x=xs[i], spacing=h[i]) for i in range(40)])
    cfg = SearchConfig()
    lme = LmeParams(gamma=1.8)
    cap = cfg.search_cap(h.max())
    update_supports(mps, ids, X, np.arange(40), cfg, lme, cap)
    for p in range(40):
        r = mps.support_radius[p]
        sup = brute(ids, X, xs[p], r)
        n = mps.sup_count[p]
        assert n >= cfg.min_support
        np.testing.assert_array_equal(mps.sup_ids[p, :n], sup)
        ref = evaluate(xs[p], X[sup // 3], LmeParams(gamma=1.8, h=h[p]))
        np.testing.assert_array_equal(mps.sup_N[p, :n], ref.N)
        np.testing.assert_array_equal(mps.sup_B[p, :n], ref.B)


def test_fractured_rows_skipped_and_unsatisfiable():
    X = lattice(4)
    ids = np.arange(len(X))
    mps = MaterialPointStore.from_particles(
        [MaterialPoint(id=1000, x=np.full(3, 1.5), spacing=0.9),
         MaterialPoint(id=1001, x=np.full(3, 50.0), spacing=0.9)])
    cfg = SearchConfig()
    update_supports(mps, ids, X, [0], cfg, LmeParams(), cfg.search_cap(0.9))
    assert mps.sup_count[1] == 0
    with pytest.raises(SupportUnsatisfiableError):
        update_supports(mps, ids, X, [0, 1], cfg, LmeParams(), cfg.search_cap(0.9))
