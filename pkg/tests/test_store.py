import bisect

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potm.store import (DuplicateParticleError, MaterialPoint, MaterialPointStore,
                        MissingParticleError, Node, NodeStore, ParticleStore, SupportDomain,
                        derive_influence)


def mp_with_support(pid, sup):
    sup = np.asarray(sorted(sup), dtype=np.int64)
    return MaterialPoint(id=pid, mass=1.0, volume=1.0, density=1.0,
                         support=SupportDomain(ids=sup, N=np.full(len(sup), 1.0 / max(len(sup), 1)),
                                               B=np.zeros((len(sup), 3))))


def test_single_insert():
    s = NodeStore()
    s.insert(Node(id=7))
    assert list(s.ids) == [7]
    assert s.get(7).id == 7


def test_iteration_sorted():
    s = NodeStore()
    for i in (3, 1, 2):
        s.insert(Node(id=i, x=np.array([i, 0.0, 0.0])))
    assert [n.id for n in s] == [1, 2, 3]
    assert s.get(3).x[0] == 3.0


def test_duplicate_and_missing():
    s = NodeStore.from_particles([Node(id=1)])
    with pytest.raises(DuplicateParticleError):
        s.insert(Node(id=1))
    with pytest.raises(MissingParticleError):
        s.remove(5)
    with pytest.raises(MissingParticleError):
        s.index([1, 5])
    with pytest.raises(DuplicateParticleError):
        NodeStore.concat([s, s.copy()])


def test_remove_and_reinsert_roundtrip():
    s = MaterialPointStore.from_particles([mp_with_support(i, [i, i + 1]) for i in (1, 2, 3)])
    ref = s.copy()
    p = s.remove(2)
    assert list(s.ids) == [1, 3]
    np.testing.assert_array_equal(p.support.ids, [2, 3])
    s.insert(p)
    assert s.bitwise_equal(ref)


def test_round_trip_many_ids():
    rng = np.random.default_rng(0)
    ids = rng.choice(10 ** 9, size=10 ** 4, replace=False)
    s = NodeStore.from_particles([Node(id=int(i), mass=float(i)) for i in ids])
    rows = s.index(ids)
    np.testing.assert_array_equal(s.mass[rows], ids.astype(float))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 60)), max_size=80))
def test_insert_remove_replay_vs_sorted_list(ops):
    s = NodeStore()
    ref: list[int] = []
    for ins, pid in ops:
        if ins:
            if pid in ref:
                with pytest.raises(DuplicateParticleError):
                    s.insert(Node(id=pid))
            else:
                s.insert(Node(id=pid))
                bisect.insort(ref, pid)
        elif pid in ref:
            assert s.remove(pid).id == pid
            ref.remove(pid)
    assert list(s.ids) == ref


def test_iteration_independent_of_history():
    a = NodeStore()
    b = NodeStore()
    for i in (5, 2, 9):
        a.insert(Node(id=i))
    for i in (9, 5, 2):
        b.insert(Node(id=i))
    assert a.bitwise_equal(b)


def test_influence_trivial():
    nodes = NodeStore.from_particles([Node(id=1), Node(id=2), Node(id=3)])
    mps = MaterialPointStore.from_particles([mp_with_support(10, [1, 2])])
    derive_influence(nodes, mps)
    assert list(nodes.domain_ids(0)) == [10]
    assert list(nodes.domain_ids(1)) == [10]
    assert nodes.inf_count[2] == 0 and nodes.inert[2]

    derive_influence(nodes, MaterialPointStore())
    assert np.all(nodes.inf_count == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_influence_is_transpose(seed):
    rng = np.random.default_rng(seed)
    node_ids = np.sort(rng.choice(500, size=40, replace=False))
    mps = [mp_with_support(1000 + p, rng.choice(node_ids, size=rng.integers(1, 9), replace=False))
           for p in range(30)]
    store = ParticleStore(NodeStore.from_particles([Node(id=int(i)) for i in node_ids]),
                          MaterialPointStore.from_particles(mps[:20]))
    halo = MaterialPointStore.from_particles(mps[20:])
    store.derive_influence(halo)
    for row, nid in enumerate(store.nodes.ids):
        brute = sorted(m.id for m in mps if nid in m.support.ids)
        assert list(store.nodes.domain_ids(row)) == brute


def test_mp_fields_survive_roundtrip():
    rng = np.random.default_rng(2)
    mp = mp_with_support(4, [1, 2, 3])
    mp.F = rng.normal(size=(3, 3))
    mp.state.eps_p_bar = 0.25
    mp.state.fractured = True
    s = MaterialPointStore.from_particles([mp])
    back = s.get(4)
    np.testing.assert_array_equal(back.F, mp.F)
    assert back.state.eps_p_bar == 0.25 and back.state.fractured
