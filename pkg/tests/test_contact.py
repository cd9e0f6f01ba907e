import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potm.contact import RigidTool, RigidWall, tool_contact_force, wall_enforce, wall_gap
from potm.store import Node

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def node_at(x, du=(0.0, 0.0, 0.0)):
    x = np.asarray(x, dtype=float)
    return Node(id=1, x=x.copy(), x_prev=x - np.asarray(du), du_next=np.asarray(du, dtype=float))


def test_wall_leaves_free_node():
    w = RigidWall([0, 0, 0], [0, 0, 1])
    n = node_at([0.2, 0.3, 0.1])
    assert not wall_enforce(n, w)
    np.testing.assert_array_equal(n.x, [0.2, 0.3, 0.1])


def test_wall_projects_penetration():
    w = RigidWall([0, 0, 0], [0, 0, 1])
    n = node_at([0.2, 0.3, -0.05], du=[0.0, 0.0, -0.1])
    assert wall_enforce(n, w)
    assert abs(wall_gap(n.x, w)) <= 1e-14
    np.testing.assert_allclose(n.du_next, [0, 0, -0.05])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_wall_random_projection(seed):
    rng = np.random.default_rng(seed)
    nrm = rng.normal(size=3)
    w = RigidWall(rng.normal(size=3), nrm)
    for _ in range(20):
        x = rng.normal(size=3) * 3
        n = node_at(x)
        before_t = x - wall_gap(x, w) * w.normal
        wall_enforce(n, w)
        assert wall_gap(n.x, w) >= -1e-14
        after_t = n.x - wall_gap(n.x, w) * w.normal
        np.testing.assert_allclose(after_t, before_t, atol=1e-13)
        once = n.x.copy()
        wall_enforce(n, w)
        np.testing.assert_array_equal(n.x, once)


def tool(mu=0.3, c=1e3, v=(0.0, 0.0, 0.0)):
    return RigidTool(profile=SQUARE, velocity=np.array(v), c_N=c, c_T=c, mu_f=mu)


def test_outside_node_has_no_force():
    f = tool_contact_force(node_at([2.0, 0.5, 0.0]), tool(), 1e-3)
    np.testing.assert_array_equal(f, 0.0)


def test_frictionless_normal_force_proportional_to_depth():
    t = tool(mu=0.0)
    for depth in (0.01, 0.02, 0.1):
        n = node_at([1.0 - depth, 0.5, 0.0], du=[-0.001, 0.003, 0.0])
        f = tool_contact_force(n, t, 1e-3)
        np.testing.assert_allclose(f, [t.c_N * depth, 0.0, 0.0], atol=1e-12)


def test_coulomb_cap_exact():
    t = tool(mu=0.1)
    n = node_at([1.0 - 0.01, 0.5, 0.0], du=[0.0, 0.2, 0.0])
    f = tool_contact_force(n, t, 1e-3)
    normal = t.c_N * 0.01
    assert f[0] == pytest.approx(normal)
    assert abs(f[1]) == pytest.approx(0.1 * normal, rel=1e-14)
    assert f[1] < 0  # opposes the sliding direction


def test_stick_then_release_resets_memory():
    t = tool(mu=10.0)
    n = node_at([0.99, 0.5, 0.0], du=[0.0, 1e-4, 0.0])
    f = tool_contact_force(n, t, 1e-3)
    np.testing.assert_allclose(f[1], -t.c_T * 1e-4)
    assert n.in_contact
    n.x = np.array([1.5, 0.5, 0.0])
    tool_contact_force(n, t, 1e-3)
    assert not n.in_contact and np.all(n.slip == 0)


def test_tie_break_lowest_segment_and_moving_tool():
    t = tool(mu=0.0, v=(1.0, 0.0, 0.0))
    # centre of the square is equidistant from all four edges; edge 0 is y = 0
    n = node_at([0.5, 0.5, 0.0])
    f = tool_contact_force(n, t, 1e-3)
    np.testing.assert_allclose(f, [0.0, -t.c_N * 0.5, 0.0], atol=1e-12)
    moved = t.at(2.0)
    np.testing.assert_allclose(moved.vertices[0], [2.0, 0.0])
    assert not np.any(tool_contact_force(node_at([0.5, 0.5, 0.0]), moved, 1e-3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_force_direction_and_cap_invariants(seed):
    rng = np.random.default_rng(seed)
    t = tool(mu=float(rng.uniform(0, 1)))
    n = node_at(rng.uniform(0.0, 1.0, 3) * [1, 1, 0], du=rng.normal(size=3) * 0.01)
    n.in_contact = True
    n.slip = rng.normal(size=3) * 0.01
    f = tool_contact_force(n, t, 1e-3)
    # outward normal at the closest edge
    x, y = n.x[:2]
    d = [y, 1 - x, 1 - y, x]
    k = int(np.argmin(d))
    normal = np.array([[0, -1, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0]][k], dtype=float)
    fn = f @ normal
    ft = np.linalg.norm(f - fn * normal)
    assert fn >= 0
    assert ft <= t.mu_f * abs(fn) + 1e-12


def test_invalid_tool():
    with pytest.raises(ValueError):
        RigidTool(profile=np.array([[0, 0], [1, 1], [1, 0], [0, 1.0]]), velocity=np.zeros(3),
                  c_N=1, c_T=1, mu_f=0)
    with pytest.raises(ValueError):
        RigidTool(profile=SQUARE, velocity=np.zeros(3), c_N=0, c_T=1, mu_f=0)
