"""Cost library unit tests: frozen values, derivative rules, domain errors."""

import numpy as np
import pytest

from stackgames.costs import (
    BoxLogBarrier,
    CenterlineRidgeCost,
    ControlEffortCost,
    CostDomainError,
    GenericQuadraticCost,
    GoalCost,
    LaneBoundaryCost,
    PiecewiseLinearBoundary,
    ProximityLogBarrier,
    SpeedHeadingEnvelopeCost,
    WeightedCost,
    make_barrier_herding_pair,
    make_herding_pair,
    permissive_domain,
)

from _oracles import fd_gradient, fd_hessian

U0 = np.zeros(2)


def quad_of(cost, x, u1=U0, u2=U0):
    return cost.quadraticize(np.asarray(x, float), u1, u2)


def test_herding_pair_values():
    cost1, cost2 = make_herding_pair()
    x = np.array([1.0, 0.0, 2.0, 0.0, 3.0, 0.0, -4.0, 0.0])
    # Agent 1 pays agent 2's squared distance to the origin plus own effort.
    assert cost1.evaluate(x, np.array([1.0, 2.0]), U0) == pytest.approx(
        (3.0**2 + 4.0**2) + (1.0 + 4.0))
    # Agent 2 pays the squared inter-agent gap plus own effort.
    assert cost2.evaluate(x, U0, np.array([3.0, 0.0])) == pytest.approx(
        ((1.0 - 3.0) ** 2 + (2.0 + 4.0) ** 2) + 9.0)


def test_barrier_herding_frozen_value_at_origin():
    cost1, _ = make_barrier_herding_pair(half_width=5.0)
    x = np.zeros(8)  # agent 2 at the origin: quadratic part vanishes
    assert cost1.evaluate(x, U0, U0) == pytest.approx(-6.437751649736401, abs=1e-12)


def test_barrier_herding_hessian_diagonal():
    cost1, _ = make_barrier_herding_pair(half_width=5.0)
    q = quad_of(cost1, np.zeros(8))
    # Quadratic contributes 2 per agent-2 position entry; each barrier side
    # adds 1/s^2, so the diagonal reads 2 + 2/25 = 2.08 exactly.
    assert q.Q[4, 4] == pytest.approx(2.08, abs=1e-12)
    assert q.Q[6, 6] == pytest.approx(2.08, abs=1e-12)
    assert q.q[4] == pytest.approx(0.0, abs=1e-12)  # gradient balances at center


def test_box_log_barrier_domain():
    barrier = BoxLogBarrier(1, (4, 6), 5.0)
    inside = np.zeros(8)
    outside = np.zeros(8)
    outside[4] = 5.0
    barrier.evaluate(inside, U0, U0)
    with pytest.raises(CostDomainError, match="timestep"):
        barrier.evaluate(outside, U0, U0)
    with pytest.raises(ValueError):
        BoxLogBarrier(1, (4, 6), -1.0)


def test_proximity_barrier_domain_and_derivatives():
    prox = ProximityLogBarrier(1, (0, 1), (4, 5), d_min=0.2)
    x = np.array([0.0, 0.0, 0.0, 10.0, 1.0, 0.5, 0.0, 10.0])
    v = prox.evaluate(x, U0, U0)
    assert v == pytest.approx(-np.log(1.0 + 0.25 - 0.2))
    q = quad_of(prox, x)
    np.testing.assert_allclose(
        q.q, fd_gradient(lambda z: prox.evaluate(z, U0, U0), x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(
        q.Q, fd_hessian(lambda z: prox.evaluate(z, U0, U0), x), rtol=1e-4, atol=1e-5)
    near = x.copy()
    near[4:6] = [0.3, 0.3]  # squared separation 0.18 < 0.2
    with pytest.raises(CostDomainError):
        prox.evaluate(near, U0, U0)


def test_speed_heading_envelope():
    env = SpeedHeadingEnvelopeCost(1, psi_idx=2, v_idx=3, psi_ref=np.pi / 2,
                                   dpsi_max=np.pi / 3, v_max=35.0)
    x = np.zeros(8)
    x[2] = np.pi / 2 + 0.2
    x[3] = 10.0
    assert env.evaluate(x, U0, U0) == pytest.approx(
        -np.log(35.0 - 10.0) - np.log(np.pi / 3 - 0.2))
    q = quad_of(env, x)
    np.testing.assert_allclose(
        q.q, fd_gradient(lambda z: env.evaluate(z, U0, U0), x), rtol=1e-6, atol=1e-8)
    fast = x.copy()
    fast[3] = 35.0
    with pytest.raises(CostDomainError):
        env.evaluate(fast, U0, U0)
    spun = x.copy()
    spun[2] = np.pi / 2 + np.pi / 3 + 0.01
    with pytest.raises(CostDomainError):
        env.evaluate(spun, U0, U0)


def test_control_effort():
    eff = ControlEffortCost(2)
    assert eff.evaluate(np.zeros(8), np.array([9.0, 9.0]), np.array([1.0, 2.0])) == 5.0
    q = quad_of(eff, np.zeros(8), U0, np.array([1.0, 2.0]))
    np.testing.assert_allclose(q.r2, [2.0, 4.0])
    np.testing.assert_allclose(q.R2, 2.0 * np.eye(2))
    np.testing.assert_array_equal(q.R1, np.zeros((2, 2)))


def test_piecewise_linear_boundary():
    edge = PiecewiseLinearBoundary([0.0, 10.0, 20.0], [2.5, 2.5, 1.25])
    val, slope = edge.value_and_slope(np.array([-5.0, 5.0, 15.0, 25.0]))
    np.testing.assert_allclose(val, [2.5, 2.5, 1.875, 1.25])
    np.testing.assert_allclose(slope, [0.0, 0.0, -0.125, 0.0])
    with pytest.raises(ValueError):
        PiecewiseLinearBoundary([0.0, 0.0], [1.0, 2.0])


def test_lane_boundary_cost():
    left = PiecewiseLinearBoundary([0.0, 1.0], [-2.5, -2.5])
    right = PiecewiseLinearBoundary([0.0, 1.0], [2.5, 2.5])
    lane = LaneBoundaryCost(1, px_idx=0, py_idx=1, left=left, right=right)
    x = np.zeros(8)
    x[0] = 1.25
    assert lane.evaluate(x, U0, U0) == pytest.approx(
        -np.log(3.75**2) - np.log(1.25**2))
    q = quad_of(lane, x)
    np.testing.assert_allclose(
        q.q, fd_gradient(lambda z: lane.evaluate(z, U0, U0), x), rtol=1e-6, atol=1e-8)
    on_edge = x.copy()
    on_edge[0] = 2.5
    with pytest.raises(CostDomainError):
        lane.evaluate(on_edge, U0, U0)


def test_lane_boundary_slope_coupling():
    # On a tapering segment the station (y) enters through the edge geometry.
    left = PiecewiseLinearBoundary([0.0, 10.0], [-2.5, -1.25])
    right = PiecewiseLinearBoundary([0.0, 10.0], [2.5, 1.25])
    lane = LaneBoundaryCost(1, px_idx=0, py_idx=1, left=left, right=right)
    x = np.zeros(8)
    x[0], x[1] = 0.5, 5.0
    q = quad_of(lane, x)
    g = fd_gradient(lambda z: lane.evaluate(z, U0, U0), x)
    np.testing.assert_allclose(q.q, g, rtol=1e-6, atol=1e-8)
    assert abs(q.q[1]) > 1e-3  # the y-gradient is genuinely nonzero here


def test_centerline_ridge():
    ridge = CenterlineRidgeCost(1, px_idx=0, center_x=0.0, lane_width=2.5)
    x = np.zeros(8)
    assert ridge.evaluate(x, U0, U0) == pytest.approx(1.0)
    q = quad_of(ridge, x)
    assert q.q[0] == pytest.approx(0.0, abs=1e-14)
    assert q.Q[0, 0] == pytest.approx(-1.0 / 1.25**2)  # concave at the crest
    off = x.copy()
    off[0] = 0.7
    q = quad_of(ridge, off)
    np.testing.assert_allclose(
        q.q, fd_gradient(lambda z: ridge.evaluate(z, U0, U0), off),
        rtol=1e-6, atol=1e-9)


def test_goal_cost():
    goal = GoalCost(2, (4, 5), np.array([1.0, -1.0]), np.array([2.0, 0.5]))
    x = np.zeros(8)
    assert goal.evaluate(x, U0, U0) == pytest.approx(2.0 * 1.0 + 0.5 * 1.0)
    q = quad_of(goal, x)
    assert q.Q[4, 4] == pytest.approx(4.0)
    assert q.Q[5, 5] == pytest.approx(1.0)


def test_weighted_cost_combination():
    eff = ControlEffortCost(1)
    barrier = BoxLogBarrier(1, (0,), 5.0)
    combo = WeightedCost([eff, barrier], [0.1, 2.0])
    x = np.zeros(8)
    u1 = np.array([1.0, 1.0])
    expected = 0.1 * 2.0 + 2.0 * (-(np.log(5.0) + np.log(5.0)))
    assert combo.evaluate(x, u1, U0) == pytest.approx(expected)
    q = quad_of(combo, x, u1)
    np.testing.assert_allclose(q.R1, 0.1 * 2.0 * np.eye(2))
    assert q.Q[0, 0] == pytest.approx(2.0 * 0.08)
    with pytest.raises(ValueError):
        WeightedCost([ControlEffortCost(1), ControlEffortCost(2)])
    with pytest.raises(ValueError):
        WeightedCost([eff], [1.0, 2.0])


def test_lane_boundary_outside_band_is_out_of_domain():
    # -log(d^2) is finite beyond the edge, so the band check must be by sign.
    left = PiecewiseLinearBoundary([0.0, 1.0], [-2.5, -2.5])
    right = PiecewiseLinearBoundary([0.0, 1.0], [2.5, 2.5])
    lane = LaneBoundaryCost(1, px_idx=0, py_idx=1, left=left, right=right)
    outside = np.zeros(8)
    outside[0] = 3.0
    with pytest.raises(CostDomainError):
        lane.evaluate(outside, U0, U0)
    xs = np.zeros((2, 8))
    xs[1, 0] = 3.0
    with permissive_domain():
        vals = lane.evaluate_batch(xs, np.zeros((2, 2)), np.zeros((2, 2)))
    assert np.isfinite(vals[0])
    assert np.isnan(vals[1])


def test_permissive_domain_marks_rows_and_restores_strictness():
    barrier = BoxLogBarrier(1, (0,), 5.0)
    xs = np.zeros((3, 8))
    xs[1, 0] = 7.0
    u = np.zeros((3, 2))
    with pytest.raises(CostDomainError):
        barrier.evaluate_batch(xs, u, u)
    with permissive_domain():
        vals = barrier.evaluate_batch(xs, u, u)
    assert np.isfinite(vals[0]) and np.isfinite(vals[2])
    assert not np.isfinite(vals[1])
    with pytest.raises(CostDomainError):
        barrier.evaluate_batch(xs, u, u)


def test_quadraticize_batch_matches_single_point():
    cost1, _ = make_barrier_herding_pair(half_width=5.0)
    rng = np.random.default_rng(2)
    xs = rng.uniform(-2, 2, size=(5, 8))
    u1s = rng.uniform(-1, 1, size=(5, 2))
    u2s = rng.uniform(-1, 1, size=(5, 2))
    batch = cost1.quadraticize_batch(xs, u1s, u2s)
    for t in range(5):
        single = cost1.quadraticize(xs[t], u1s[t], u2s[t])
        np.testing.assert_allclose(batch.Q[t], single.Q, rtol=0, atol=1e-12)
        np.testing.assert_allclose(batch.q[t], single.q, rtol=0, atol=1e-12)
        np.testing.assert_allclose(batch.c[t], single.c, rtol=0, atol=1e-12)
