"""Filter unit tests: particle bookkeeping, likelihoods, resampling, runs."""

import numpy as np
import pytest

from stackgames import lq_stackelberg, scenarios
from stackgames.dynamics import DoubleIntegrator2D
from stackgames.leadership_filter import (
    FilterConfig,
    ParticleSet,
    effective_sample_size,
    expected_measurement,
    get_nominal_trajectory,
    init_particles,
    leadership_belief,
    measurement_update,
    propagate,
    resample,
    run_filter,
)
from stackgames.silqgames import SolverConfig


def small_config(**kw):
    base = dict(
        process_noise=1e-4 * np.eye(8),
        measurement_noise=5e-3 * np.eye(8),
        n_particles=12,
        horizon=8,
        p_trans=0.02,
        prior=0.5,
        resample_fraction=0.5,
        solver=SolverConfig(tau=1.5e-2, max_iterations=50),
        measurement_indices=(0, 2, 4, 6),
    )
    base.update(kw)
    return FilterConfig(**base)


def make_particles(weights, leaders=None, n=2):
    weights = np.asarray(weights, dtype=float)
    N = weights.shape[0]
    states = np.arange(N * n, dtype=float).reshape(N, n)
    if leaders is None:
        leaders = np.ones(N, dtype=int)
    return ParticleSet(states=states, prev_states=states.copy(),
                       leaders=np.asarray(leaders), weights=weights)


def lq_measurements(T=10, sigma=0.005, seed=7):
    preset = scenarios.build("lq_shepherd_sheep", {"params": {"horizon": max(T, 3)}})
    xs, (u1, u2), _ = scenarios.generate_ground_truth(preset, leader=1)
    ys = scenarios.simulate_measurements(xs[:T], sigma, seed=seed)
    return preset, ys, (u1[:T], u2[:T])


# ---------------------------------------------------------------------------
# Config validation


def test_filter_config_validation():
    with pytest.raises(ValueError):
        small_config(p_trans=1.5)
    with pytest.raises(ValueError):
        small_config(horizon=1)
    with pytest.raises(ValueError):
        small_config(measurement_noise=np.zeros((8, 8)))
    with pytest.raises(ValueError):
        small_config(process_noise=-np.eye(8))
    with pytest.raises(ValueError):
        small_config(lookahead=8)  # must be <= horizon - 1
    cfg = small_config(lookahead=3)
    assert cfg.window == 3
    assert small_config().window == 7


# ---------------------------------------------------------------------------
# Effective sample size


def test_effective_sample_size_formulas():
    N = 50
    assert effective_sample_size(np.full(N, 1.0 / N)) == pytest.approx(N)
    one_hot = np.zeros(N)
    one_hot[3] = 1.0
    assert effective_sample_size(one_hot) == pytest.approx(1.0)
    assert effective_sample_size(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(2.0)
    assert effective_sample_size(np.array([0.75, 0.25])) == pytest.approx(1.6)
    assert effective_sample_size(make_particles([0.25] * 4)) == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# Propagation


def test_propagate_degenerate_flip_probabilities():
    model = DoubleIntegrator2D(dt=0.02)
    leaders = np.array([1, 2, 1, 2, 1])
    pset = make_particles(np.full(5, 0.2), leaders=leaders, n=8)
    u = (np.zeros(2), np.zeros(2))
    frozen = propagate(pset, u, model, np.zeros((8, 8)), p_trans=0.0,
                       rng=np.random.default_rng(0))
    np.testing.assert_array_equal(frozen.leaders, leaders)
    flipped = propagate(pset, u, model, np.zeros((8, 8)), p_trans=1.0,
                        rng=np.random.default_rng(0))
    np.testing.assert_array_equal(flipped.leaders, 3 - leaders)


def test_propagate_noise_free_matches_deterministic_step():
    model = DoubleIntegrator2D(dt=0.02)
    rng = np.random.default_rng(3)
    states = rng.standard_normal((6, 8))
    pset = ParticleSet(states=states, prev_states=np.zeros_like(states),
                       leaders=np.ones(6, dtype=int), weights=np.full(6, 1 / 6))
    u1, u2 = np.array([0.3, -0.1]), np.array([-2.0, 0.5])
    out = propagate(pset, (u1, u2), model, np.zeros((8, 8)), p_trans=0.0,
                    rng=np.random.default_rng(0))
    for k in range(6):
        np.testing.assert_array_equal(out.states[k], model.step(states[k], u1, u2))
    np.testing.assert_array_equal(out.prev_states, states)


def test_propagate_flip_rate_within_three_standard_errors():
    model = DoubleIntegrator2D(dt=0.02)
    N, p = 10_000, 0.02
    pset = ParticleSet(states=np.zeros((N, 8)), prev_states=np.zeros((N, 8)),
                       leaders=np.ones(N, dtype=int), weights=np.full(N, 1.0 / N))
    out = propagate(pset, (np.zeros(2), np.zeros(2)), model, np.zeros((8, 8)),
                    p_trans=p, rng=lambda k: np.random.default_rng([11, k]))
    rate = np.mean(out.leaders != 1)
    se = np.sqrt(p * (1 - p) / N)
    assert abs(rate - p) <= 3 * se


# ---------------------------------------------------------------------------
# Nominal trajectories and the measurement game


def test_get_nominal_trajectory():
    n1, n2 = get_nominal_trajectory(5, (np.array([1.0, -2.0]), np.array([0.5, 0.0])), (2, 2))
    np.testing.assert_array_equal(n1, np.tile([1.0, -2.0], (5, 1)))
    np.testing.assert_array_equal(n2, np.tile([0.5, 0.0], (5, 1)))
    z1, z2 = get_nominal_trajectory(4, None, (2, 3))
    assert z1.shape == (4, 2) and not z1.any()
    assert z2.shape == (4, 3) and not z2.any()
    assert get_nominal_trajectory(2, None, (2, 2))[0].shape == (2, 2)
    with pytest.raises(ValueError):
        get_nominal_trajectory(5, (np.zeros(3), np.zeros(2)), (2, 2))


def test_expected_measurement_matches_analytic_lq():
    preset = scenarios.build("lq_shepherd_sheep")
    cfg = small_config(horizon=20)
    prev = np.array([0.5, 0.1, -0.2, 0.0, -3.0, 0.2, 6.0, -0.1])
    nominal = get_nominal_trajectory(cfg.horizon, None, (2, 2))
    traj = expected_measurement(prev, 1, preset.model, preset.cost1,
                                preset.cost2, cfg, nominal)
    assert traj.converged
    assert traj.states.shape[0] == cfg.horizon
    np.testing.assert_array_equal(traj.states[0], prev)

    game = preset.game(leader=1, horizon=cfg.horizon)
    zeros = np.zeros((cfg.horizon, 8))
    zu = np.zeros((cfg.horizon, 2))
    lq = lq_stackelberg._build_lq_about(game, zeros, zu, zu)
    strat = lq_stackelberg.solve(lq, validate=False)
    xs, _, _ = lq_stackelberg.apply(strat, preset.model, prev)
    assert np.abs(traj.expected - xs[1]).max() <= 1e-6


def test_leader_hypothesis_changes_prediction():
    preset = scenarios.build("lq_shepherd_sheep")
    cfg = small_config(horizon=20)
    prev = np.array([0.5, 0.1, -0.2, 0.0, -3.0, 0.2, 6.0, -0.1])
    nominal = get_nominal_trajectory(cfg.horizon, None, (2, 2))
    t1 = expected_measurement(prev, 1, preset.model, preset.cost1,
                              preset.cost2, cfg, nominal)
    t2 = expected_measurement(prev, 2, preset.model, preset.cost1,
                              preset.cost2, cfg, nominal)
    assert np.abs(t1.states - t2.states).max() > 1e-9


# ---------------------------------------------------------------------------
# Measurement update


def test_measurement_update_symmetric_expectations_equal_weights():
    pset = make_particles([0.5, 0.5])
    y = np.array([1.0, 0.0])
    expected = np.array([[1.3, 0.0], [0.7, 0.0]])
    out = measurement_update(pset, y, expected, np.eye(2))
    np.testing.assert_allclose(out.weights, [0.5, 0.5], atol=1e-15)


def test_measurement_update_hand_computed_1d():
    pset = make_particles([0.5, 0.5], n=1)
    out = measurement_update(pset, np.array([0.0]),
                             np.array([[0.0], [1.0]]), np.eye(1))
    ratio = 1.0 / (1.0 + np.exp(-0.5))
    np.testing.assert_allclose(out.weights, [ratio, 1.0 - ratio], atol=1e-15)
    assert out.weights[0] == pytest.approx(0.6224593312018546, abs=1e-12)


def test_measurement_update_flat_likelihood_keeps_weights():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    pset = make_particles(w)
    rng = np.random.default_rng(5)
    expected = rng.standard_normal((4, 2))
    out = measurement_update(pset, np.array([0.3, -0.2]), expected, 1e6 * np.eye(2))
    assert np.abs(out.weights - w).max() <= 1e-6


def test_measurement_update_windowed_observations():
    # Two-step window: log-likelihoods add across the buffered measurements.
    pset = make_particles([0.5, 0.5])
    y = np.array([[0.0, 0.0], [1.0, 0.0]])
    expected = np.stack([
        np.array([[0.0, 0.0], [1.0, 0.0]]),   # matches both steps
        np.array([[1.0, 0.0], [1.0, 0.0]]),   # off by 1 at the first step
    ])
    out = measurement_update(pset, y, expected, np.eye(2))
    ratio = 1.0 / (1.0 + np.exp(-0.5))
    np.testing.assert_allclose(out.weights, [ratio, 1.0 - ratio], atol=1e-15)


def test_measurement_update_nan_expectation_floors_particle():
    pset = make_particles([0.5, 0.5])
    expected = np.array([[0.0, 0.0], [np.nan, 0.0]])
    out = measurement_update(pset, np.zeros(2), expected, np.eye(2))
    assert out.weights[1] < 1e-290
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_measurement_update_all_underflow_reweights_uniformly():
    pset = make_particles([0.9, 0.1])
    expected = np.full((2, 2), np.nan)
    with pytest.warns(UserWarning, match="underflow"):
        out = measurement_update(pset, np.zeros(2), expected, np.eye(2))
    np.testing.assert_array_equal(out.weights, [0.5, 0.5])


# ---------------------------------------------------------------------------
# Resampling


def test_resample_all_weight_on_one_particle():
    pset = make_particles([0.0, 0.0, 1.0, 0.0])
    out = resample(pset, np.random.default_rng(0))
    assert (out.states == pset.states[2]).all()
    np.testing.assert_array_equal(out.weights, np.full(4, 0.25))


def test_resample_systematic_counts_are_offset_independent():
    # weights (0.75, 0.25) over N=4 slots: the systematic grid always lands
    # three positions in the first particle's span and one in the second's.
    pset = make_particles([0.75, 0.25, 0.0, 0.0])
    for seed in range(20):
        out = resample(pset, np.random.default_rng(seed))
        counts = np.bincount(
            np.where((out.states == pset.states[0]).all(axis=1), 0, 1), minlength=2)
        np.testing.assert_array_equal(counts, [3, 1])


def test_resample_uniform_weights_keep_every_particle_once():
    N = 10
    pset = make_particles(np.full(N, 1.0 / N))
    out = resample(pset, np.random.default_rng(9))
    np.testing.assert_array_equal(np.sort(out.states[:, 0]), pset.states[:, 0])


# ---------------------------------------------------------------------------
# Belief readout


def test_leadership_belief_examples():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    leaders = np.array([1, 1, 2, 2])
    b1, b2 = leadership_belief(make_particles(w, leaders))
    assert b1 == pytest.approx(0.3, abs=1e-15)
    assert b1 + b2 == 1.0
    b1, b2 = leadership_belief(make_particles(w, np.full(4, 2)))
    assert (b1, b2) == (0.0, 1.0)


def test_init_particles_prior_and_spread():
    cfg = small_config(n_particles=400, prior=0.25)
    y1 = np.arange(8.0)
    pset = init_particles(y1, cfg, seed=2)
    assert pset.n_particles == 400
    assert pset.weights.sum() == pytest.approx(1.0, abs=1e-12)
    share = np.mean(pset.leaders == 1)
    assert abs(share - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 400)
    spread = pset.states - y1
    assert abs(spread.std() - np.sqrt(5e-3)) < 0.02
    np.testing.assert_array_equal(pset.states, pset.prev_states)


# ---------------------------------------------------------------------------
# Full runs


def test_run_filter_bookkeeping_invariants():
    preset, ys, controls = lq_measurements(T=8)
    cfg = small_config()
    res = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                     cfg, seed=4)
    T, N = len(ys), cfg.n_particles
    assert res.particle_weights.shape == (T, N)
    assert np.abs(res.particle_weights.sum(axis=1) - 1.0).max() <= 1e-12
    assert (res.belief.b1 + res.belief.b2 == 1.0).all()
    assert np.isin(res.particle_leaders, (1, 2)).all()
    assert res.belief.ess.min() >= 1.0 and res.belief.ess.max() <= N + 1e-9
    # Resampling resets to uniform weights in the recorded trace.
    for i in np.flatnonzero(res.resampled):
        np.testing.assert_array_equal(res.particle_weights[i], np.full(N, 1 / N))


def test_run_filter_degenerate_prior_freezes_belief():
    preset, ys, controls = lq_measurements(T=6)
    cfg = small_config(prior=1.0, p_trans=0.0)
    res = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                     cfg, seed=0)
    # b1 is the weight sum over the (entire) H=1 cloud, so it matches 1 to
    # the same precision the normalization invariant guarantees.
    assert np.abs(res.belief.b1 - 1.0).max() <= 1e-12
    assert (res.particle_leaders == 1).all()


def test_run_filter_deterministic_and_worker_invariant():
    preset, ys, controls = lq_measurements(T=7)
    cfg = small_config()
    a = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                   cfg, seed=5)
    b = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                   cfg, seed=5)
    c = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                   cfg, seed=5, workers=3)
    np.testing.assert_array_equal(a.belief.b1, b.belief.b1)
    np.testing.assert_array_equal(a.particle_states, b.particle_states)
    np.testing.assert_array_equal(a.belief.b1, c.belief.b1)
    np.testing.assert_array_equal(a.particle_states, c.particle_states)
    np.testing.assert_array_equal(a.particle_weights, c.particle_weights)
    other = run_filter(preset.model, preset.cost1, preset.cost2, ys, controls,
                       cfg, seed=6)
    assert not np.array_equal(a.particle_states, other.particle_states)


def test_run_filter_rejects_misaligned_controls():
    preset, ys, (u1, u2) = lq_measurements(T=6)
    with pytest.raises(ValueError, match="aligned"):
        run_filter(preset.model, preset.cost1, preset.cost2, ys,
                   (u1[:-1], u2), small_config(), seed=0)
