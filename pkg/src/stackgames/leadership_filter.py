"""Particle filter over joint (state, leader) context for two-agent games.

Each particle carries a game state, a leader hypothesis, and the state it
held one step earlier. The measurement model plays a short-horizon feedback
Stackelberg game from that previous state under the particle's hypothesis;
the solved states are compared against the buffered measurements over a
lookahead window (by default the whole solved horizon, truncated at the end
of the recording). Weighting the particles by that likelihood and summing
weights per hypothesis gives a time-resolved leadership belief.

The window matters: one solved step ahead, both hypotheses predict nearly
the same state (the per-stage leader/follower coupling scales with the
square of the step size), so a single-state comparison carries almost no
leadership information. Over tens of steps the two hypotheses' closed loops
separate measurably. A length-1 window remains available via `lookahead=1`.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .costs import StageCost
from .dynamics import DynamicsModel
from .silqgames import GameDefinition, SolverConfig, solve, solve_batch

Array = np.ndarray

# Likelihoods below this are clamped so a single impossible particle cannot
# zero out the whole weight vector.
LIKELIHOOD_FLOOR = 1e-300
_LOG_FLOOR = float(np.log(LIKELIHOOD_FLOOR))

__all__ = [
    "FilterConfig",
    "ParticleSet",
    "MeasurementTrajectory",
    "LeadershipBelief",
    "FilterResult",
    "init_particles",
    "propagate",
    "get_nominal_trajectory",
    "expected_measurement",
    "measurement_update",
    "effective_sample_size",
    "resample",
    "leadership_belief",
    "run_filter",
]


def _default_inner_solver() -> SolverConfig:
    return SolverConfig(tau=1.5e-2, max_iterations=50, alpha_init=1.0, alpha_min=1e-2)


@dataclass
class FilterConfig:
    """Knobs for one filter run.

    process_noise is the per-step state noise covariance (PSD), and
    measurement_noise the observation covariance (PD). measurement_indices
    selects which state entries enter the likelihood; None compares the full
    state. lookahead is how many solved states (from offset 1) are compared
    against buffered measurements; None uses the whole solved horizon. The
    inner solver settings govern the per-particle game solves.
    """

    process_noise: Array
    measurement_noise: Array
    n_particles: int = 50
    horizon: int = 75
    p_trans: float = 0.02
    prior: float = 0.5
    resample_fraction: float = 0.5
    solver: SolverConfig = field(default_factory=_default_inner_solver)
    measurement_indices: tuple[int, ...] | None = None
    lookahead: int | None = None

    def __post_init__(self):
        self.process_noise = np.asarray(self.process_noise, dtype=float)
        self.measurement_noise = np.asarray(self.measurement_noise, dtype=float)
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if self.horizon < 2:
            raise ValueError("measurement-game horizon must be at least 2")
        if not 0.0 <= self.p_trans <= 1.0:
            raise ValueError("p_trans must lie in [0, 1]")
        if not 0.0 <= self.prior <= 1.0:
            raise ValueError("prior must lie in [0, 1]")
        if not 0.0 <= self.resample_fraction <= 1.0:
            raise ValueError("resample_fraction must lie in [0, 1]")
        for name, M in (("process_noise", self.process_noise),
                        ("measurement_noise", self.measurement_noise)):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be a square matrix")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.process_noise).min() < -1e-10:
            raise ValueError("process_noise must be positive semidefinite")
        try:
            np.linalg.cholesky(self.measurement_noise)
        except np.linalg.LinAlgError:
            raise ValueError("measurement_noise must be positive definite") from None
        if self.measurement_indices is not None:
            self.measurement_indices = tuple(int(i) for i in self.measurement_indices)
        if self.lookahead is not None:
            self.lookahead = int(self.lookahead)
            if not 1 <= self.lookahead <= self.horizon - 1:
                raise ValueError("lookahead must lie in [1, horizon - 1]")

    @property
    def window(self) -> int:
        """Length of the measurement-comparison window."""
        return self.horizon - 1 if self.lookahead is None else self.lookahead


@dataclass
class ParticleSet:
    """Weighted particles: current state, previous state, leader hypothesis."""

    states: Array       # (N, n)
    prev_states: Array  # (N, n)
    leaders: Array      # (N,) values in {1, 2}
    weights: Array      # (N,) nonnegative, summing to 1

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.prev_states = np.asarray(self.prev_states, dtype=float)
        self.leaders = np.asarray(self.leaders, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        N = self.states.shape[0]
        if not (self.prev_states.shape == self.states.shape
                and self.leaders.shape == (N,) and self.weights.shape == (N,)):
            raise ValueError("particle arrays must agree on the particle count")
        if not np.all((self.leaders == 1) | (self.leaders == 2)):
            raise ValueError("leader hypotheses must be 1 or 2")

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


@dataclass
class MeasurementTrajectory:
    """Solved game states from a particle's previous state; the state at
    offset 1 is the expected measurement for the current step."""

    states: Array      # (T_s, n); states[0] is the particle's previous state
    expected: Array    # states[1]
    converged: bool


@dataclass
class LeadershipBelief:
    """Per-step leader marginals plus particle-cloud diagnostics."""

    steps: Array       # 1-based timestep indices
    b1: Array
    b2: Array
    ess: Array         # effective sample size before any resampling
    mean_state: Array  # (T, n) weighted particle mean
    state_var: Array   # (T, n) weighted variance per state entry


@dataclass
class FilterResult:
    belief: LeadershipBelief
    particle_states: Array     # (T, N, n) after the measurement update
    particle_leaders: Array    # (T, N)
    particle_weights: Array    # (T, N)
    inner_converged: Array     # (T, N) inner-solve convergence flags
    resampled: Array           # (T,) whether resampling ran at each step
    cycle_times: Array         # (T,) wall seconds per measurement cycle


def _psd_sqrt(M: Array) -> Array:
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _stream(seed: int, t: int, k: int) -> np.random.Generator:
    # One independent stream per (run, timestep, particle slot); the slot one
    # past the particle count is reserved for resampling, slot (1, 0) for
    # initialization.
    return np.random.default_rng([seed, t, k])


def init_particles(y1: Array, cfg: FilterConfig, seed: int) -> ParticleSet:
    """Draw particle states around the first measurement and leaders from the
    prior; weights start uniform."""
    y1 = np.asarray(y1, dtype=float)
    rng = _stream(seed, 1, 0)
    L = np.linalg.cholesky(cfg.measurement_noise)
    N = cfg.n_particles
    states = y1 + rng.standard_normal((N, y1.shape[0])) @ L.T
    leaders = np.where(rng.random(N) < cfg.prior, 1, 2)
    return ParticleSet(
        states=states,
        prev_states=states.copy(),
        leaders=leaders,
        weights=np.full(N, 1.0 / N),
    )


def propagate(
    particles: ParticleSet,
    controls: tuple[Array, Array],
    model: DynamicsModel,
    process_noise: Array,
    p_trans: float,
    rng,
) -> ParticleSet:
    """Advance every particle one step under the observed controls plus
    process noise, flipping each leader hypothesis with probability p_trans.

    rng may be a single Generator (shared sequentially) or a callable mapping
    the particle index to a Generator, which makes the result independent of
    evaluation order.
    """
    u1, u2 = (np.asarray(c, dtype=float) for c in controls)
    L = _psd_sqrt(process_noise)
    N = particles.n_particles
    n = particles.states.shape[1]
    new_states = np.empty_like(particles.states)
    new_leaders = particles.leaders.copy()
    for k in range(N):
        r = rng(k) if callable(rng) else rng
        if r.random() < p_trans:
            new_leaders[k] = 3 - new_leaders[k]
        noise = L @ r.standard_normal(n)
        new_states[k] = model.step(particles.states[k], u1, u2) + noise
    return ParticleSet(
        states=new_states,
        prev_states=particles.states.copy(),
        leaders=new_leaders,
        weights=particles.weights.copy(),
    )


def get_nominal_trajectory(
    horizon: int,
    last_controls: tuple[Array, Array] | None,
    control_dims: tuple[int, int],
) -> tuple[Array, Array]:
    """Constant nominal controls for the measurement game: the last observed
    control repeated, or zeros when no control has been observed yet."""
    m1, m2 = control_dims
    if last_controls is None:
        return np.zeros((horizon, m1)), np.zeros((horizon, m2))
    u1, u2 = (np.asarray(c, dtype=float) for c in last_controls)
    if u1.shape != (m1,) or u2.shape != (m2,):
        raise ValueError("last controls must match the declared control dims")
    return np.tile(u1, (horizon, 1)), np.tile(u2, (horizon, 1))


def expected_measurement(
    prev_state: Array,
    leader: int,
    model: DynamicsModel,
    cost1: StageCost,
    cost2: StageCost,
    cfg: FilterConfig,
    nominal: tuple[Array, Array],
) -> MeasurementTrajectory:
    """Play the measurement game from a particle's previous state under its
    leader hypothesis; the solved state at offset 1 is what we expect to
    observe now. Non-converged solves still return their final iterate,
    flagged; domain errors propagate for the caller to turn into a floored
    likelihood."""
    game = GameDefinition(model=model, cost1=cost1, cost2=cost2,
                          horizon=cfg.horizon, leader=int(leader))
    res = solve(game, np.asarray(prev_state, dtype=float), nominal, cfg.solver)
    return MeasurementTrajectory(
        states=res.states,
        expected=res.states[1].copy(),
        converged=res.converged,
    )


def measurement_update(
    particles: ParticleSet,
    y: Array,
    expected: Array,
    measurement_noise: Array,
    indices: tuple[int, ...] | None = None,
) -> ParticleSet:
    """Reweight particles by the Gaussian likelihood of the observations given
    each particle's expected measurements, over the selected state subset.

    `expected` is either (N, n) against a single observation y of shape (n,)
    or (N, L, n) against a buffered window y of shape (L, n); per-state
    log-likelihoods sum over the window. Particles whose expectations contain
    NaN (failed inner solves) get the likelihood floor. If every likelihood
    underflows, the weights reset to uniform with a warning.
    """
    y = np.asarray(y, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if expected.ndim == 2:
        expected = expected[:, None, :]
        y = y[None, :]
    if y.shape != expected.shape[1:]:
        raise ValueError("observation window and expected measurements disagree")
    idx = np.arange(y.shape[1]) if indices is None else np.asarray(indices, dtype=int)
    Sig = np.asarray(measurement_noise, dtype=float)[np.ix_(idx, idx)]
    Sinv = np.linalg.inv(Sig)
    _, logdet = np.linalg.slogdet(Sig)
    d = expected[:, :, idx] - y[None, :, idx]
    bad = ~np.isfinite(d).all(axis=(1, 2))
    d = np.where(bad[:, None, None], 0.0, d)
    loglik = -0.5 * np.einsum("nsi,ij,nsj->n", d, Sinv, d) \
        - 0.5 * y.shape[0] * (logdet + idx.shape[0] * np.log(2.0 * np.pi))
    loglik[bad] = -np.inf

    # Only relative likelihoods matter; the floor is applied after shifting
    # by the best particle so a long window's large negative absolute
    # log-likelihood cannot masquerade as underflow.
    if not np.isfinite(loglik).any():
        warnings.warn("all measurement likelihoods underflowed; reweighting uniformly")
        w = np.full(particles.n_particles, 1.0 / particles.n_particles)
    else:
        shifted = np.maximum(loglik - loglik[np.isfinite(loglik)].max(), _LOG_FLOOR)
        w = particles.weights * np.exp(shifted)
        total = w.sum()
        if total <= 0.0:
            warnings.warn("all measurement likelihoods underflowed; reweighting uniformly")
            w = np.full(particles.n_particles, 1.0 / particles.n_particles)
        else:
            w = w / total
    return ParticleSet(
        states=particles.states,
        prev_states=particles.prev_states,
        leaders=particles.leaders,
        weights=w,
    )


def effective_sample_size(particles) -> float:
    """1 / sum of squared weights; N for uniform weights, 1 for degenerate."""
    w = np.asarray(getattr(particles, "weights", particles), dtype=float)
    return float(1.0 / np.sum(w**2))


def resample(particles: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling with replacement; weights reset to uniform."""
    N = particles.n_particles
    positions = (np.arange(N) + rng.random()) / N
    cum = np.cumsum(particles.weights)
    cum[-1] = 1.0
    idx = np.minimum(np.searchsorted(cum, positions, side="right"), N - 1)
    return ParticleSet(
        states=particles.states[idx].copy(),
        prev_states=particles.prev_states[idx].copy(),
        leaders=particles.leaders[idx].copy(),
        weights=np.full(N, 1.0 / N),
    )


def leadership_belief(particles: ParticleSet) -> tuple[float, float]:
    """Marginal probability of each leader hypothesis; the two entries are
    complementary by construction."""
    b1 = float(particles.weights[particles.leaders == 1].sum())
    return b1, 1.0 - b1


def _weighted_moments(particles: ParticleSet) -> tuple[Array, Array]:
    w = particles.weights[:, None]
    mean = (w * particles.states).sum(axis=0)
    var = (w * (particles.states - mean) ** 2).sum(axis=0)
    return mean, var


def run_filter(
    model: DynamicsModel,
    cost1: StageCost,
    cost2: StageCost,
    measurements: Array,
    controls: tuple[Array, Array],
    cfg: FilterConfig,
    seed: int = 0,
    workers: int = 1,
) -> FilterResult:
    """Run the full pipeline over a measurement sequence.

    Per step: propagate under the observed previous controls, play one
    measurement game per particle, reweight against the buffered measurement
    window, resample when the effective sample size drops below the
    configured fraction, and read out the leadership belief. The window
    shrinks near the end of the recording as fewer buffered measurements
    remain.

    The per-particle games are independent; they are solved in stacked
    batches grouped by leader hypothesis, split into `workers` chunks that
    may run on a thread pool. Every per-particle result is identical
    whatever the chunking, so the worker count cannot change the output.
    Particles whose measurement game is unsolvable (previous state outside
    a cost domain, or a singular stage system) keep a NaN expectation and
    get the likelihood floor.
    """
    ys = np.asarray(measurements, dtype=float)
    u1s, u2s = (np.asarray(c, dtype=float) for c in controls)
    T, n = ys.shape
    if u1s.shape[0] != T or u2s.shape[0] != T:
        raise ValueError("measurement and control sequences must be aligned")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    N = cfg.n_particles
    dims = (model.m1, model.m2)

    particles = init_particles(ys[0], cfg, seed)

    b1s = np.empty(T)
    b2s = np.empty(T)
    ess_hist = np.empty(T)
    means = np.empty((T, n))
    variances = np.empty((T, n))
    p_states = np.empty((T, N, n))
    p_leaders = np.empty((T, N), dtype=np.int64)
    p_weights = np.empty((T, N))
    inner_conv = np.ones((T, N), dtype=bool)
    resampled = np.zeros(T, dtype=bool)
    cycle_times = np.zeros(T)

    def record(i: int, pset: ParticleSet) -> None:
        b1s[i], b2s[i] = leadership_belief(pset)
        means[i], variances[i] = _weighted_moments(pset)
        p_states[i] = pset.states
        p_leaders[i] = pset.leaders
        p_weights[i] = pset.weights

    ess_hist[0] = effective_sample_size(particles)
    record(0, particles)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for i in range(1, T):
            tic = time.perf_counter()
            t = i + 1  # 1-based timestep of the incoming measurement
            last = (u1s[i - 1], u2s[i - 1])
            particles = propagate(
                particles, last, model, cfg.process_noise, cfg.p_trans,
                rng=lambda k: _stream(seed, t, k),
            )
            nominal = get_nominal_trajectory(cfg.horizon, last, dims)

            # Solved state at offset s predicts the measurement at index
            # i - 1 + s, so offsets 1..L line up with ys[i : i + L].
            L = min(cfg.window, T - i)
            expected = np.full((N, L, n), np.nan)

            chunks = []
            for leader in (1, 2):
                members = np.flatnonzero(particles.leaders == leader)
                if members.size:
                    chunks.extend(
                        (leader, part)
                        for part in np.array_split(members, min(workers, members.size))
                    )

            def solve_chunk(leader_and_part):
                leader, part = leader_and_part
                game = GameDefinition(model=model, cost1=cost1, cost2=cost2,
                                      horizon=cfg.horizon, leader=leader)
                return solve_batch(game, particles.prev_states[part], nominal, cfg.solver)

            results = pool.map(solve_chunk, chunks) if pool else map(solve_chunk, chunks)
            for (_, part), res in zip(chunks, results):
                good = ~res.failed
                expected[part[good]] = res.states[good, 1:1 + L]
                inner_conv[i, part] = res.converged

            particles = measurement_update(
                particles, ys[i:i + L], expected, cfg.measurement_noise,
                cfg.measurement_indices,
            )
            ess = effective_sample_size(particles)
            ess_hist[i] = ess
            if ess < cfg.resample_fraction * N:
                particles = resample(particles, _stream(seed, t, N))
                resampled[i] = True
            record(i, particles)
            cycle_times[i] = time.perf_counter() - tic
    finally:
        if pool:
            pool.shutdown()

    belief = LeadershipBelief(
        steps=np.arange(1, T + 1),
        b1=b1s, b2=b2s, ess=ess_hist,
        mean_state=means, state_var=variances,
    )
    return FilterResult(
        belief=belief,
        particle_states=p_states,
        particle_leaders=p_leaders,
        particle_weights=p_weights,
        inner_converged=inner_conv,
        resampled=resampled,
        cycle_times=cycle_times,
    )
