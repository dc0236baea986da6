"""Iterative LQ approximation for nonlinear two-agent Stackelberg games.

Repeatedly linearizes the dynamics and quadraticizes the stage costs about
the current trajectory iterate, solves the resulting feedback Stackelberg LQ
game, and applies the gains in a forward pass with a decaying feedforward
step size until the trajectory stops changing in the max norm.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import lq_stackelberg
from .costs import CostDomainError, QuadraticBatch, StageCost, permissive_domain, trajectory_cost
from .dynamics import DynamicsModel, rollout
from .lq_stackelberg import LQGame, convexify_batches, solve_stacked

Array = np.ndarray

__all__ = [
    "GameDefinition",
    "SolverConfig",
    "SolveResult",
    "BatchSolveResult",
    "convergence_metric",
    "step_size_schedule",
    "solve",
    "solve_batch",
]


@dataclass
class GameDefinition:
    """A nonlinear game: joint dynamics, one stage cost per agent, horizon, leader."""

    model: DynamicsModel
    cost1: StageCost
    cost2: StageCost
    horizon: int
    leader: int

    def __post_init__(self):
        if self.leader not in (1, 2):
            raise ValueError("leader must be 1 or 2")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.cost1.agent != 1 or self.cost2.agent != 2:
            raise ValueError("cost1/cost2 must be tagged with agents 1/2")


@dataclass
class SolverConfig:
    tau: float = 1e-2
    max_iterations: int = 100
    alpha_init: float = 1.0
    alpha_min: float = 1e-2
    beta: float = 0.98
    nu_margin: float = 1e-3
    max_backoffs: int = 20

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (0 < self.alpha_min <= self.alpha_init <= 1):
            raise ValueError("need 0 < alpha_min <= alpha_init <= 1")
        if not (0 < self.beta < 1):
            raise ValueError("beta must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class SolveResult:
    converged: bool
    iterations: int
    states: Array
    controls1: Array
    controls2: Array
    metric_history: Array
    objective1: float
    objective2: float
    iteration_times: Array
    domain_violation: bool = False
    # Per accepted iteration: step size actually applied (after any backoff
    # halving) and both agents' objectives at the accepted iterate.
    alpha_history: Array = field(default_factory=lambda: np.zeros(0))
    objective_history: Array = field(default_factory=lambda: np.zeros((0, 2)))


@dataclass
class BatchSolveResult:
    """Per-game outputs of solve_batch, stacked along a leading game axis.

    `domain_violation` marks games whose step-size backoffs ran out without
    a feasible step (their result is the last accepted iterate, like the
    sequential solver). `failed` marks games where the sequential solver
    would have raised instead — nominal trajectory outside the cost domain,
    or a singular/non-finite stage system — and for those the remaining
    fields carry the last consistent iterate with NaN objectives where the
    nominal itself was not evaluable.
    """

    converged: Array         # (K,) bool
    iterations: Array        # (K,) int
    states: Array            # (K, T, n)
    controls1: Array         # (K, T, m1)
    controls2: Array         # (K, T, m2)
    objective1: Array        # (K,)
    objective2: Array        # (K,)
    domain_violation: Array  # (K,) bool
    failed: Array            # (K,) bool


def convergence_metric(x_new: Array, x_old: Array) -> float:
    """Max absolute state difference over all timesteps and entries."""
    x_new = np.asarray(x_new)
    x_old = np.asarray(x_old)
    if x_new.shape != x_old.shape:
        raise ValueError(f"shape mismatch: {x_new.shape} vs {x_old.shape}")
    return float(np.abs(x_new - x_old).max())


def step_size_schedule(k: int, cfg: SolverConfig) -> float:
    """Feedforward step size at iteration k (1-based): geometric decay to a floor."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return max(cfg.alpha_min, cfg.alpha_init * cfg.beta ** (k - 1))


@njit(cache=True)
def _forward_jit(step_fn, dt, xs_old, u1_old, u2_old, P1, p1, P2, p2, alpha):
    T = xs_old.shape[0]
    n = xs_old.shape[1]
    xs = np.empty_like(xs_old)
    u1 = np.empty_like(u1_old)
    u2 = np.empty_like(u2_old)
    xs[0] = xs_old[0]
    ok = True
    for t in range(T):
        dx = xs[t] - xs_old[t]
        u1[t] = u1_old[t] - P1[t] @ dx - alpha * p1[t]
        u2[t] = u2_old[t] - P2[t] @ dx - alpha * p2[t]
        if t + 1 < T:
            nxt = step_fn(xs[t], u1[t], u2[t], dt)
            for i in range(n):
                if not np.isfinite(nxt[i]):
                    ok = False
                    break
            if not ok:
                break
            xs[t + 1] = nxt
    return xs, u1, u2, ok


def _forward_py(model, xs_old, u1_old, u2_old, P1, p1, P2, p2, alpha):
    T = xs_old.shape[0]
    xs = np.empty_like(xs_old)
    u1 = np.empty_like(u1_old)
    u2 = np.empty_like(u2_old)
    xs[0] = xs_old[0]
    for t in range(T):
        dx = xs[t] - xs_old[t]
        u1[t] = u1_old[t] - P1[t] @ dx - alpha * p1[t]
        u2[t] = u2_old[t] - P2[t] @ dx - alpha * p2[t]
        if t + 1 < T:
            nxt = model.step(xs[t], u1[t], u2[t])
            if not np.all(np.isfinite(nxt)):
                return xs, u1, u2, False
            xs[t + 1] = nxt
    return xs, u1, u2, True


@njit(cache=True)
def _forward_batch(step_fn, dt, xs_old, u1_old, u2_old, P1, p1, P2, p2,
                   alphas, pending, xs, u1, u2, ok):
    K = xs_old.shape[0]
    T = xs_old.shape[1]
    n = xs_old.shape[2]
    for g in range(K):
        if not pending[g]:
            continue
        a = alphas[g]
        good = True
        xs[g, 0] = xs_old[g, 0]
        for t in range(T):
            dx = xs[g, t] - xs_old[g, t]
            u1[g, t] = u1_old[g, t] - P1[g, t] @ dx - a * p1[g, t]
            u2[g, t] = u2_old[g, t] - P2[g, t] @ dx - a * p2[g, t]
            if t + 1 < T:
                nxt = step_fn(xs[g, t], u1[g, t], u2[g, t], dt)
                for i in range(n):
                    if not np.isfinite(nxt[i]):
                        good = False
                        break
                if not good:
                    break
                xs[g, t + 1] = nxt
        ok[g] = good


def _objectives(game: GameDefinition, xs, u1s, u2s) -> tuple[float, float]:
    return (
        trajectory_cost(game.cost1, xs, u1s, u2s),
        trajectory_cost(game.cost2, xs, u1s, u2s),
    )


def _objectives_batch(game: GameDefinition, xs, u1s, u2s) -> tuple[Array, Array]:
    """Per-game objective sums over (K, T, .) stacks; rows outside a cost's
    domain surface as NaN in that game's total."""
    K, T = xs.shape[0], xs.shape[1]
    xf = xs.reshape(K * T, -1)
    u1f = u1s.reshape(K * T, -1)
    u2f = u2s.reshape(K * T, -1)
    with permissive_domain():
        o1 = game.cost1.evaluate_batch(xf, u1f, u2f).reshape(K, T).sum(axis=1)
        o2 = game.cost2.evaluate_batch(xf, u1f, u2f).reshape(K, T).sum(axis=1)
    return o1, o2


def solve(
    game: GameDefinition,
    x1: Array,
    nominal: tuple[Array, Array],
    cfg: SolverConfig | None = None,
) -> SolveResult:
    """Run the iterative LQ approximation from nominal control sequences.

    The nominal rollout must stay inside the cost domain (log barriers), or a
    CostDomainError propagates. On convergence the result carries the
    previous iterate, whose change against the new one triggered the test.
    """
    cfg = cfg or SolverConfig()
    model = game.model
    x1 = np.asarray(x1, dtype=float)
    u1_prev = np.ascontiguousarray(np.asarray(nominal[0], dtype=float))
    u2_prev = np.ascontiguousarray(np.asarray(nominal[1], dtype=float))
    T = game.horizon
    if u1_prev.shape[0] != T or u2_prev.shape[0] != T:
        raise ValueError("nominal control sequences must have length equal to the horizon")

    xs_prev = rollout(model, x1, u1_prev, u2_prev)
    # Precondition: nominal iterate must be evaluable (raises CostDomainError).
    _objectives(game, xs_prev, u1_prev, u2_prev)

    metric_history: list[float] = []
    iteration_times: list[float] = []
    alpha_history: list[float] = []
    objective_history: list[tuple[float, float]] = []
    alpha = cfg.alpha_init
    use_jit = model.jit_step is not None

    def result(converged: bool, k: int, xs, u1s, u2s, domain_violation: bool = False) -> SolveResult:
        obj1, obj2 = _objectives(game, xs, u1s, u2s)
        return SolveResult(
            converged=converged,
            iterations=k,
            states=xs,
            controls1=u1s,
            controls2=u2s,
            metric_history=np.array(metric_history),
            objective1=obj1,
            objective2=obj2,
            iteration_times=np.array(iteration_times),
            domain_violation=domain_violation,
            alpha_history=np.array(alpha_history),
            objective_history=np.array(objective_history).reshape(-1, 2),
        )

    for k in range(1, cfg.max_iterations + 1):
        tic = time.perf_counter()
        A, B1, B2 = model.linearize_trajectory(xs_prev, u1_prev, u2_prev)
        b1 = game.cost1.quadraticize_batch(xs_prev, u1_prev, u2_prev)
        b2 = game.cost2.quadraticize_batch(xs_prev, u1_prev, u2_prev)
        b1c, b2c, _ = convexify_batches(b1, b2, cfg.nu_margin)
        lq = LQGame(A=A, B1=B1, B2=B2, cost1=b1c, cost2=b2c, leader=game.leader)
        strategy = lq_stackelberg.solve(lq, validate=False)

        alpha_k = alpha
        accepted = False
        for _ in range(cfg.max_backoffs + 1):
            if use_jit:
                xs_new, u1_new, u2_new, ok = _forward_jit(
                    model.jit_step, model.dt, xs_prev, u1_prev, u2_prev,
                    strategy.P1, strategy.p1, strategy.P2, strategy.p2, alpha_k,
                )
            else:
                xs_new, u1_new, u2_new, ok = _forward_py(
                    model, xs_prev, u1_prev, u2_prev,
                    strategy.P1, strategy.p1, strategy.P2, strategy.p2, alpha_k,
                )
            objs = None
            if ok:
                try:
                    objs = _objectives(game, xs_new, u1_new, u2_new)
                except CostDomainError:
                    ok = False
            if ok:
                accepted = True
                break
            alpha_k *= 0.5
        iteration_times.append(time.perf_counter() - tic)
        if not accepted:
            return result(False, k, xs_prev, u1_prev, u2_prev, domain_violation=True)

        conv = convergence_metric(xs_new, xs_prev)
        metric_history.append(conv)
        alpha_history.append(alpha_k)
        objective_history.append(objs)
        if conv <= cfg.tau:
            return result(True, k, xs_prev, u1_prev, u2_prev)
        xs_prev, u1_prev, u2_prev = xs_new, u1_new, u2_new
        alpha = max(cfg.alpha_min, cfg.beta * alpha)

    return result(False, cfg.max_iterations, xs_prev, u1_prev, u2_prev)


def _restack(batch: QuadraticBatch, K: int, T: int) -> QuadraticBatch:
    """View a flattened (K*T, ...) quadratic batch as (K, T, ...) stacks."""
    def rs(a):
        return a.reshape(K, T, *a.shape[1:])

    return QuadraticBatch(agent=batch.agent, c=rs(batch.c), q=rs(batch.q), Q=rs(batch.Q),
                          r1=rs(batch.r1), R1=rs(batch.R1), r2=rs(batch.r2), R2=rs(batch.R2))


def solve_batch(
    game: GameDefinition,
    x1s: Array,
    nominal: tuple[Array, Array],
    cfg: SolverConfig | None = None,
) -> BatchSolveResult:
    """Run the iterative scheme of `solve` on K games sharing one definition.

    The games differ only in initial state (rows of x1s) and, optionally, in
    nominal controls: each element of `nominal` is either one (T, m) sequence
    shared by every game or a per-game (K, T, m) stack. All games advance in
    lock step — one linearize/quadraticize/LQ-solve/forward sweep per
    iteration over the still-active games — and each freezes at its own
    termination with the same iterate the sequential solver would return
    (up to floating-point reordering in the LQ recursion). Conditions where
    `solve` raises are reported per game through `failed` instead, so one
    bad game cannot take down the rest of the batch.
    """
    cfg = cfg or SolverConfig()
    model = game.model
    T = game.horizon
    x1s = np.asarray(x1s, dtype=float)
    if x1s.ndim != 2 or x1s.shape[1] != model.n:
        raise ValueError(f"x1s must have shape (K, {model.n})")
    K = x1s.shape[0]

    def tiled(u, m, name):
        u = np.asarray(u, dtype=float)
        if u.shape == (T, m):
            u = np.broadcast_to(u, (K, T, m))
        if u.shape != (K, T, m):
            raise ValueError(f"{name} must have shape ({T}, {m}) or (K, {T}, {m})")
        # Always a fresh buffer: iterates are updated in place.
        return np.array(u, dtype=float, order="C")

    u1_prev = tiled(nominal[0], model.m1, "nominal[0]")
    u2_prev = tiled(nominal[1], model.m2, "nominal[1]")

    xs_prev = np.empty((K, T, model.n))
    for g in range(K):
        xs_prev[g] = rollout(model, x1s[g], u1_prev[g], u2_prev[g])
    obj1, obj2 = _objectives_batch(game, xs_prev, u1_prev, u2_prev)
    roll_bad = ~np.isfinite(xs_prev).all(axis=(1, 2))
    obj1[roll_bad] = np.nan
    obj2[roll_bad] = np.nan
    failed = roll_bad | np.isnan(obj1) | np.isnan(obj2)

    converged = np.zeros(K, dtype=bool)
    iterations = np.zeros(K, dtype=int)
    domain_violation = np.zeros(K, dtype=bool)
    active = ~failed
    alpha = np.full(K, cfg.alpha_init)
    use_jit = model.jit_step is not None

    for k in range(1, cfg.max_iterations + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xs_a = xs_prev[idx]
        u1_a = u1_prev[idx]
        u2_a = u2_prev[idx]
        Ag = idx.size
        xf = xs_a.reshape(Ag * T, -1)
        u1f = u1_a.reshape(Ag * T, -1)
        u2f = u2_a.reshape(Ag * T, -1)
        Af, B1f, B2f = model.linearize_trajectory(xf, u1f, u2f)
        b1 = game.cost1.quadraticize_batch(xf, u1f, u2f)
        b2 = game.cost2.quadraticize_batch(xf, u1f, u2f)
        b1c, b2c, _ = convexify_batches(b1, b2, cfg.nu_margin)
        P1, p1, P2, p2, rec_failed, _ = solve_stacked(
            Af.reshape(Ag, T, model.n, model.n),
            B1f.reshape(Ag, T, model.n, model.m1),
            B2f.reshape(Ag, T, model.n, model.m2),
            _restack(b1c, Ag, T), _restack(b2c, Ag, T), game.leader)

        if rec_failed.any():
            gone = idx[rec_failed]
            failed[gone] = True
            iterations[gone] = k
            active[gone] = False
            keep = ~rec_failed
            idx = idx[keep]
            if idx.size == 0:
                continue
            xs_a, u1_a, u2_a = xs_a[keep], u1_a[keep], u2_a[keep]
            P1, p1, P2, p2 = P1[keep], p1[keep], P2[keep], p2[keep]
            Ag = idx.size

        alpha_k = alpha[idx].copy()
        pending = np.ones(Ag, dtype=bool)
        ok_roll = np.zeros(Ag, dtype=bool)
        xs_new = np.empty_like(xs_a)
        u1_new = np.empty_like(u1_a)
        u2_new = np.empty_like(u2_a)
        obj_new = np.full((Ag, 2), np.nan)
        for _ in range(cfg.max_backoffs + 1):
            if use_jit:
                _forward_batch(model.jit_step, model.dt, xs_a, u1_a, u2_a,
                               P1, p1, P2, p2, alpha_k, pending,
                               xs_new, u1_new, u2_new, ok_roll)
            else:
                for g in np.flatnonzero(pending):
                    xs_new[g], u1_new[g], u2_new[g], ok_roll[g] = _forward_py(
                        model, xs_a[g], u1_a[g], u2_a[g],
                        P1[g], p1[g], P2[g], p2[g], alpha_k[g])
            trial = np.flatnonzero(pending & ok_roll)
            if trial.size:
                o1, o2 = _objectives_batch(game, xs_new[trial], u1_new[trial], u2_new[trial])
                good = ~(np.isnan(o1) | np.isnan(o2))
                acc = trial[good]
                obj_new[acc, 0] = o1[good]
                obj_new[acc, 1] = o2[good]
                pending[acc] = False
            if not pending.any():
                break
            alpha_k[pending] *= 0.5

        if pending.any():
            gone = idx[pending]
            domain_violation[gone] = True
            iterations[gone] = k
            active[gone] = False
        acc = ~pending
        if not acc.any():
            continue
        sub = np.flatnonzero(acc)
        gi = idx[sub]
        conv = np.abs(xs_new[sub] - xs_a[sub]).reshape(sub.size, -1).max(axis=1)
        done = conv <= cfg.tau
        if done.any():
            gone = gi[done]
            converged[gone] = True
            iterations[gone] = k
            active[gone] = False
        go = ~done
        if go.any():
            gs = gi[go]
            xs_prev[gs] = xs_new[sub[go]]
            u1_prev[gs] = u1_new[sub[go]]
            u2_prev[gs] = u2_new[sub[go]]
            obj1[gs] = obj_new[sub[go], 0]
            obj2[gs] = obj_new[sub[go], 1]
            alpha[gs] = np.maximum(cfg.alpha_min, cfg.beta * alpha[gs])

    left = np.flatnonzero(active)
    # Still-active games ran out of iterations. Every game's result is
    # whatever sits in xs_prev for it: the iterate before the convergence test
    # fired, the last accepted one before backoffs ran dry, or the nominal —
    # frozen games never advance past their terminal iterate.
    if left.size:
        iterations[left] = cfg.max_iterations

    return BatchSolveResult(
        converged=converged, iterations=iterations, states=xs_prev,
        controls1=u1_prev, controls2=u2_prev, objective1=obj1, objective2=obj2,
        domain_violation=domain_violation, failed=failed)
