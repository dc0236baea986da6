"""Stage costs for two-agent trajectory games.

A stage cost maps (x, u1, u2) to a scalar for one timestep; trajectory
objectives are sums of stage costs. Each cost can produce a local quadratic
model (value, gradients, Hessian blocks) used by the iterative LQ solver.
Mixed state-control and cross-agent control second-order blocks are always
treated as zero; within-state mixing is kept.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

__all__ = [
    "CostDomainError",
    "permissive_domain",
    "QuadraticApproximation",
    "QuadraticBatch",
    "StageCost",
    "GenericQuadraticCost",
    "BoxLogBarrier",
    "GoalCost",
    "ProximityLogBarrier",
    "SpeedHeadingEnvelopeCost",
    "ControlEffortCost",
    "PiecewiseLinearBoundary",
    "LaneBoundaryCost",
    "CenterlineRidgeCost",
    "WeightedCost",
    "make_herding_pair",
    "make_barrier_herding_pair",
    "convexify",
    "auto_nu",
    "finite_difference_check",
    "trajectory_cost",
]


class CostDomainError(ValueError):
    """A log-barrier argument was non-positive; identifies the offending term."""

    def __init__(self, term: str, message: str):
        super().__init__(f"{term}: {message}")
        self.term = term


_DOMAIN_MODE = threading.local()


def _strict_domain() -> bool:
    return getattr(_DOMAIN_MODE, "strict", True)


@contextlib.contextmanager
def permissive_domain():
    """Report out-of-domain barrier rows as NaN values instead of raising.

    Batched evaluation over many candidate trajectories needs per-row
    validity, not an exception for the whole stack. Only evaluate/
    evaluate_batch honor this; quadraticization still requires in-domain
    input. Thread-local, so concurrent filter runs do not interfere.
    """
    prev = _strict_domain()
    _DOMAIN_MODE.strict = False
    try:
        yield
    finally:
        _DOMAIN_MODE.strict = prev


@dataclass
class QuadraticApproximation:
    """Second-order model of one stage cost about a point.

    predict(dx, du1, du2) = c + q.dx + dx.Q.dx/2 + sum_j (r_j.du_j + du_j.R_j.du_j/2)
    """

    agent: int
    c: float
    q: Array
    Q: Array
    r1: Array
    R1: Array
    r2: Array
    R2: Array

    def predict(self, dx: Array, du1: Array, du2: Array) -> float:
        return float(
            self.c
            + self.q @ dx
            + 0.5 * dx @ self.Q @ dx
            + self.r1 @ du1
            + 0.5 * du1 @ self.R1 @ du1
            + self.r2 @ du2
            + 0.5 * du2 @ self.R2 @ du2
        )


@dataclass
class QuadraticBatch:
    """Stacked quadratic models along a trajectory; leading axis is time."""

    agent: int
    c: Array
    q: Array
    Q: Array
    r1: Array
    R1: Array
    r2: Array
    R2: Array

    @classmethod
    def zeros(cls, agent: int, T: int, n: int, m1: int, m2: int) -> "QuadraticBatch":
        return cls(
            agent=agent,
            c=np.zeros(T),
            q=np.zeros((T, n)),
            Q=np.zeros((T, n, n)),
            r1=np.zeros((T, m1)),
            R1=np.zeros((T, m1, m1)),
            r2=np.zeros((T, m2)),
            R2=np.zeros((T, m2, m2)),
        )

    def at(self, t: int) -> QuadraticApproximation:
        return QuadraticApproximation(
            agent=self.agent,
            c=float(self.c[t]),
            q=self.q[t].copy(),
            Q=self.Q[t].copy(),
            r1=self.r1[t].copy(),
            R1=self.R1[t].copy(),
            r2=self.r2[t].copy(),
            R2=self.R2[t].copy(),
        )


def _fd_gradient(f, z: Array, h: float) -> Array:
    g = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        e = np.zeros(z.shape[0])
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def _fd_hessian(f, z: Array, h: float) -> Array:
    k = z.shape[0]
    H = np.empty((k, k))
    f0 = f(z)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        H[i, i] = (f(z + ei) - 2 * f0 + f(z - ei)) / h**2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h
            H[i, j] = H[j, i] = (
                f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)
            ) / (4 * h**2)
    return H


class StageCost:
    """Base stage cost. Subclasses override evaluate_batch (vectorized) or
    evaluate (scalar); quadraticize falls back to finite differences unless
    an analytic batch rule is provided via accumulate_quadratic_batch."""

    def __init__(self, agent: int):
        if agent not in (1, 2):
            raise ValueError("agent must be 1 or 2")
        self.agent = agent

    @property
    def name(self) -> str:
        return type(self).__name__

    # -- evaluation -----------------------------------------------------

    def evaluate(self, x: Array, u1: Array, u2: Array) -> float:
        return float(self.evaluate_batch(x[None], u1[None], u2[None])[0])

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        return np.array([
            self.evaluate(xs[t], u1s[t], u2s[t]) for t in range(xs.shape[0])
        ])

    # -- quadratic models -----------------------------------------------

    _has_analytic = False

    def accumulate_quadratic_batch(
        self, xs: Array, u1s: Array, u2s: Array, out: QuadraticBatch, weight: float
    ) -> None:
        """Add weight times this cost's quadratic model to out, in place."""
        for t in range(xs.shape[0]):
            approx = self.quadraticize(xs[t], u1s[t], u2s[t])
            out.c[t] += weight * approx.c
            out.q[t] += weight * approx.q
            out.Q[t] += weight * approx.Q
            out.r1[t] += weight * approx.r1
            out.R1[t] += weight * approx.R1
            out.r2[t] += weight * approx.r2
            out.R2[t] += weight * approx.R2

    def quadraticize(self, x: Array, u1: Array, u2: Array) -> QuadraticApproximation:
        if self._has_analytic:
            out = QuadraticBatch.zeros(self.agent, 1, x.shape[0], u1.shape[0], u2.shape[0])
            self.accumulate_quadratic_batch(x[None], u1[None], u2[None], out, 1.0)
            return out.at(0)
        return self._fd_quadraticize(x, u1, u2)

    def quadraticize_batch(self, xs: Array, u1s: Array, u2s: Array) -> QuadraticBatch:
        T, n = xs.shape
        out = QuadraticBatch.zeros(self.agent, T, n, u1s.shape[1], u2s.shape[1])
        self.accumulate_quadratic_batch(xs, u1s, u2s, out, 1.0)
        return out

    def _fd_quadraticize(
        self, x: Array, u1: Array, u2: Array, hg: float = 1e-6, hh: float = 1e-4
    ) -> QuadraticApproximation:
        return QuadraticApproximation(
            agent=self.agent,
            c=self.evaluate(x, u1, u2),
            q=_fd_gradient(lambda z: self.evaluate(z, u1, u2), x, hg),
            Q=_fd_hessian(lambda z: self.evaluate(z, u1, u2), x, hh),
            r1=_fd_gradient(lambda z: self.evaluate(x, z, u2), u1, hg),
            R1=_fd_hessian(lambda z: self.evaluate(x, z, u2), u1, hh),
            r2=_fd_gradient(lambda z: self.evaluate(x, u1, z), u2, hg),
            R2=_fd_hessian(lambda z: self.evaluate(x, u1, z), u2, hh),
        )


class GenericQuadraticCost(StageCost):
    """Exact quadratic stage cost in absolute coordinates:

    J = c0 + q0.x + x.Q0.x/2 + sum_j (r0_j.u_j + u_j.R0_j.u_j/2)
    """

    _has_analytic = True

    def __init__(self, agent: int, Q0: Array, q0: Array, R01: Array, r01: Array,
                 R02: Array, r02: Array, c0: float = 0.0):
        super().__init__(agent)
        self.Q0 = np.asarray(Q0, dtype=float)
        self.q0 = np.asarray(q0, dtype=float)
        self.R01 = np.asarray(R01, dtype=float)
        self.r01 = np.asarray(r01, dtype=float)
        self.R02 = np.asarray(R02, dtype=float)
        self.r02 = np.asarray(r02, dtype=float)
        self.c0 = float(c0)
        n = self.q0.shape[0]
        if self.Q0.shape != (n, n):
            raise ValueError("Q0/q0 shape mismatch")
        if not np.allclose(self.Q0, self.Q0.T):
            raise ValueError("Q0 must be symmetric")
        for R, r in ((self.R01, self.r01), (self.R02, self.r02)):
            if R.shape != (r.shape[0], r.shape[0]):
                raise ValueError("R0/r0 shape mismatch")
            if not np.allclose(R, R.T):
                raise ValueError("R0 blocks must be symmetric")

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        vals = self.c0 + xs @ self.q0 + 0.5 * np.einsum("ti,ij,tj->t", xs, self.Q0, xs)
        vals = vals + u1s @ self.r01 + 0.5 * np.einsum("ti,ij,tj->t", u1s, self.R01, u1s)
        vals = vals + u2s @ self.r02 + 0.5 * np.einsum("ti,ij,tj->t", u2s, self.R02, u2s)
        return vals

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        out.c += weight * self.evaluate_batch(xs, u1s, u2s)
        out.q += weight * (self.q0 + xs @ self.Q0)
        out.Q += weight * self.Q0
        out.r1 += weight * (self.r01 + u1s @ self.R01)
        out.R1 += weight * self.R01
        out.r2 += weight * (self.r02 + u2s @ self.R02)
        out.R2 += weight * self.R02


class BoxLogBarrier(StageCost):
    """-sum_k [log(s - x_k) + log(x_k + s)] over the given state indices.

    Keeps each indexed coordinate strictly inside (-s, s).
    """

    _has_analytic = True

    def __init__(self, agent: int, indices: tuple[int, ...], half_width: float):
        super().__init__(agent)
        if half_width <= 0:
            raise ValueError("half_width must be positive")
        self.indices = tuple(int(i) for i in indices)
        self.s = float(half_width)

    def _margins(self, xs: Array) -> tuple[Array, Array, Array]:
        vals = xs[:, self.indices]
        hi = self.s - vals
        lo = vals + self.s
        bad = ((hi <= 0) | (lo <= 0)).any(axis=1)
        if _strict_domain() and np.any(bad):
            t = int(np.argmax(bad))
            raise CostDomainError(self.name, f"state outside (-{self.s}, {self.s}) at timestep {t}")
        return hi, lo, bad

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        hi, lo, bad = self._margins(xs)
        with np.errstate(invalid="ignore", divide="ignore"):
            total = -(np.log(hi).sum(axis=1) + np.log(lo).sum(axis=1))
        total[bad] = np.nan
        return total

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        hi, lo, _ = self._margins(xs)
        out.c += -weight * (np.log(hi).sum(axis=1) + np.log(lo).sum(axis=1))
        grad = 1.0 / hi - 1.0 / lo
        hess = 1.0 / hi**2 + 1.0 / lo**2
        for k, idx in enumerate(self.indices):
            out.q[:, idx] += weight * grad[:, k]
            out.Q[:, idx, idx] += weight * hess[:, k]


class GoalCost(StageCost):
    """Weighted squared deviation of selected state entries from a goal point."""

    _has_analytic = True

    def __init__(self, agent: int, indices: tuple[int, ...], goal: Array, weights: Array):
        super().__init__(agent)
        self.indices = tuple(int(i) for i in indices)
        self.goal = np.asarray(goal, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if not (len(self.indices) == self.goal.shape[0] == self.weights.shape[0]):
            raise ValueError("indices, goal and weights must have equal length")

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        d = xs[:, self.indices] - self.goal
        return (self.weights * d**2).sum(axis=1)

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        d = xs[:, self.indices] - self.goal
        out.c += weight * (self.weights * d**2).sum(axis=1)
        for k, idx in enumerate(self.indices):
            out.q[:, idx] += weight * 2.0 * self.weights[k] * d[:, k]
            out.Q[:, idx, idx] += weight * 2.0 * self.weights[k]


class ProximityLogBarrier(StageCost):
    """-log(||p_own - p_other||^2 - d_min) keeping squared separation above d_min."""

    _has_analytic = True

    def __init__(self, agent: int, own_pos: tuple[int, int], other_pos: tuple[int, int],
                 d_min: float):
        super().__init__(agent)
        self.own_pos = tuple(int(i) for i in own_pos)
        self.other_pos = tuple(int(i) for i in other_pos)
        self.d_min = float(d_min)

    def _gap(self, xs: Array) -> tuple[Array, Array, Array]:
        delta = xs[:, self.own_pos] - xs[:, self.other_pos]
        D = (delta**2).sum(axis=1) - self.d_min
        bad = D <= 0
        if _strict_domain() and np.any(bad):
            t = int(np.argmax(bad))
            raise CostDomainError(self.name, f"squared separation <= {self.d_min} at timestep {t}")
        return delta, D, bad

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        _, D, bad = self._gap(xs)
        with np.errstate(invalid="ignore", divide="ignore"):
            total = -np.log(D)
        total[bad] = np.nan
        return total

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        delta, D, _ = self._gap(xs)
        out.c += -weight * np.log(D)
        g = 2.0 * delta / D[:, None]
        idx = self.own_pos + self.other_pos
        for k in range(2):
            out.q[:, idx[k]] += -weight * g[:, k]
            out.q[:, idx[k + 2]] += weight * g[:, k]
        # Hessian: 4 delta delta^T / D^2 - 2 I / D on own-own and other-other,
        # with opposite sign on the cross blocks.
        dd = np.einsum("ti,tj->tij", delta, delta)
        base = 4.0 * dd / (D**2)[:, None, None]
        eye = np.zeros_like(base)
        eye[:, 0, 0] = 2.0 / D
        eye[:, 1, 1] = 2.0 / D
        block = base - eye
        for a in range(2):
            for b in range(2):
                out.Q[:, idx[a], idx[b]] += weight * block[:, a, b]
                out.Q[:, idx[a + 2], idx[b + 2]] += weight * block[:, a, b]
                out.Q[:, idx[a], idx[b + 2]] += -weight * block[:, a, b]
                out.Q[:, idx[a + 2], idx[b]] += -weight * block[:, a, b]


class SpeedHeadingEnvelopeCost(StageCost):
    """-log(v_max - |v|) - log(dpsi_max - |psi - psi_ref|).

    Barrier on speed magnitude and heading deviation from a reference.
    Non-smooth at v = 0 and psi = psi_ref; derivative rules use sign(0) = 0.
    """

    _has_analytic = True

    def __init__(self, agent: int, psi_idx: int, v_idx: int, psi_ref: float,
                 dpsi_max: float, v_max: float):
        super().__init__(agent)
        self.psi_idx = int(psi_idx)
        self.v_idx = int(v_idx)
        self.psi_ref = float(psi_ref)
        self.dpsi_max = float(dpsi_max)
        self.v_max = float(v_max)

    def _margins(self, xs: Array) -> tuple[Array, Array, Array, Array, Array]:
        v = xs[:, self.v_idx]
        dpsi = xs[:, self.psi_idx] - self.psi_ref
        mv = self.v_max - np.abs(v)
        mp = self.dpsi_max - np.abs(dpsi)
        if _strict_domain():
            if np.any(mv <= 0):
                raise CostDomainError(self.name, f"|v| >= {self.v_max} at timestep {int(np.argmax(mv <= 0))}")
            if np.any(mp <= 0):
                raise CostDomainError(self.name, f"heading deviation >= {self.dpsi_max} at timestep {int(np.argmax(mp <= 0))}")
        return v, dpsi, mv, mp, (mv <= 0) | (mp <= 0)

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        _, _, mv, mp, bad = self._margins(xs)
        with np.errstate(invalid="ignore", divide="ignore"):
            total = -np.log(mv) - np.log(mp)
        total[bad] = np.nan
        return total

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        v, dpsi, mv, mp, _ = self._margins(xs)
        out.c += -weight * (np.log(mv) + np.log(mp))
        out.q[:, self.v_idx] += weight * np.sign(v) / mv
        out.Q[:, self.v_idx, self.v_idx] += weight / mv**2
        out.q[:, self.psi_idx] += weight * np.sign(dpsi) / mp
        out.Q[:, self.psi_idx, self.psi_idx] += weight / mp**2


class ControlEffortCost(StageCost):
    """Squared norm of this agent's own control."""

    _has_analytic = True

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        us = u1s if self.agent == 1 else u2s
        return (us**2).sum(axis=1)

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        us = u1s if self.agent == 1 else u2s
        out.c += weight * (us**2).sum(axis=1)
        r, R = (out.r1, out.R1) if self.agent == 1 else (out.r2, out.R2)
        r += weight * 2.0 * us
        m = us.shape[1]
        for k in range(m):
            R[:, k, k] += weight * 2.0


class PiecewiseLinearBoundary:
    """A lane edge x = f(y) given by breakpoints; constant beyond the ends."""

    def __init__(self, y_knots: Array, x_knots: Array):
        self.y = np.asarray(y_knots, dtype=float)
        self.x = np.asarray(x_knots, dtype=float)
        if self.y.ndim != 1 or self.y.shape != self.x.shape or self.y.shape[0] < 1:
            raise ValueError("need matching 1-d knot arrays")
        if np.any(np.diff(self.y) <= 0):
            raise ValueError("y knots must be strictly increasing")
        with np.errstate(divide="ignore", invalid="ignore"):
            self._slopes = np.diff(self.x) / np.diff(self.y) if self.y.shape[0] > 1 else np.zeros(0)

    def value_and_slope(self, py: Array) -> tuple[Array, Array]:
        py = np.asarray(py, dtype=float)
        val = np.interp(py, self.y, self.x)
        if self._slopes.shape[0] == 0:
            return val, np.zeros_like(py)
        seg = np.clip(np.searchsorted(self.y, py, side="right") - 1, 0, self._slopes.shape[0] - 1)
        slope = self._slopes[seg]
        slope = np.where((py <= self.y[0]) | (py >= self.y[-1]), 0.0, slope)
        return val, slope


class LaneBoundaryCost(StageCost):
    """-log(squared distance to each of two lane edges) at the vehicle's station.

    The distance to an edge x = f(y) is measured horizontally at the vehicle's
    own y, so the model stays smooth through piecewise-linear edge geometry.
    The domain is the open band strictly between the left and right edges;
    since -log(d^2) stays finite off the edge on the wrong side, the band
    membership is checked by sign rather than by finiteness.
    """

    _has_analytic = True

    def __init__(self, agent: int, px_idx: int, py_idx: int,
                 left: PiecewiseLinearBoundary, right: PiecewiseLinearBoundary):
        super().__init__(agent)
        self.px_idx = int(px_idx)
        self.py_idx = int(py_idx)
        self.left = left
        self.right = right

    def _gaps(self, xs: Array):
        px = xs[:, self.px_idx]
        py = xs[:, self.py_idx]
        out = []
        for edge in (self.left, self.right):
            xb, slope = edge.value_and_slope(py)
            out.append((px - xb, slope))
        bad = (out[0][0] <= 0.0) | (out[1][0] >= 0.0)
        if _strict_domain() and np.any(bad):
            raise CostDomainError(self.name, f"outside the lane band at timestep {int(np.argmax(bad))}")
        return out, bad

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        gaps, bad = self._gaps(xs)
        total = np.zeros(xs.shape[0])
        with np.errstate(invalid="ignore", divide="ignore"):
            for d, _ in gaps:
                total -= np.log(d**2)
        total[bad] = np.nan
        return total

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        gaps, _ = self._gaps(xs)
        ix, iy = self.px_idx, self.py_idx
        for d, slope in gaps:
            out.c += -weight * np.log(d**2)
            out.q[:, ix] += weight * (-2.0 / d)
            out.q[:, iy] += weight * (2.0 * slope / d)
            out.Q[:, ix, ix] += weight * (2.0 / d**2)
            out.Q[:, ix, iy] += weight * (-2.0 * slope / d**2)
            out.Q[:, iy, ix] += weight * (-2.0 * slope / d**2)
            out.Q[:, iy, iy] += weight * (2.0 * slope**2 / d**2)


class CenterlineRidgeCost(StageCost):
    """Gaussian ridge exp(-(px - cx)^2 / (2 sigma^2)) along a vertical line.

    Penalizes lingering near x = cx; sigma defaults to half the lane width so
    the ridge decays within one lane.
    """

    _has_analytic = True

    def __init__(self, agent: int, px_idx: int, center_x: float, lane_width: float):
        super().__init__(agent)
        self.px_idx = int(px_idx)
        self.center_x = float(center_x)
        self.var = (float(lane_width) / 2.0) ** 2

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        z = xs[:, self.px_idx] - self.center_x
        return np.exp(-0.5 * z**2 / self.var)

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        z = xs[:, self.px_idx] - self.center_x
        g = np.exp(-0.5 * z**2 / self.var)
        out.c += weight * g
        out.q[:, self.px_idx] += weight * g * (-z / self.var)
        out.Q[:, self.px_idx, self.px_idx] += weight * g * (z**2 / self.var**2 - 1.0 / self.var)


class WeightedCost(StageCost):
    """Weighted sum of stage costs for one agent."""

    def __init__(self, terms: list[StageCost], weights: list[float] | None = None):
        if not terms:
            raise ValueError("need at least one term")
        agents = {t.agent for t in terms}
        if len(agents) != 1:
            raise ValueError("all terms must belong to the same agent")
        super().__init__(terms[0].agent)
        self.terms = list(terms)
        self.weights = [1.0] * len(terms) if weights is None else [float(w) for w in weights]
        if len(self.weights) != len(self.terms):
            raise ValueError("weights must match terms")

    _has_analytic = True

    def evaluate_batch(self, xs: Array, u1s: Array, u2s: Array) -> Array:
        total = np.zeros(xs.shape[0])
        for w, term in zip(self.weights, self.terms):
            if w != 0.0:
                total += w * term.evaluate_batch(xs, u1s, u2s)
        return total

    def accumulate_quadratic_batch(self, xs, u1s, u2s, out, weight):
        for w, term in zip(self.weights, self.terms):
            if w != 0.0:
                term.accumulate_quadratic_batch(xs, u1s, u2s, out, weight * w)


def make_herding_pair(
    pos1: tuple[int, int] = (0, 2),
    pos2: tuple[int, int] = (4, 6),
    n: int = 8,
    m1: int = 2,
    m2: int = 2,
) -> tuple[StageCost, StageCost]:
    """Quadratic pair: agent 1 drives agent 2's position to the origin, agent 2
    chases agent 1's position; both pay squared control effort."""
    Q1 = np.zeros((n, n))
    for i in pos2:
        Q1[i, i] = 2.0
    cost1 = GenericQuadraticCost(
        1, Q1, np.zeros(n), 2.0 * np.eye(m1), np.zeros(m1), np.zeros((m2, m2)), np.zeros(m2)
    )
    # ||p1 - p2||^2 expands to a coupled quadratic across both position blocks.
    Q2 = np.zeros((n, n))
    for i, j in zip(pos1, pos2):
        Q2[i, i] += 2.0
        Q2[j, j] += 2.0
        Q2[i, j] -= 2.0
        Q2[j, i] -= 2.0
    cost2 = GenericQuadraticCost(
        2, Q2, np.zeros(n), np.zeros((m1, m1)), np.zeros(m1), 2.0 * np.eye(m2), np.zeros(m2)
    )
    return cost1, cost2


def make_barrier_herding_pair(
    half_width: float = 5.0,
    pos1: tuple[int, int] = (0, 2),
    pos2: tuple[int, int] = (4, 6),
    n: int = 8,
    m1: int = 2,
    m2: int = 2,
) -> tuple[StageCost, StageCost]:
    """Herding pair with a log-barrier keeping agent 2 inside a square of the
    given half-width, added to agent 1's cost."""
    quad1, cost2 = make_herding_pair(pos1, pos2, n, m1, m2)
    barrier = BoxLogBarrier(1, pos2, half_width)
    return WeightedCost([quad1, barrier]), cost2


def convexify(approx: QuadraticApproximation, nu: float) -> QuadraticApproximation:
    """Shift all quadratic blocks by nu on the diagonal; gradients unchanged."""
    if nu < 0:
        raise ValueError("nu must be non-negative")
    n = approx.q.shape[0]
    return QuadraticApproximation(
        agent=approx.agent,
        c=approx.c,
        q=approx.q.copy(),
        Q=approx.Q + nu * np.eye(n),
        r1=approx.r1.copy(),
        R1=approx.R1 + nu * np.eye(approx.r1.shape[0]),
        r2=approx.r2.copy(),
        R2=approx.R2 + nu * np.eye(approx.r2.shape[0]),
    )


def auto_nu(approx: QuadraticApproximation, margin: float = 1e-3) -> float:
    """Smallest shift making the state Hessian and the agent's own control
    Hessian have minimum eigenvalue at least margin."""
    R_own = approx.R1 if approx.agent == 1 else approx.R2
    lam = min(
        float(np.linalg.eigvalsh(0.5 * (approx.Q + approx.Q.T))[0]),
        float(np.linalg.eigvalsh(0.5 * (R_own + R_own.T))[0]),
    )
    return max(0.0, margin - lam)


def finite_difference_check(
    cost: StageCost, x: Array, u1: Array, u2: Array, h: float = 1e-6
) -> dict[str, float]:
    """Compare analytic quadraticization against central differences.

    Returns max |analytic - numeric| / max(1, |numeric|) per block. Hessian
    blocks use a larger step internally since second differences lose more
    precision.
    """
    analytic = cost.quadraticize(x, u1, u2)
    numeric = StageCost._fd_quadraticize(cost, x, u1, u2, hg=h, hh=max(h, 1e-5) * 30)

    def rel(a: Array, b: Array) -> float:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))

    return {
        "c": rel(analytic.c, numeric.c),
        "q": rel(analytic.q, numeric.q),
        "Q": rel(analytic.Q, numeric.Q),
        "r1": rel(analytic.r1, numeric.r1),
        "R1": rel(analytic.R1, numeric.R1),
        "r2": rel(analytic.r2, numeric.r2),
        "R2": rel(analytic.R2, numeric.R2),
    }


def trajectory_cost(cost: StageCost, xs: Array, u1s: Array, u2s: Array) -> float:
    """Sum of the stage cost along a trajectory."""
    return float(cost.evaluate_batch(xs, u1s, u2s).sum())
