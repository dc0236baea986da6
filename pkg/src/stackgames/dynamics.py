"""Discrete-time two-agent joint dynamics.

A model advances the stacked state of both agents one step,
``x_{t+1} = f(x_t, u1_t, u2_t)``, and exposes Jacobians of that step map.
Built-in models integrate with a forward Euler step so that the step map is
an explicit polynomial/trigonometric function of the current state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

Array = np.ndarray

__all__ = [
    "DimensionError",
    "LinearizedStep",
    "DynamicsModel",
    "DoubleIntegrator2D",
    "Unicycle",
    "rollout",
]


class DimensionError(ValueError):
    """A state or control vector does not match the model dimensions."""


@dataclass
class LinearizedStep:
    """First-order model of one step: dx_{t+1} ~= A dx_t + B1 du1_t + B2 du2_t."""

    A: Array
    B1: Array
    B2: Array


def _check_step_args(model: "DynamicsModel", x: Array, u1: Array, u2: Array) -> None:
    if x.shape != (model.n,):
        raise DimensionError(f"state has shape {x.shape}, expected ({model.n},)")
    if u1.shape != (model.m1,):
        raise DimensionError(f"u1 has shape {u1.shape}, expected ({model.m1},)")
    if u2.shape != (model.m2,):
        raise DimensionError(f"u2 has shape {u2.shape}, expected ({model.m2},)")


class DynamicsModel:
    """Base class for two-agent joint dynamics.

    Attributes
    ----------
    n, m1, m2 : joint state dimension and per-agent control dimensions.
    dt : step length in seconds.
    position_indices : pair of (px, py) index tuples into the joint state,
        one per agent.
    jit_step : optional numba-compiled ``(x, u1, u2, dt) -> x_next`` kernel
        used by the hot solver loops; pure-Python paths are used when None.
    """

    n: int
    m1: int
    m2: int
    dt: float
    position_indices: tuple[tuple[int, int], tuple[int, int]]
    jit_step = None

    def step(self, x: Array, u1: Array, u2: Array) -> Array:
        raise NotImplementedError

    def linearize(self, x: Array, u1: Array, u2: Array) -> LinearizedStep:
        """Jacobians of the step map at one point. Default: central differences."""
        _check_step_args(self, x, u1, u2)
        h = 1e-6
        A = np.empty((self.n, self.n))
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = h
            A[:, i] = (self.step(x + e, u1, u2) - self.step(x - e, u1, u2)) / (2 * h)
        B1 = np.empty((self.n, self.m1))
        for i in range(self.m1):
            e = np.zeros(self.m1)
            e[i] = h
            B1[:, i] = (self.step(x, u1 + e, u2) - self.step(x, u1 - e, u2)) / (2 * h)
        B2 = np.empty((self.n, self.m2))
        for i in range(self.m2):
            e = np.zeros(self.m2)
            e[i] = h
            B2[:, i] = (self.step(x, u1, u2 + e) - self.step(x, u1, u2 - e)) / (2 * h)
        return LinearizedStep(A=A, B1=B1, B2=B2)

    def linearize_trajectory(self, xs: Array, u1s: Array, u2s: Array) -> tuple[Array, Array, Array]:
        """Stacked Jacobians along a trajectory, shapes [T,n,n], [T,n,m1], [T,n,m2]."""
        T = xs.shape[0]
        A = np.empty((T, self.n, self.n))
        B1 = np.empty((T, self.n, self.m1))
        B2 = np.empty((T, self.n, self.m2))
        for t in range(T):
            lin = self.linearize(xs[t], u1s[t], u2s[t])
            A[t], B1[t], B2[t] = lin.A, lin.B1, lin.B2
        return A, B1, B2


@njit(cache=True)
def _di_step(x, u1, u2, dt):
    out = np.empty(8)
    out[0] = x[0] + dt * x[1]
    out[1] = x[1] + dt * u1[0]
    out[2] = x[2] + dt * x[3]
    out[3] = x[3] + dt * u1[1]
    out[4] = x[4] + dt * x[5]
    out[5] = x[5] + dt * u2[0]
    out[6] = x[6] + dt * x[7]
    out[7] = x[7] + dt * u2[1]
    return out


@njit(cache=True)
def _uni_step(x, u1, u2, dt):
    out = np.empty(8)
    out[0] = x[0] + dt * x[3] * np.cos(x[2])
    out[1] = x[1] + dt * x[3] * np.sin(x[2])
    out[2] = x[2] + dt * u1[0]
    out[3] = x[3] + dt * u1[1]
    out[4] = x[4] + dt * x[7] * np.cos(x[6])
    out[5] = x[5] + dt * x[7] * np.sin(x[6])
    out[6] = x[6] + dt * u2[0]
    out[7] = x[7] + dt * u2[1]
    return out


class DoubleIntegrator2D(DynamicsModel):
    """Two planar double integrators, per-agent state [px, vx, py, vy], control [ax, ay]."""

    n = 8
    m1 = 2
    m2 = 2
    position_indices = ((0, 2), (4, 6))
    jit_step = staticmethod(_di_step)

    def __init__(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        A4 = np.eye(4)
        A4[0, 1] = self.dt
        A4[2, 3] = self.dt
        B4 = np.zeros((4, 2))
        B4[1, 0] = self.dt
        B4[3, 1] = self.dt
        self._A = np.eye(8)
        self._A[:4, :4] = A4
        self._A[4:, 4:] = A4
        self._B1 = np.vstack([B4, np.zeros((4, 2))])
        self._B2 = np.vstack([np.zeros((4, 2)), B4])

    def step(self, x: Array, u1: Array, u2: Array) -> Array:
        _check_step_args(self, x, u1, u2)
        return _di_step(x, u1, u2, self.dt)

    def linearize(self, x: Array, u1: Array, u2: Array) -> LinearizedStep:
        return LinearizedStep(A=self._A.copy(), B1=self._B1.copy(), B2=self._B2.copy())

    def linearize_trajectory(self, xs: Array, u1s: Array, u2s: Array) -> tuple[Array, Array, Array]:
        T = xs.shape[0]
        return (
            np.broadcast_to(self._A, (T, 8, 8)).copy(),
            np.broadcast_to(self._B1, (T, 8, 2)).copy(),
            np.broadcast_to(self._B2, (T, 8, 2)).copy(),
        )


class Unicycle(DynamicsModel):
    """Two planar unicycles, per-agent state [px, py, psi, v], control [omega, accel]."""

    n = 8
    m1 = 2
    m2 = 2
    position_indices = ((0, 1), (4, 5))
    jit_step = staticmethod(_uni_step)

    def __init__(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)

    def step(self, x: Array, u1: Array, u2: Array) -> Array:
        _check_step_args(self, x, u1, u2)
        return _uni_step(x, u1, u2, self.dt)

    def linearize(self, x: Array, u1: Array, u2: Array) -> LinearizedStep:
        _check_step_args(self, x, u1, u2)
        dt = self.dt
        A = np.eye(8)
        for base in (0, 4):
            psi, v = x[base + 2], x[base + 3]
            A[base + 0, base + 2] = -dt * v * np.sin(psi)
            A[base + 0, base + 3] = dt * np.cos(psi)
            A[base + 1, base + 2] = dt * v * np.cos(psi)
            A[base + 1, base + 3] = dt * np.sin(psi)
        B = np.zeros((8, 2))
        B[2, 0] = dt
        B[3, 1] = dt
        B1 = B
        B2 = np.zeros((8, 2))
        B2[6, 0] = dt
        B2[7, 1] = dt
        return LinearizedStep(A=A, B1=B1, B2=B2)

    def linearize_trajectory(self, xs: Array, u1s: Array, u2s: Array) -> tuple[Array, Array, Array]:
        T = xs.shape[0]
        dt = self.dt
        A = np.tile(np.eye(8), (T, 1, 1))
        for base in (0, 4):
            psi = xs[:, base + 2]
            v = xs[:, base + 3]
            A[:, base + 0, base + 2] = -dt * v * np.sin(psi)
            A[:, base + 0, base + 3] = dt * np.cos(psi)
            A[:, base + 1, base + 2] = dt * v * np.cos(psi)
            A[:, base + 1, base + 3] = dt * np.sin(psi)
        B1 = np.zeros((T, 8, 2))
        B1[:, 2, 0] = dt
        B1[:, 3, 1] = dt
        B2 = np.zeros((T, 8, 2))
        B2[:, 6, 0] = dt
        B2[:, 7, 1] = dt
        return A, B1, B2


@njit(cache=True)
def _rollout_jit(step_fn, dt, x1, u1s, u2s):
    T = u1s.shape[0]
    xs = np.empty((T, x1.shape[0]))
    xs[0] = x1
    for t in range(T - 1):
        xs[t + 1] = step_fn(xs[t], u1s[t], u2s[t], dt)
    return xs


def rollout(model: DynamicsModel, x1: Array, u1s: Array, u2s: Array) -> Array:
    """Integrate controls from x1. Returns states [T, n]; u at the last index is unused."""
    x1 = np.asarray(x1, dtype=float)
    u1s = np.asarray(u1s, dtype=float)
    u2s = np.asarray(u2s, dtype=float)
    if u1s.shape[0] != u2s.shape[0]:
        raise DimensionError("control sequences must have equal length")
    if u1s.shape[0] < 1:
        raise DimensionError("need at least one timestep")
    _check_step_args(model, x1, u1s[0], u2s[0])
    if model.jit_step is not None:
        return _rollout_jit(model.jit_step, model.dt, x1, u1s, u2s)
    T = u1s.shape[0]
    xs = np.empty((T, model.n))
    xs[0] = x1
    for t in range(T - 1):
        xs[t + 1] = model.step(xs[t], u1s[t], u2s[t])
    return xs
