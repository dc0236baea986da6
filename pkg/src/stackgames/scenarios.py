"""Scenario presets: dynamics, costs, parameters, and ground-truth generators.

Four named setups ship with the package: the quadratic and log-barrier
shepherd-and-sheep games, and two scripted driving maneuvers (passing and
merging). Every numeric default lives in a plain nested dict so it can round
trip through the CLI config files; `build` turns a merged dict into bound
model/cost/config objects.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import lq_stackelberg
from .costs import (
    CenterlineRidgeCost,
    ControlEffortCost,
    GoalCost,
    LaneBoundaryCost,
    PiecewiseLinearBoundary,
    ProximityLogBarrier,
    SpeedHeadingEnvelopeCost,
    StageCost,
    WeightedCost,
    make_barrier_herding_pair,
    make_herding_pair,
)
from .dynamics import DoubleIntegrator2D, DynamicsModel, Unicycle, rollout
from .leadership_filter import FilterConfig
from .silqgames import GameDefinition, SolverConfig, solve as silq_solve

Array = np.ndarray

__all__ = [
    "GenerationError",
    "RoadGeometry",
    "ScenarioPreset",
    "PRESET_NAMES",
    "default_config",
    "build",
    "generate_ground_truth",
    "simulate_measurements",
]


class GenerationError(RuntimeError):
    """A ground-truth generator could not produce a feasible trajectory."""


# ---------------------------------------------------------------------------
# Road geometry


class RoadGeometry:
    """Lane edges as piecewise-linear functions of longitudinal station y.

    `left`/`right` are the outer road edges (left = smaller x). For the
    merging road, per-lane corridors additionally model the barrier between
    the two entry lanes, opening onto the full road over a short ramp.
    """

    def __init__(self, lane_width: float, center_x: float, length: float,
                 left: PiecewiseLinearBoundary, right: PiecewiseLinearBoundary):
        self.lane_width = float(lane_width)
        self.center_x = float(center_x)
        self.length = float(length)
        self.left = left
        self.right = right

    def boundaries(self, y: Array) -> tuple[Array, Array]:
        lo, _ = self.left.value_and_slope(y)
        hi, _ = self.right.value_and_slope(y)
        return lo, hi

    def width(self, y: Array) -> Array:
        lo, hi = self.boundaries(y)
        return hi - lo

    @classmethod
    def two_lane(cls, lane_width: float, length: float, center_x: float = 0.0) -> "RoadGeometry":
        lo = PiecewiseLinearBoundary([0.0, length], [center_x - lane_width] * 2)
        hi = PiecewiseLinearBoundary([0.0, length], [center_x + lane_width] * 2)
        return cls(lane_width, center_x, length, lo, hi)

    @classmethod
    def merging(cls, lane_width: float = 2.5, lane_length: float = 30.0,
                merge_length: float = 30.0, tail_length: float = 30.0,
                center_x: float = 0.0) -> "RoadGeometry":
        y0, y1 = lane_length, lane_length + merge_length
        length = y1 + tail_length
        lo = PiecewiseLinearBoundary(
            [0.0, y0, y1, length],
            [center_x - lane_width, center_x - lane_width,
             center_x - lane_width / 2, center_x - lane_width / 2],
        )
        hi = PiecewiseLinearBoundary(
            [0.0, y0, y1, length],
            [center_x + lane_width, center_x + lane_width,
             center_x + lane_width / 2, center_x + lane_width / 2],
        )
        road = cls(lane_width, center_x, length, lo, hi)
        road._merge_start = y0
        road._merge_end = y1
        return road

    def corridor(self, lane: str, ramp: float = 1.0) -> tuple[PiecewiseLinearBoundary, PiecewiseLinearBoundary]:
        """Drivable band for an agent entering in the given lane.

        Before the merge segment the band is capped at the center barrier;
        it opens onto the full road across `2 * ramp` meters of station around
        the barrier end so the edge stays piecewise linear.
        """
        if not hasattr(self, "_merge_start"):
            return self.left, self.right
        y0 = self._merge_start
        open_at = float(np.interp(y0 + ramp, self.left.y, self.left.x))
        if lane == "left":
            inner = PiecewiseLinearBoundary(
                [0.0, y0 - ramp, y0 + ramp, self._merge_end],
                [self.center_x, self.center_x, -open_at + 2 * self.center_x, self.right.x[-1]],
            )
            return self.left, inner
        if lane == "right":
            inner = PiecewiseLinearBoundary(
                [0.0, y0 - ramp, y0 + ramp, self._merge_end],
                [self.center_x, self.center_x, open_at, self.left.x[-1]],
            )
            return inner, self.right
        raise ValueError("lane must be 'left' or 'right'")


# ---------------------------------------------------------------------------
# Preset parameter tables (plain YAML-safe scalars only)

_SOLVER_SLF = {
    "tau": 0.015, "max_iterations": 50, "alpha_init": 1.0,
    "alpha_min": 0.01, "beta": 0.98, "nu_margin": 0.001,
}

_FILTER_COMMON = {
    "n_particles": 50, "horizon": 75, "p_trans": 0.02, "prior": 0.5,
    "resample_fraction": 0.5, "sigma": 0.005,
    "process_noise_pos": 0.001, "process_noise_vel": 0.0001,
    "measurement_subset": "positions", "lookahead": None, "steps": None,
}

_DRIVING_PARAMS = {
    "dt": 0.05,
    "lane_width": 2.5,
    "speed_limit": 35.0,
    "d_min": 0.2,
    "dpsi_max": 1.0471975511965976,  # pi / 3
    "heading_ref": 1.5707963267948966,  # pi / 2, road runs along +y
    "speed": 10.0,
    "omega_max": 2.0,
    "accel_max": 9.0,
    "control_effort_weight": 0.1,
    "goal_speed_weight": 0.1,
}

_DEFAULTS: dict[str, dict] = {
    "lq_shepherd_sheep": {
        "params": {
            "dt": 0.02,
            "horizon": 501,
            "leader": 1,
            "x1": [0.0, 0.0, 0.0, 0.0, -4.0, 0.0, 8.0, 0.0],
        },
        "solver": dict(_SOLVER_SLF),
        "filter": {**_FILTER_COMMON, "solver": dict(_SOLVER_SLF)},
    },
    "nonlq_shepherd_sheep": {
        "params": {
            "dt": 0.02,
            "horizon": 501,
            "leader": 1,
            "barrier_half_width": 5.0,
            "agent1_position": [2.0, 1.0],
            "circle_radius": 2.23606797749979,          # sqrt(5)
            "arc_center_angle": 2.0344439357957027,     # atan2(2, -1)
            "arc_half_width": 0.2,
        },
        "solver": {
            "tau": 0.0012, "max_iterations": 3500, "alpha_init": 0.01,
            "alpha_min": 0.01, "beta": 0.98, "nu_margin": 0.001,
        },
        "filter": {
            **_FILTER_COMMON,
            "sigma": 0.02,
            "solver": {
                "tau": 0.001, "max_iterations": 50, "alpha_init": 1.0,
                "alpha_min": 0.02, "beta": 0.98, "nu_margin": 0.001,
            },
        },
    },
    "passing": {
        "params": {
            **_DRIVING_PARAMS,
            "horizon": 151,  # 7.5 s
            "leader": 1,
            "road_length": 120.0,
            "lane_x": 1.25,
            "pass_lane_x": -1.25,
            "y1_start": 8.0,
            "y2_start": 0.0,
            "pass_speed": 15.0,
            "follow_until": 2.5,
            "lane_change": [2.5, 4.0],
            "speed_up": [2.5, 4.5],
            "lane_return": [5.5, 7.0],
            "slow_down": [6.0, 7.5],
            "centerline_weight": 1.0,
        },
        "solver": dict(_SOLVER_SLF),
        "filter": {**_FILTER_COMMON, "n_particles": 100, "horizon": 20,
                   "solver": dict(_SOLVER_SLF)},
    },
    "merging": {
        "params": {
            **_DRIVING_PARAMS,
            "horizon": 101,  # 5 s
            "leader": 2,
            "lane_length": 30.0,
            "merge_length": 30.0,
            "tail_length": 30.0,
            "barrier_ramp": 1.0,
            "lane1_x": 1.25,
            "lane2_x": -1.25,
            "y1_start": 12.0,
            "y2_start": 15.0,
            "yield_speed": 7.0,
            "slow_window": [2.2, 3.4],
            "merge2_window": [1.8, 3.2],
            "merge1_window": [3.6, 5.0],
            "centerline_weight": 0.0,
        },
        "solver": dict(_SOLVER_SLF),
        "filter": {**_FILTER_COMMON, "n_particles": 100, "horizon": 20,
                   "solver": dict(_SOLVER_SLF)},
    },
}

PRESET_NAMES = tuple(_DEFAULTS)


def default_config(name: str) -> dict:
    """A deep copy of the preset's full parameter tree."""
    if name not in _DEFAULTS:
        raise KeyError(f"unknown scenario '{name}'; choose from {sorted(_DEFAULTS)}")
    return copy.deepcopy(_DEFAULTS[name])


def _merge_into(base: dict, overrides: dict, path: str = "") -> None:
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise KeyError(f"unknown override key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise KeyError(f"override '{where}' must be a mapping")
            _merge_into(base[key], value, where)
        else:
            base[key] = value


# ---------------------------------------------------------------------------
# Preset assembly


@dataclass
class ScenarioPreset:
    """A fully bound scenario: model, per-agent costs, configs, generators."""

    name: str
    config: dict
    model: DynamicsModel
    cost1: StageCost
    cost2: StageCost
    horizon: int
    leader: int
    solver: SolverConfig
    filter: FilterConfig
    kind: str                      # "analytic_lq" | "silqgames" | "scripted"
    road: RoadGeometry | None = None

    def game(self, leader: int | None = None, horizon: int | None = None) -> GameDefinition:
        return GameDefinition(
            model=self.model, cost1=self.cost1, cost2=self.cost2,
            horizon=self.horizon if horizon is None else horizon,
            leader=self.leader if leader is None else leader,
        )

    def initial_state(self, rep: int = 0, n_reps: int = 1) -> Array:
        return _initial_state(self, rep, n_reps)


def _diag_process_noise(model: DynamicsModel, pos: float, vel: float) -> Array:
    if isinstance(model, DoubleIntegrator2D):
        per_agent = [pos, vel, pos, vel]
    else:
        per_agent = [pos, pos, pos, vel]  # heading noise at position scale
    return np.diag(per_agent * 2).astype(float)


def _filter_config(model: DynamicsModel, fdict: dict) -> FilterConfig:
    n = model.n
    subset = fdict.get("measurement_subset", "positions")
    if subset == "positions":
        indices: tuple[int, ...] | None = tuple(
            i for pair in model.position_indices for i in pair
        )
    elif subset == "full":
        indices = None
    else:
        raise ValueError("measurement_subset must be 'positions' or 'full'")
    return FilterConfig(
        process_noise=_diag_process_noise(
            model, fdict["process_noise_pos"], fdict["process_noise_vel"]),
        measurement_noise=fdict["sigma"] * np.eye(n),
        n_particles=fdict["n_particles"],
        horizon=fdict["horizon"],
        p_trans=fdict["p_trans"],
        prior=fdict["prior"],
        resample_fraction=fdict["resample_fraction"],
        solver=SolverConfig(**fdict["solver"]),
        measurement_indices=indices,
        lookahead=fdict.get("lookahead"),
    )


def _driving_cost(agent: int, params: dict, goal: Array,
                  corridor: tuple[PiecewiseLinearBoundary, PiecewiseLinearBoundary],
                  center_x: float) -> WeightedCost:
    base = 0 if agent == 1 else 4
    other = 4 - base
    px, py, psi, v = base, base + 1, base + 2, base + 3
    terms = [
        GoalCost(agent, (px, py, psi, v), goal,
                 np.array([1.0, 1.0, 1.0, params["goal_speed_weight"]])),
        ProximityLogBarrier(agent, (px, py), (other, other + 1), params["d_min"]),
        SpeedHeadingEnvelopeCost(agent, psi, v, params["heading_ref"],
                                 params["dpsi_max"], params["speed_limit"]),
        ControlEffortCost(agent),
        LaneBoundaryCost(agent, px, py, corridor[0], corridor[1]),
        CenterlineRidgeCost(agent, px, center_x, params["lane_width"]),
    ]
    weights = [1.0, 1.0, 1.0, params["control_effort_weight"], 1.0,
               params["centerline_weight"]]
    return WeightedCost(terms, weights)


def build(name: str, overrides: dict | None = None) -> ScenarioPreset:
    """Bind a named scenario, applying overrides (nested dict) last."""
    cfg = default_config(name)
    if overrides:
        _merge_into(cfg, overrides)
    params = cfg["params"]
    solver = SolverConfig(**cfg["solver"])

    if name == "lq_shepherd_sheep":
        model: DynamicsModel = DoubleIntegrator2D(dt=params["dt"])
        cost1, cost2 = make_herding_pair()
        road = None
        kind = "analytic_lq"
    elif name == "nonlq_shepherd_sheep":
        model = Unicycle(dt=params["dt"])
        cost1, cost2 = make_barrier_herding_pair(
            params["barrier_half_width"], pos1=(0, 1), pos2=(4, 5))
        road = None
        kind = "silqgames"
    elif name == "passing":
        model = Unicycle(dt=params["dt"])
        road = RoadGeometry.two_lane(params["lane_width"], params["road_length"])
        goal_y = params["road_length"]
        goal1 = np.array([params["lane_x"], goal_y, params["heading_ref"], params["speed"]])
        goal2 = goal1.copy()  # agent 2 returns to the shared initial lane
        corridor = (road.left, road.right)
        cost1 = _driving_cost(1, params, goal1, corridor, road.center_x)
        cost2 = _driving_cost(2, params, goal2, corridor, road.center_x)
        kind = "scripted"
    elif name == "merging":
        model = Unicycle(dt=params["dt"])
        road = RoadGeometry.merging(
            params["lane_width"], params["lane_length"],
            params["merge_length"], params["tail_length"])
        goal_y = road.length
        goal = np.array([road.center_x, goal_y, params["heading_ref"], params["speed"]])
        ramp = params["barrier_ramp"]
        cost1 = _driving_cost(1, params, goal, road.corridor("right", ramp), road.center_x)
        cost2 = _driving_cost(2, params, goal, road.corridor("left", ramp), road.center_x)
        kind = "scripted"
    else:  # pragma: no cover - guarded by default_config
        raise KeyError(name)

    return ScenarioPreset(
        name=name,
        config=cfg,
        model=model,
        cost1=cost1,
        cost2=cost2,
        horizon=params["horizon"],
        leader=params["leader"],
        solver=solver,
        filter=_filter_config(model, cfg["filter"]),
        kind=kind,
        road=road,
    )


def _initial_state(preset: ScenarioPreset, rep: int, n_reps: int) -> Array:
    params = preset.config["params"]
    if preset.name == "lq_shepherd_sheep":
        return np.asarray(params["x1"], dtype=float)
    if preset.name == "nonlq_shepherd_sheep":
        hw = params["arc_half_width"]
        theta = params["arc_center_angle"]
        if n_reps > 1:
            theta += -hw + 2.0 * hw * rep / (n_reps - 1)
        r = params["circle_radius"]
        p1 = np.asarray(params["agent1_position"], dtype=float)
        p2 = np.array([r * math.cos(theta), r * math.sin(theta)])
        # Both agents start stationary, facing toward the origin.
        return np.array([
            p1[0], p1[1], math.atan2(-p1[1], -p1[0]), 0.0,
            p2[0], p2[1], math.atan2(-p2[1], -p2[0]), 0.0,
        ])
    if preset.name == "passing":
        psi, v = params["heading_ref"], params["speed"]
        return np.array([
            params["lane_x"], params["y1_start"], psi, v,
            params["lane_x"], params["y2_start"], psi, v,
        ])
    if preset.name == "merging":
        psi, v = params["heading_ref"], params["speed"]
        return np.array([
            params["lane1_x"], params["y1_start"], psi, v,
            params["lane2_x"], params["y2_start"], psi, v,
        ])
    raise KeyError(preset.name)


# ---------------------------------------------------------------------------
# Scripted maneuvers


def _smoothstep(t: Array, t0: float, t1: float) -> Array:
    s = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _integrate_speed(t: Array, v: Array, y0: float) -> Array:
    y = np.empty_like(v)
    y[0] = y0
    mid = 0.5 * (v[1:] + v[:-1])
    y[1:] = y0 + np.cumsum(mid * np.diff(t))
    return y


def _passing_waypoints(params: dict) -> tuple[Array, Array]:
    T = params["horizon"]
    t = np.arange(T) * params["dt"]
    v0 = params["speed"]

    x1 = np.full(T, params["lane_x"])
    y1 = params["y1_start"] + v0 * t

    out_w = params["lane_change"]
    back_w = params["lane_return"]
    dx = params["pass_lane_x"] - params["lane_x"]
    x2 = params["lane_x"] + dx * _smoothstep(t, *out_w) - dx * _smoothstep(t, *back_w)
    dv = params["pass_speed"] - v0
    v2 = v0 + dv * _smoothstep(t, *params["speed_up"]) - dv * _smoothstep(t, *params["slow_down"])
    y2 = _integrate_speed(t, v2, params["y2_start"])
    return np.column_stack([x1, y1]), np.column_stack([x2, y2])


def _merging_waypoints(params: dict) -> tuple[Array, Array]:
    T = params["horizon"]
    t = np.arange(T) * params["dt"]
    v0 = params["speed"]

    # Car 2 holds speed and cuts in first; car 1 starts close behind in the
    # other lane, brakes to open space for the cut-in, and merges after it.
    dv = params["yield_speed"] - v0
    v1 = v0 + dv * _smoothstep(t, *params["slow_window"])
    y1 = _integrate_speed(t, v1, params["y1_start"])
    x1 = params["lane1_x"] - params["lane1_x"] * _smoothstep(t, *params["merge1_window"])

    y2 = params["y2_start"] + v0 * t
    x2 = params["lane2_x"] - params["lane2_x"] * _smoothstep(t, *params["merge2_window"])
    return np.column_stack([x1, y1]), np.column_stack([x2, y2])


def script_to_controls(
    model: DynamicsModel,
    pos1: Array,
    pos2: Array,
    omega_max: float,
    accel_max: float,
    tol: float = 0.1,
) -> tuple[Array, Array, Array]:
    """Fit unicycle controls that realize the scripted waypoint paths.

    Headings and speeds come from finite differences of the waypoints, so
    integrating the fitted controls reproduces the positions exactly unless
    the control bounds clamp. The realized rollout is returned as ground
    truth; a position residual beyond `tol` raises GenerationError.
    """
    T = pos1.shape[0]
    dt = model.dt
    per_agent = []
    for pos in (pos1, pos2):
        d = np.diff(pos, axis=0)
        psi = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        v = np.linalg.norm(d, axis=1) / dt
        psi = np.append(psi, psi[-1])
        v = np.append(v, v[-1])
        omega = np.zeros(T)
        alpha = np.zeros(T)
        omega[:-1] = np.diff(psi) / dt
        alpha[:-1] = np.diff(v) / dt
        u = np.column_stack([
            np.clip(omega, -omega_max, omega_max),
            np.clip(alpha, -accel_max, accel_max),
        ])
        per_agent.append((psi[0], v[0], u))

    x1 = np.array([
        pos1[0, 0], pos1[0, 1], per_agent[0][0], per_agent[0][1],
        pos2[0, 0], pos2[0, 1], per_agent[1][0], per_agent[1][1],
    ])
    u1s, u2s = per_agent[0][2], per_agent[1][2]
    states = rollout(model, x1, u1s, u2s)
    scripted = np.concatenate([pos1, pos2], axis=1)
    realized = states[:, [0, 1, 4, 5]]
    residual = np.abs(realized - scripted).max()
    if residual > tol:
        worst = int(np.abs(realized - scripted).max(axis=1).argmax())
        raise GenerationError(
            f"scripted maneuver infeasible under control bounds: position "
            f"residual {residual:.3f} m at timestep {worst}")
    return states, u1s, u2s


# ---------------------------------------------------------------------------
# Ground truth + measurements


def generate_ground_truth(
    preset: ScenarioPreset,
    leader: int | None = None,
    seed: int = 0,
    rep: int = 0,
    n_reps: int = 1,
) -> tuple[Array, tuple[Array, Array], dict]:
    """Produce a feasible (states, (controls1, controls2), metadata) triple.

    LQ scenarios solve the game in closed form; the barrier scenario runs the
    iterative solver from zero nominal controls; driving scenarios realize
    their scripted maneuvers through inverse dynamics (the leader argument is
    ignored for scripts).
    """
    L = preset.leader if leader is None else leader
    x1 = preset.initial_state(rep, n_reps)
    if preset.kind == "analytic_lq":
        game = preset.game(leader=L)
        T = preset.horizon
        zeros = np.zeros((T, preset.model.n))
        zu1 = np.zeros((T, preset.model.m1))
        zu2 = np.zeros((T, preset.model.m2))
        lq = lq_stackelberg._build_lq_about(game, zeros, zu1, zu2)
        strategy = lq_stackelberg.solve(lq, validate=False)
        xs, u1s, u2s = lq_stackelberg.apply(strategy, preset.model, x1)
        meta = {"generator": "analytic_lq", "leader": L}
    elif preset.kind == "silqgames":
        game = preset.game(leader=L)
        T = preset.horizon
        nominal = (np.zeros((T, preset.model.m1)), np.zeros((T, preset.model.m2)))
        res = silq_solve(game, x1, nominal, preset.solver)
        if not res.converged:
            raise GenerationError(
                f"ground-truth solve did not converge in {res.iterations} iterations")
        xs, u1s, u2s = res.states, res.controls1, res.controls2
        meta = {"generator": "silqgames", "leader": L,
                "iterations": res.iterations, "converged": res.converged}
    elif preset.kind == "scripted":
        params = preset.config["params"]
        if preset.name == "passing":
            pos1, pos2 = _passing_waypoints(params)
        else:
            pos1, pos2 = _merging_waypoints(params)
        xs, u1s, u2s = script_to_controls(
            preset.model, pos1, pos2, params["omega_max"], params["accel_max"])
        meta = {"generator": "scripted", "leader": L}
    else:  # pragma: no cover
        raise GenerationError(f"no generator for scenario kind '{preset.kind}'")
    return xs, (u1s, u2s), meta


def simulate_measurements(states: Array, sigma, seed: int = 0) -> Array:
    """Observed states: ground truth plus seeded Gaussian noise."""
    states = np.asarray(states, dtype=float)
    n = states.shape[1]
    Sig = np.asarray(sigma, dtype=float)
    if Sig.ndim == 0:
        Sig = float(Sig) * np.eye(n)
    if Sig.shape != (n, n):
        raise ValueError(f"sigma must be scalar or {n}x{n}")
    if np.linalg.eigvalsh(Sig).min() < 1e-12 * (1.0 - 1e-9):
        raise ValueError("measurement covariance must be at least 1e-12 I")
    L = np.linalg.cholesky(Sig)
    rng = np.random.default_rng(seed)
    return states + rng.standard_normal(states.shape) @ L.T
