"""Command-line experiment runner: presets, Monte Carlo batches, artifacts.

Single entry point ``stackgames`` with two subcommands. ``run`` executes a
scenario in one of five modes (solve, filter, montecarlo-solve,
montecarlo-filter, verify) and persists traces, per-iteration logs, and a
JSON summary; ``timing`` aggregates wall-time statistics over summaries.

Artifacts are plain text: CSV files carry a ``# schema:`` version line and
round-trip-exact floats (``repr``), so downstream consumers see the same
numbers the run produced. Per-repetition seeds derive from
``SeedSequence([master_seed, rep])``, which makes Monte Carlo output
independent of the worker count.

Exit codes: 0 success, 1 configuration/input error (message names the
offending key path), 2 a repetition failed to converge (suppress with
``--allow-nonconverged``) or a verification check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import scenarios
from .dynamics import rollout
from .leadership_filter import run_filter
from .lq_stackelberg import verify_stackelberg
from .silqgames import solve as silq_solve

TRACE_SCHEMA = "stackgames.trace.v1"
ITERATIONS_SCHEMA = "stackgames.iterations.v1"
SUMMARY_SCHEMA = "stackgames.summary.v1"

MODES = ("solve", "filter", "montecarlo-solve", "montecarlo-filter", "verify")

OUT_ROOT_ENV = "STACKGAMES_OUT"

__all__ = [
    "main",
    "run",
    "load_trace",
    "load_iterations",
    "load_summary",
    "timing_report",
    "config_schema",
]


# ---------------------------------------------------------------------------
# Configuration


def _tree_schema(node):
    """JSON schema accepting exactly the keys present in a default tree."""
    if isinstance(node, dict):
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _tree_schema(v) for k, v in node.items()},
        }
    if isinstance(node, bool):
        return {"type": "boolean"}
    if isinstance(node, int):
        return {"type": "integer"}
    if isinstance(node, float):
        return {"type": "number"}
    if isinstance(node, str):
        return {"type": "string"}
    if isinstance(node, list):
        return {"type": "array"}
    return {}  # null default: key exists but the type is open (e.g. steps)


def config_schema(scenario: str) -> dict:
    """Schema for a full run configuration against one scenario's key set."""
    defaults = scenarios.default_config(scenario)
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "scenario": {"type": "string", "enum": sorted(scenarios.PRESET_NAMES)},
            "mode": {"type": "string", "enum": list(MODES)},
            "seed": {"type": "integer", "minimum": 0},
            "reps": {"type": "integer", "minimum": 1},
            "workers": {"type": "integer", "minimum": 1},
            "out": {"type": ["string", "null"]},
            "trace": {"type": ["string", "null"]},
            "allow_nonconverged": {"type": "boolean"},
            "overrides": _tree_schema(defaults),
        },
        "required": ["scenario", "mode"],
    }


class ConfigError(Exception):
    """Configuration rejected; the message names the offending key path."""


def _validate(config: dict) -> None:
    scenario = config.get("scenario")
    if not isinstance(scenario, str) or scenario not in scenarios.PRESET_NAMES:
        raise ConfigError(
            f"config error at scenario: unknown scenario {scenario!r}; "
            f"choose from {sorted(scenarios.PRESET_NAMES)}")
    validator = jsonschema.Draft202012Validator(config_schema(scenario))
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {err.message}")


def _set_path(tree: dict, dotted: str, raw: str) -> None:
    """Apply an override like ``params.horizon=101`` into a config tree."""
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"config error at {dotted}: unknown key path")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"config error at {dotted}: unknown key path")
    node[keys[-1]] = yaml.safe_load(raw)


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge file config, flags, and --set overrides into one validated dict."""
    config: dict = {}
    if args.config:
        text = Path(args.config).read_text()
        loaded = yaml.safe_load(text)
        if not isinstance(loaded, dict):
            raise ConfigError("config error at <root>: expected a mapping")
        config.update(loaded)
    for key in ("scenario", "mode", "seed", "reps", "workers", "out", "trace"):
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    if args.allow_nonconverged:
        config["allow_nonconverged"] = True
    config.setdefault("seed", 0)
    config.setdefault("reps", 1)
    config.setdefault("workers", 1)
    config.setdefault("out", None)
    config.setdefault("trace", None)
    config.setdefault("allow_nonconverged", False)

    if "scenario" not in config or "mode" not in config:
        raise ConfigError("config error at <root>: scenario and mode are required")
    if config["scenario"] not in scenarios.PRESET_NAMES:
        raise ConfigError(
            f"config error at scenario: unknown scenario {config['scenario']!r}; "
            f"choose from {sorted(scenarios.PRESET_NAMES)}")

    # Overrides start from the full default tree so the resolved file always
    # lists every key with its final value.
    tree = scenarios.default_config(config["scenario"])
    file_overrides = config.get("overrides") or {}
    try:
        scenarios._merge_into(tree, file_overrides)
    except KeyError as exc:
        raise ConfigError(f"config error at overrides: {exc.args[0]}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"config error at --set {item!r}: expected key=value")
        dotted, raw = item.split("=", 1)
        _set_path(tree, dotted, raw)
    config["overrides"] = tree

    _validate(config)
    return config


def _default_out(config: dict) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{config['scenario']}-{config['mode']}-seed{config['seed']}"


def _rep_seeds(master: int, rep: int) -> tuple[int, int]:
    """Worker-independent (measurement, filter) seeds for one repetition."""
    measurement, filt = np.random.SeedSequence([master, rep]).generate_state(2)
    return int(measurement), int(filt)


# ---------------------------------------------------------------------------
# CSV artifacts


def _fmt(value) -> str:
    return repr(float(value))


def _write_csv(path: Path, schema: str, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema: {schema}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv(path, expected_schema: str) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema: "):
            raise ConfigError(f"{path}: missing schema line")
        schema = first[len("# schema: "):]
        if schema != expected_schema:
            raise ConfigError(
                f"{path}: unsupported schema {schema!r} (expected {expected_schema!r})")
        header = fh.readline().strip().split(",")
        data = np.genfromtxt(fh, delimiter=",", ndmin=2)
    if data.size and data.shape[1] != len(header):
        raise ConfigError(f"{path}: row width disagrees with header")
    return header, data


def load_trace(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a trace.csv; rejects unknown versions."""
    return _read_csv(path, TRACE_SCHEMA)


def load_iterations(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of an iterations.csv."""
    return _read_csv(path, ITERATIONS_SCHEMA)


def _trace_rows(dt: float, xs, u1s, u2s, extra_cols=(), t0: float = 0.0):
    for k in range(xs.shape[0]):
        extras = [col[k] for col in extra_cols]
        yield [t0 + k * dt, *xs[k], *u1s[k], *u2s[k], *extras]


def _trace_header(n: int, m1: int, m2: int, extras=()) -> list[str]:
    return (["t"] + [f"x{i}" for i in range(n)]
            + [f"u1_{j}" for j in range(m1)] + [f"u2_{j}" for j in range(m2)]
            + list(extras))


def write_trace(path: Path, dt: float, xs, u1s, u2s, belief=None) -> None:
    """trace.csv: one row per timestep; in filter mode adds b1, b2, ess.

    Filter estimates exist for timesteps 1..T-1 only, so with `belief` set
    the first state row is dropped and the time column starts at dt.
    """
    xs = np.asarray(xs, dtype=float)
    u1s = np.asarray(u1s, dtype=float)
    u2s = np.asarray(u2s, dtype=float)
    extras, names, t0 = (), (), 0.0
    if belief is not None:
        xs, u1s, u2s, t0 = xs[1:], u1s[1:], u2s[1:], dt
        extras = (belief.b1, belief.b2, belief.ess)
        names = ("b1", "b2", "ess")
    header = _trace_header(xs.shape[1], u1s.shape[1], u2s.shape[1], names)
    _write_csv(path, TRACE_SCHEMA, header, _trace_rows(
        dt, xs, u1s, u2s, extras, t0=t0))


def write_iterations(path: Path, result) -> None:
    """iterations.csv: iteration index, convergence metric, step size,
    per-agent objectives at the accepted iterate."""
    rows = (
        [k + 1, result.metric_history[k], result.alpha_history[k],
         result.objective_history[k, 0], result.objective_history[k, 1]]
        for k in range(len(result.metric_history))
    )
    _write_csv(path, ITERATIONS_SCHEMA, ["k", "conv", "alpha", "obj1", "obj2"], rows)


# ---------------------------------------------------------------------------
# Summary


def _percentile_band(histories: list[np.ndarray]) -> dict:
    """Per-iteration 10/50/90 percentiles across repetitions (ragged ok)."""
    if not histories:
        return {"iteration": [], "p10": [], "p50": [], "p90": []}
    longest = max(len(h) for h in histories)
    iteration, p10, p50, p90 = [], [], [], []
    for k in range(longest):
        at_k = [h[k] for h in histories if len(h) > k]
        iteration.append(k + 1)
        lo, mid, hi = np.percentile(at_k, [10.0, 50.0, 90.0])
        p10.append(float(lo))
        p50.append(float(mid))
        p90.append(float(hi))
    return {"iteration": iteration, "p10": p10, "p50": p50, "p90": p90}


def _solve_aggregates(per_rep: list[dict], histories: list[np.ndarray]) -> dict:
    iters = np.array([r["iterations"] for r in per_rep], dtype=float)
    return {
        "convergence_rate": float(np.mean([r["converged"] for r in per_rep])),
        "iterations_mean": float(iters.mean()),
        "iterations_std": float(iters.std()),
        "metric_band": _percentile_band(histories),
    }


def _filter_aggregates(per_rep: list[dict]) -> dict:
    return {
        "mean_b1": float(np.mean([r["mean_b1"] for r in per_rep])),
        "mean_b2": float(np.mean([r["mean_b2"] for r in per_rep])),
        "mean_ess": float(np.mean([r["mean_ess"] for r in per_rep])),
    }


def write_summary(path: Path, config: dict, per_rep: list[dict],
                  aggregates: dict) -> None:
    payload = {
        "schema": SUMMARY_SCHEMA,
        "scenario": config["scenario"],
        "mode": config["mode"],
        "seed": config["seed"],
        "reps": config["reps"],
        "workers": config["workers"],
        "per_rep": per_rep,
        "aggregates": aggregates,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def load_summary(path, check: bool = True) -> dict:
    """Parse summary.json; optionally recheck aggregates against the rows."""
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != SUMMARY_SCHEMA:
        raise ConfigError(
            f"{path}: unsupported schema {payload.get('schema')!r}")
    if check:
        per_rep = payload["per_rep"]
        agg = payload["aggregates"]
        if "convergence_rate" in agg:
            again = _solve_aggregates(per_rep, [])
            for key in ("convergence_rate", "iterations_mean", "iterations_std"):
                if abs(again[key] - agg[key]) > 1e-12:
                    raise ConfigError(
                        f"{path}: aggregate {key} disagrees with per-rep rows")
        else:
            again = _filter_aggregates(per_rep)
            for key, value in again.items():
                if abs(value - agg[key]) > 1e-12:
                    raise ConfigError(
                        f"{path}: aggregate {key} disagrees with per-rep rows")
    return payload


# ---------------------------------------------------------------------------
# Modes


def _zero_nominal(preset) -> tuple[np.ndarray, np.ndarray]:
    T = preset.horizon
    return (np.zeros((T, preset.model.m1)), np.zeros((T, preset.model.m2)))


def _solve_rep(preset, rep: int, reps: int):
    x1 = preset.initial_state(rep, reps)
    tic = time.perf_counter()
    result = silq_solve(preset.game(), x1, _zero_nominal(preset), preset.solver)
    elapsed = time.perf_counter() - tic
    times = result.iteration_times
    row = {
        "rep": rep,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "seconds_total": elapsed,
        "seconds_per_iteration_mean": float(times.mean()) if times.size else 0.0,
        "seconds_per_iteration_std": float(times.std()) if times.size else 0.0,
        "objective1": float(result.objective1),
        "objective2": float(result.objective2),
    }
    return row, result


def _filter_rep(preset, config: dict, rep: int):
    seed_measurement, seed_filter = _rep_seeds(config["seed"], rep)
    xs, (u1s, u2s), _meta = scenarios.generate_ground_truth(
        preset, rep=rep, n_reps=config["reps"])
    steps = preset.config["filter"]["steps"]
    if steps is not None:
        xs, u1s, u2s = xs[:steps], u1s[:steps], u2s[:steps]
    ys = scenarios.simulate_measurements(
        xs, preset.filter.measurement_noise, seed=seed_measurement)
    result = run_filter(preset.model, preset.cost1, preset.cost2, ys,
                        (u1s, u2s), preset.filter, seed=seed_filter)
    belief = result.belief
    cycles = result.cycle_times[1:]  # step 0 performs no measurement cycle
    row = {
        "rep": rep,
        "seed_measurement": seed_measurement,
        "seed_filter": seed_filter,
        "mean_b1": float(belief.b1.mean()),
        "mean_b2": float(belief.b2.mean()),
        "final_b1": float(belief.b1[-1]),
        "final_b2": float(belief.b2[-1]),
        "mean_ess": float(belief.ess.mean()),
        "seconds_per_cycle_mean": float(cycles.mean()) if cycles.size else 0.0,
        "seconds_per_cycle_std": float(cycles.std()) if cycles.size else 0.0,
    }
    return row, (xs, u1s, u2s, belief)


def _map_reps(fn, reps: int, workers: int):
    """Run repetitions on a bounded pool; results ordered by index."""
    if workers == 1 or reps == 1:
        return [fn(rep) for rep in range(reps)]
    out = [None] * reps
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for rep, value in pool.map(lambda r: (r, fn(r)), range(reps)):
            out[rep] = value
    return out


def _run_solve(config: dict, out: Path) -> int:
    preset = scenarios.build(config["scenario"], config["overrides"])
    monte = config["mode"] == "montecarlo-solve"
    reps = config["reps"] if monte else 1

    pairs = _map_reps(lambda r: _solve_rep(preset, r, reps), reps,
                      config["workers"])
    per_rep, histories = [], []
    for rep, (row, result) in enumerate(pairs):
        rep_dir = out / f"rep_{rep:03d}" if monte else out
        rep_dir.mkdir(parents=True, exist_ok=True)
        write_trace(rep_dir / "trace.csv", preset.model.dt,
                    result.states, result.controls1, result.controls2)
        write_iterations(rep_dir / "iterations.csv", result)
        per_rep.append(row)
        histories.append(result.metric_history)

    write_summary(out / "summary.json", config, per_rep,
                  _solve_aggregates(per_rep, histories))
    failed = [r["rep"] for r in per_rep if not r["converged"]]
    if failed and not config["allow_nonconverged"]:
        print(f"error: repetitions did not converge: {failed}", file=sys.stderr)
        return 2
    return 0


def _run_filter_mode(config: dict, out: Path) -> int:
    preset = scenarios.build(config["scenario"], config["overrides"])
    monte = config["mode"] == "montecarlo-filter"
    reps = config["reps"] if monte else 1

    pairs = _map_reps(lambda r: _filter_rep(preset, config, r), reps,
                      config["workers"])
    per_rep = []
    for rep, (row, payload) in enumerate(pairs):
        xs, u1s, u2s, belief = payload
        rep_dir = out / f"rep_{rep:03d}" if monte else out
        rep_dir.mkdir(parents=True, exist_ok=True)
        write_trace(rep_dir / "trace.csv", preset.model.dt, xs, u1s, u2s,
                    belief=belief)
        per_rep.append(row)

    write_summary(out / "summary.json", config, per_rep,
                  _filter_aggregates(per_rep))
    return 0


def _run_verify(config: dict, out: Path) -> int:
    if not config.get("trace"):
        print("error: --mode verify requires --trace", file=sys.stderr)
        return 1
    preset = scenarios.build(config["scenario"], config["overrides"])
    model = preset.model
    try:
        header, data = load_trace(config["trace"])
    except (OSError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    n, m1, m2 = model.n, model.m1, model.m2
    expected = _trace_header(n, m1, m2)
    if header[: len(expected)] != expected or data.shape[1] < len(expected):
        print("error: trace columns do not match the scenario's model",
              file=sys.stderr)
        return 1
    xs = data[:, 1:1 + n]
    u1s = data[:, 1 + n:1 + n + m1]
    u2s = data[:, 1 + n + m1:1 + n + m1 + m2]
    if not np.isfinite(xs).all() or not np.isfinite(u1s).all() \
            or not np.isfinite(u2s).all():
        print("error: trace contains non-finite entries", file=sys.stderr)
        return 1

    resim = rollout(model, xs[0], u1s, u2s)
    residuals = np.abs(resim - xs).max(axis=1)
    worst = int(residuals.argmax())
    dyn_ok = residuals[worst] <= 1e-8
    print(f"dynamics residual: max {residuals[worst]:.3e} at timestep {worst} "
          f"-> {'pass' if dyn_ok else 'FAIL'}")

    report = verify_stackelberg(
        preset.game(), xs, u1s, u2s,
        budget=0.05, n_samples=100, n_timesteps=10, seed=config["seed"])
    follower_ok = report["min_follower_change"] >= -1e-3
    print(f"follower perturbations: min objective change "
          f"{report['min_follower_change']:.3e} -> "
          f"{'pass' if follower_ok else 'FAIL (improvement direction exists)'}")
    print(f"leader perturbations: min objective change "
          f"{report['min_leader_change']:.3e} (informational)")
    ok = dyn_ok and follower_ok
    print("verify:", "pass" if ok else "FAIL")
    return 0 if ok else 2


def run(config: dict) -> int:
    """Execute one validated configuration; returns the exit status."""
    out = Path(config["out"]) if config["out"] else _default_out(config)
    if config["mode"] != "verify":
        out.mkdir(parents=True, exist_ok=True)
        resolved = dict(config)
        resolved["out"] = str(out)
        (out / "config.resolved.yaml").write_text(
            yaml.safe_dump(resolved, sort_keys=False))
    if config["mode"] in ("solve", "montecarlo-solve"):
        return _run_solve(config, out)
    if config["mode"] in ("filter", "montecarlo-filter"):
        return _run_filter_mode(config, out)
    return _run_verify(config, out)


# ---------------------------------------------------------------------------
# Timing report


def timing_report(summary_paths) -> str:
    """Tabulate per-iteration / per-cycle wall times across summaries.

    Statistics aggregate the per-repetition mean times; informational only.
    """
    lines = [f"{'summary':<40} {'kind':<10} {'reps':>5} {'mean [s]':>12} {'std [s]':>12}"]
    for path in summary_paths:
        payload = load_summary(path)
        per_rep = payload["per_rep"]
        if per_rep and "seconds_per_iteration_mean" in per_rep[0]:
            kind, key = "solve", "seconds_per_iteration_mean"
        else:
            kind, key = "filter", "seconds_per_cycle_mean"
        times = np.array([row[key] for row in per_rep], dtype=float)
        mean = float(times.mean()) if times.size else 0.0
        std = float(times.std()) if times.size else 0.0
        lines.append(
            f"{str(path):<40} {kind:<10} {len(per_rep):>5} {mean:>12.6f} {std:>12.6f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stackgames",
        description="Stackelberg game experiments: solve presets, run the "
                    "leadership filter, batch Monte Carlo repetitions.")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute a scenario")
    runp.add_argument("--config", help="YAML run configuration")
    runp.add_argument("--scenario", choices=sorted(scenarios.PRESET_NAMES))
    runp.add_argument("--mode", choices=MODES)
    runp.add_argument("--reps", type=int)
    runp.add_argument("--seed", type=int)
    runp.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV} "
                                    "or ./runs, plus a run-specific name)")
    runp.add_argument("--workers", type=int)
    runp.add_argument("--allow-nonconverged", action="store_true",
                      help="exit 0 even when repetitions fail to converge")
    runp.add_argument("--trace", help="trace.csv to check (verify mode)")
    runp.add_argument("--set", action="append", metavar="KEY=VALUE",
                      help="override a scenario key, e.g. params.horizon=101")

    timep = sub.add_parser("timing", help="wall-time table from summaries")
    timep.add_argument("summaries", nargs="+", help="summary.json paths")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "timing":
        try:
            print(timing_report(args.summaries))
        except (OSError, ConfigError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        config = resolve_config(args)
    except (OSError, ConfigError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
