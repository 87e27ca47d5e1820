"""Command-line front end.

Subcommands: ``forecast`` (ensemble forecasts from a CSV of center
measurements), ``simulate`` (one closed-loop episode), ``montecarlo``
(batched episodes per risk level), ``solver-selftest`` (QP oracle suite).
Scenario files are TOML with sections [scenario], [planner], [bootstrap],
[noise]; ``--set key=value`` flags override file values (flags win).  Every
run writes a manifest.json capturing the resolved configuration, the seed,
and output hashes; ``--from-manifest`` reruns a manifest byte-identically.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .bootstrap import BootstrapParams, MeasurementBuffer, forecast_ensemble, generate_ensemble
from .planner import PlannerConfig
from .sim import SPEED_RANGES, FigureEight, Scenario, monte_carlo, run_episode, summarize

USAGE_ERROR = 2
INTERNAL_ERROR = 1

SCENARIO_KEYS = {
    "case", "seed", "rate_hz", "obstacle_radius", "radius_margin", "speed_range",
    "encounter_radius", "crossing_delay", "tail_duration", "max_duration",
    "drag_rate", "planner_enabled",
}
REFERENCE_KEYS = {"amp_x", "amp_y", "period", "altitude"}
PLANNER_KEYS = {
    "horizon", "epsilon", "trust_init", "trust_decay", "scp_iters", "q_weights",
    "r_weights", "input_reference", "input_lb", "input_ub", "state_lb", "state_ub",
    "agent_radius", "trust_from_init", "qp_max_iter",
}
BOOTSTRAP_KEYS = {
    "n_train", "n_step", "rank_threshold", "rank_relax", "ensemble_size",
    "window", "horizon", "max_history",
}
NOISE_KEYS = {"half_width"}


class UsageError(Exception):
    pass


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _load_config(path: str | None, overrides: list[str]) -> dict:
    config: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"scenario file {path} not found")
        if p.suffix == ".json":
            loaded = json.loads(p.read_text())
            config = loaded.get("config", loaded)
        else:
            with open(p, "rb") as f:
                config = tomllib.load(f)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, _, name = key.partition(".")
        if not name:
            section, name = "scenario", section
        config.setdefault(section, {})[name] = _coerce(value)
    return config


def _check_keys(section: str, table: dict, allowed: set):
    unknown = set(table) - allowed
    if unknown:
        raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")


def build_scenario(config: dict) -> Scenario:
    sc = dict(config.get("scenario", {}))
    ref = dict(config.get("reference", {}))
    pl = dict(config.get("planner", {}))
    bs = dict(config.get("bootstrap", {}))
    noise = dict(config.get("noise", {}))
    _check_keys("scenario", sc, SCENARIO_KEYS)
    _check_keys("reference", ref, REFERENCE_KEYS)
    _check_keys("planner", pl, PLANNER_KEYS)
    _check_keys("bootstrap", bs, BOOTSTRAP_KEYS)
    _check_keys("noise", noise, NOISE_KEYS)
    for tuple_key in ("q_weights", "r_weights", "input_reference", "input_lb",
                      "input_ub", "state_lb", "state_ub"):
        if tuple_key in pl and pl[tuple_key] is not None:
            pl[tuple_key] = tuple(pl[tuple_key])
    if "speed_range" in sc and sc["speed_range"] is not None:
        sc["speed_range"] = tuple(sc["speed_range"])
    if "crossing_delay" in sc:
        sc["crossing_delay"] = tuple(sc["crossing_delay"])
    try:
        return Scenario(
            reference=FigureEight(**ref),
            planner=PlannerConfig(**pl),
            bootstrap=BootstrapParams(**bs),
            noise_half_width=noise.get("half_width", 0.125),
            **sc,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def resolved_config(scenario: Scenario) -> dict:
    return {
        "scenario": {
            "case": scenario.case,
            "seed": scenario.seed,
            "rate_hz": scenario.rate_hz,
            "obstacle_radius": scenario.obstacle_radius,
            "radius_margin": scenario.radius_margin,
            "speed_range": list(scenario.speed_range),
            "encounter_radius": scenario.encounter_radius,
            "crossing_delay": list(scenario.crossing_delay),
            "tail_duration": scenario.tail_duration,
            "max_duration": scenario.max_duration,
            "drag_rate": scenario.drag_rate,
            "planner_enabled": scenario.planner_enabled,
        },
        "reference": dataclasses.asdict(scenario.reference),
        "planner": dataclasses.asdict(scenario.planner),
        "bootstrap": dataclasses.asdict(scenario.bootstrap),
        "noise": {"half_width": scenario.noise_half_width},
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, extra: dict, artifacts):
    manifest = {
        "command": command,
        "config": config,
        **extra,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _float_csv(value: float) -> str:
    return repr(float(value))


# ------------------------------------------------------------------ forecast


def cmd_forecast(args) -> int:
    config = _load_config(args.scenario or args.from_manifest, args.set or [])
    bs = dict(config.get("bootstrap", {}))
    _check_keys("bootstrap", bs, BOOTSTRAP_KEYS)
    params = BootstrapParams(**bs)
    path = Path(args.csv)
    if not path.exists():
        print(f"error: input {args.csv} not found", file=sys.stderr)
        return USAGE_ERROR
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        try:
            ix, iy, iz = header.index("x"), header.index("y"), header.index("z")
        except ValueError:
            print("error: CSV must have x,y,z columns", file=sys.stderr)
            return USAGE_ERROR
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                rows.append((float(parts[ix]), float(parts[iy]), float(parts[iz])))
            except (ValueError, IndexError):
                print(f"error: malformed CSV row {lineno}", file=sys.stderr)
                return USAGE_ERROR
    if len(rows) < params.n_train:
        print(
            f"error: need at least n_train = {params.n_train} rows, got {len(rows)}",
            file=sys.stderr,
        )
        return USAGE_ERROR
    buffer = MeasurementBuffer(max_history=params.max_history)
    for row in rows:
        buffer.push(row)
    ens = forecast_ensemble(generate_ensemble(buffer, params), buffer, params)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fc_path = out_dir / "forecast.csv"
    with open(fc_path, "w") as f:
        f.write("member,step,x,y,z\n")
        for j in range(params.ensemble_size):
            for i in range(params.horizon):
                vals = ",".join(_float_csv(v) for v in ens.predictions[j, i])
                f.write(f"{j},{i + 1},{vals}\n")
    mean = ens.predictions.mean(axis=0)
    std = ens.predictions.std(axis=0, ddof=1)
    summary = {
        "n_members": params.ensemble_size,
        "horizon": params.horizon,
        "origin_index": ens.origin_index,
        "n_backup_members": ens.n_backup,
        "mean": mean.tolist(),
        "std": std.tolist(),
    }
    sm_path = out_dir / "forecast_summary.json"
    sm_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out_dir, "forecast",
        {"bootstrap": dataclasses.asdict(params)},
        {"input_csv": str(path), "input_sha256": _sha256(path)},
        [fc_path, sm_path],
    )
    print(f"wrote {fc_path} and {sm_path}")
    return 0


# ------------------------------------------------------------------ simulate


def _apply_cli_overrides(scenario: Scenario, args) -> Scenario:
    if getattr(args, "epsilon", None) is not None:
        eps = args.epsilon
        if not 0.0 < eps <= 1.0:
            raise UsageError(f"epsilon must lie in (0, 1], got {eps}")
        scenario = dataclasses.replace(
            scenario, planner=dataclasses.replace(scenario.planner, epsilon=eps)
        )
    if getattr(args, "seed", None) is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    if getattr(args, "dump_trajectories", False):
        scenario = dataclasses.replace(scenario, dump_trajectories=True)
    return scenario


def _write_trajectories(path: Path, dump: dict) -> None:
    with open(path, "w") as f:
        f.write(
            "time,agent_x,agent_y,agent_z,obstacle_x,obstacle_y,obstacle_z,"
            "measured_x,measured_y,measured_z,distance,feasible\n"
        )
        n = dump["time"].shape[0]
        for i in range(n):
            cells = [
                _float_csv(dump["time"][i]),
                *(_float_csv(v) for v in dump["agent"][i]),
                *(_float_csv(v) for v in dump["obstacle"][i]),
                *(_float_csv(v) for v in dump["measured"][i]),
                _float_csv(dump["distance"][i]),
                str(int(dump["feasible"][i])),
            ]
            f.write(",".join(cells) + "\n")


def episode_record(res) -> dict:
    return {
        "case": res.case,
        "epsilon": res.epsilon,
        "seed": list(res.seed_key),
        "d_min": res.d_min,
        "collided": res.collided,
        "n_infeasible": res.n_infeasible,
        "n_plans": res.n_plans,
        "n_infeasible_window": res.n_infeasible_window,
        "n_plans_window": res.n_plans_window,
        "feasible_throughout": res.feasible_throughout,
        "collided_while_feasible": res.collided_while_feasible,
        "n_backup_members": res.n_backup_members,
        "n_steps": res.n_steps,
        "failed": res.failed,
    }


def cmd_simulate(args) -> int:
    config = _load_config(args.scenario or args.from_manifest, args.set or [])
    scenario = _apply_cli_overrides(build_scenario(config), args)
    scenario = dataclasses.replace(scenario, dump_trajectories=True)
    result = run_episode(scenario, run_index=args.run_index)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr_path = out_dir / "trajectory.csv"
    _write_trajectories(tr_path, result.trajectories)
    ep_path = out_dir / "episode.json"
    ep_path.write_text(json.dumps(episode_record(result), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out_dir, "simulate", resolved_config(scenario),
        {"run_index": args.run_index}, [tr_path, ep_path],
    )
    print(
        f"episode done: d_min={result.d_min:.3f} m, collided={result.collided}, "
        f"infeasible {result.n_infeasible}/{result.n_plans}"
    )
    return 0


# ---------------------------------------------------------------- montecarlo


def cmd_montecarlo(args) -> int:
    config = _load_config(args.scenario or args.from_manifest, args.set or [])
    scenario = _apply_cli_overrides(build_scenario(config), args)
    epsilons = args.epsilons or [0.05, 0.25, 0.5, 1.0]
    for eps in epsilons:
        if not 0.0 < eps <= 1.0:
            print(f"error: epsilon must lie in (0, 1], got {eps}", file=sys.stderr)
            return USAGE_ERROR
    if args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return USAGE_ERROR

    rows, episodes = monte_carlo(scenario, args.runs, epsilons, jobs=args.jobs)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    runs_path = out_dir / "episodes.jsonl"
    with open(runs_path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_record(ep), sort_keys=True) + "\n")
    _write_manifest(
        out_dir, "montecarlo", resolved_config(scenario),
        {"runs": args.runs, "epsilons": list(epsilons), "jobs": args.jobs},
        [metrics_path, runs_path],
    )

    header = f"{'case':<18}{'eps':>6}{'%Feas':>8}{'%Succ':>8}{'mean d':>9}{'std d':>8}{'runs':>6}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(
            f"{row['case']:<18}{row['epsilon']:>6}{row['pct_feasible']:>8.1f}"
            f"{row['pct_success']:>8.1f}{row['mean_d_min']:>9.2f}{row['std_d_min']:>8.2f}"
            f"{row['n_runs']:>6}"
        )
    return 0


# -------------------------------------------------------------- solver check


def cmd_solver_selftest(args) -> int:
    import itertools

    from . import qp

    rng = np.random.default_rng(args.seed if args.seed is not None else 2024)
    n_checked = n_infeasible = 0
    failures = []

    def oracle(p):
        best, best_obj = None, np.inf
        for r in range(p.m + 1):
            for subset in itertools.combinations(range(p.m), r):
                S = list(subset)
                G = p.A[S]
                KKT = np.block([[p.P, G.T], [G, np.zeros((r, r))]])
                rhs = np.concatenate([-p.q, p.b[S]])
                try:
                    sol = np.linalg.solve(KKT, rhs)
                except np.linalg.LinAlgError:
                    continue
                z, lam = sol[: p.n], sol[p.n:]
                if np.any(lam < -1e-9) or np.any(p.A @ z > p.b + 1e-9):
                    continue
                obj = 0.5 * z @ p.P @ z + p.q @ z
                if obj < best_obj - 1e-12:
                    best, best_obj = z, obj
        return best

    for trial in range(args.trials):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 9))
        F = rng.normal(size=(n, n))
        p = qp.QpProblem(
            P=F @ F.T + n * np.eye(n),
            q=rng.normal(size=n) * 2,
            A=rng.normal(size=(m, n)),
            b=rng.normal(size=m) + 1.0,
            lb=np.full(n, -np.inf),
            ub=np.full(n, np.inf),
        )
        expect = oracle(p)
        sol = qp.solve(p)
        if expect is None:
            n_infeasible += 1
            if sol.status == "optimal":
                failures.append(f"trial {trial}: optimal on infeasible problem")
            continue
        n_checked += 1
        if sol.status != "optimal":
            failures.append(f"trial {trial}: status {sol.status}")
        elif np.abs(sol.z - expect).max() > 1e-6:
            failures.append(f"trial {trial}: deviates {np.abs(sol.z - expect).max():.2e}")

    print(f"checked {n_checked} solvable QPs against the active-set oracle "
          f"({n_infeasible} infeasible draws)")
    if failures:
        for f in failures:
            print("FAIL", f)
        return INTERNAL_ERROR
    print("solver-selftest: PASS")
    return 0


# ----------------------------------------------------------------- argparse


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskmpc",
        description="Bootstrapped spectral obstacle forecasting with risk-aware avoidance planning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--scenario", help="scenario TOML file")
        if manifest:
            p.add_argument("--from-manifest", help="rerun from a manifest.json")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (section.key=value)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override the scenario seed")

    p = sub.add_parser("forecast", help="ensemble forecast from a CSV of x,y,z samples")
    p.add_argument("csv", help="input CSV with header x,y,z")
    common(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("simulate", help="run one closed-loop episode")
    common(p)
    p.add_argument("--epsilon", type=float, help="risk tolerance override")
    p.add_argument("--run-index", type=int, default=0)
    p.add_argument("--dump-trajectories", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("montecarlo", help="batched episodes per risk level")
    common(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--epsilons", type=float, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epsilon", type=float, help=argparse.SUPPRESS)
    p.add_argument("--dump-trajectories", action="store_true")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("solver-selftest", help="QP solver vs active-set oracle")
    p.add_argument("--trials", type=int, default=60)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_solver_selftest)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
