"""Command line entry point: ``dicekit {gen-demos,train,eval,verify}``.

Exit codes: 0 success, 1 training or verification failure, 2 usage error.

Experiment config (JSON; every key may be overridden by a flag)::

    {
      "algorithm": "softdice" | "valuedice" | "bc",
      "env": "point_mass",
      "demos": "demos.jsonl",
      "n_traj": 1,              # trajectories subsampled per seed
      "seeds": [0, 1, 2],
      "out": "runs/softdice",
      "softdice": {...}         # block named after the algorithm; fields of its config class
    }
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .baselines import BCConfig, ValueDiceConfig, bc_train, valuedice_train
from .envs import (
    DEFAULT_DEMO_NOISE,
    ENVS,
    EXPERTS,
    evaluate_policy,
    generate_demos,
    load_demos,
    make_env,
    save_demos,
    select_trajectories,
)
from .nets import CheckpointError, load_checkpoint, policy_from_checkpoint, save_checkpoint
from .replay import DemoBuffer
from .softdice import SoftDiceConfig, TrainingDivergedError, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

ALGORITHMS = {
    "softdice": (SoftDiceConfig, train),
    "valuedice": (ValueDiceConfig, valuedice_train),
    "bc": (BCConfig, bc_train),
}


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "softdice"
    env: str = "point_mass"
    demos: str | None = None
    n_traj: int | None = None  # None keeps every trajectory in the file
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm '{self.algorithm}'; choose from {sorted(ALGORITHMS)}")
        if self.env not in ENVS:
            raise UsageError(f"unknown env '{self.env}'; choose from {sorted(ENVS)}")
        if self.demos is None or not Path(self.demos).is_file():
            raise UsageError(f"demo file not found: {self.demos}")
        if self.n_traj is not None and self.n_traj < 1:
            raise UsageError("n_traj must be >= 1")
        if not self.seeds:
            raise UsageError("at least one seed is required")

    def algo_config(self, seed: int):
        cls = ALGORITHMS[self.algorithm][0]
        try:
            return cls.from_dict({**self.params, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid {self.algorithm} block: {exc}") from exc

    def resolved(self) -> dict:
        block = self.algo_config(self.seeds[0]).to_dict()
        block.pop("seed")
        return {
            "algorithm": self.algorithm,
            "env": self.env,
            "demos": str(self.demos),
            "n_traj": self.n_traj,
            "seeds": list(self.seeds),
            "out": str(self.out),
            self.algorithm: block,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        algorithm = raw.pop("algorithm", "softdice")
        blocks = {k: raw.pop(k) for k in list(raw) if k in ALGORITHMS}
        stray = sorted(set(blocks) - {algorithm})
        if stray:
            raise UsageError(f"config has blocks {stray} that do not match algorithm '{algorithm}'")
        known = {"env", "demos", "n_traj", "seeds", "out"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        return cls(algorithm=algorithm, params=dict(blocks.get(algorithm, {})), **raw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise UsageError(f"expected KEY=VALUE, got '{text}'")
    return key.strip(), value


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got '{text}'") from None


def build_experiment(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    exp = ExperimentConfig.from_dict(raw)
    if args.algorithm and args.algorithm != exp.algorithm:
        if exp.params and raw.get("algorithm"):
            raise UsageError(f"--algorithm {args.algorithm} does not match the config's {exp.algorithm} block")
        exp.algorithm = args.algorithm
    for name in ("env", "demos", "n_traj", "out"):
        if getattr(args, name) is not None:
            setattr(exp, name, getattr(args, name))
    if args.seeds is not None:
        exp.seeds = _parse_seeds(args.seeds)
    for item in args.set or []:
        key, value = _parse_assignment(item)
        exp.params[key] = _parse_value(value)
    exp.validate()
    exp.algo_config(exp.seeds[0])
    return exp


# ---------------------------------------------------------------------------
# train


def final_entropy(policy, states: np.ndarray, seed: int) -> float:
    """Policy entropy averaged over the demonstration states, fixed sampling seed."""
    return policy.entropy(states, n_samples=16, rng=np.random.default_rng([seed, 7]))


def run_seed(exp: ExperimentConfig, seed: int, out_dir: Path) -> dict:
    """Trains one seed into ``out_dir``; never raises on divergence."""
    out_dir.mkdir(parents=True, exist_ok=True)
    config = exp.algo_config(seed)
    trajs = load_demos(exp.demos)
    if exp.n_traj is not None:
        trajs = select_trajectories(trajs, exp.n_traj, seed)
    demo = DemoBuffer(trajs)
    env = make_env(exp.env)
    resolved = exp.resolved()
    resolved[exp.algorithm] = config.to_dict()
    resolved["seeds"] = [seed]
    (out_dir / "resolved-config.json").write_text(json.dumps(resolved, indent=2) + "\n")

    record = {"n_trajectories": demo.n_trajectories, "n_transitions": len(demo)}
    trainer = ALGORITHMS[exp.algorithm][1]
    try:
        policy, metrics = trainer(config, demo, env)
    except TrainingDivergedError as exc:
        exc.metrics.write_csv(out_dir / "metrics.csv")
        record.update(final_return=None, final_entropy=None, diverged=str(exc))
        return record
    metrics.write_csv(out_dir / "metrics.csv")
    save_checkpoint(out_dir / "policy.json", policy.named_parameters())
    evals = metrics.evaluations()
    record["final_return"] = evals[-1]["eval_return_mean"] if evals else None
    record["final_return_std"] = evals[-1]["eval_return_std"] if evals else None
    record["final_entropy"] = final_entropy(policy, demo.s, seed)
    return record


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_experiment(exp: ExperimentConfig, workers: int = 1) -> dict:
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(json.dumps(exp.resolved(), indent=2) + "\n")
    dirs = [out / f"seed_{s}" for s in exp.seeds]
    if workers > 1 and len(exp.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_seed, [exp] * len(dirs), exp.seeds, dirs))
    else:
        records = [run_seed(exp, s, d) for s, d in zip(exp.seeds, dirs)]

    per_seed = {str(s): r for s, r in zip(exp.seeds, records)}
    finals = [r["final_return"] for r in records if r["final_return"] is not None]
    entropies = [r["final_entropy"] for r in records if r["final_entropy"] is not None]
    mean, std = _mean_std(finals)
    summary = {
        "algorithm": exp.algorithm,
        "env": exp.env,
        "seeds": per_seed,
        "mean": mean,
        "std": std,
        "entropy_mean": _mean_std(entropies)[0],
        "diverged": sorted(s for s, r in per_seed.items() if "diverged" in r),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_train(args) -> int:
    exp = build_experiment(args)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.sweep:
        key, values = _parse_assignment(args.sweep)
        grid = [_parse_value(v) for v in values.split(",") if v.strip()]
        if not grid:
            raise UsageError("--sweep needs at least one value")
        base = Path(exp.out)
        runs = {}
        for value in grid:
            sub = ExperimentConfig(**{**exp.__dict__, "params": {**exp.params, key: value}, "out": str(base / f"{key}={value}")})
            sub.algo_config(sub.seeds[0])
            runs[str(value)] = sub
        summaries = {}
        for value, sub in runs.items():
            summaries[value] = run_experiment(sub, args.workers)
            _report(summaries[value], f"{key}={value}")
        base.mkdir(parents=True, exist_ok=True)
        sweep = {"key": key, "values": list(runs), "runs": {v: str(Path(s.out) / "summary.json") for v, s in runs.items()}}
        (base / "sweep.json").write_text(json.dumps(sweep, indent=2) + "\n")
        failed = any(s["diverged"] for s in summaries.values())
    else:
        summary = run_experiment(exp, args.workers)
        _report(summary, exp.algorithm)
        failed = bool(summary["diverged"])
    return EXIT_FAILURE if failed else EXIT_OK


def _report(summary: dict, label: str) -> None:
    for seed, rec in summary["seeds"].items():
        if "diverged" in rec:
            print(f"error: {label} seed {seed} diverged: {rec['diverged']}", file=sys.stderr)
    mean, std = summary["mean"], summary["std"]
    text = "n/a" if mean is None else f"{mean:.3f} +/- {std:.3f}"
    print(f"{label}: final return {text} over {len(summary['seeds'])} seed(s)")


# ---------------------------------------------------------------------------
# gen-demos / eval / verify


def cmd_gen_demos(args) -> int:
    env = make_env(args.env)
    noise = DEFAULT_DEMO_NOISE[args.env] if args.noise is None else args.noise
    trajs = generate_demos(env, EXPERTS[args.env](), args.n_traj, noise, args.seed)
    save_demos(args.out, trajs)
    mean_return = float(np.mean([t.ret for t in trajs]))
    print(json.dumps({"trajectories": len(trajs), "transitions": sum(len(t) for t in trajs), "mean_return": mean_return}))
    return EXIT_OK


def save_expert_checkpoint(path, env_name: str, **params) -> None:
    """Checkpoint that wraps the scripted expert instead of network weights."""
    Path(path).write_text(json.dumps({"expert": env_name, "params": params}))


def load_policy(path, env_name: str):
    raw = json.loads(Path(path).read_text())
    if "expert" in raw:
        if raw["expert"] != env_name:
            raise CheckpointError(f"checkpoint wraps the {raw['expert']} expert but env is {env_name}")
        return EXPERTS[env_name](**raw.get("params", {}))
    policy = policy_from_checkpoint(load_checkpoint(path))
    env = make_env(env_name)
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise CheckpointError(
            f"checkpoint policy maps {policy.state_dim}-dim states to {policy.action_dim}-dim actions, "
            f"but {env_name} has state dim {env.state_dim} and action dim {env.action_dim}"
        )
    return policy


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    policy = load_policy(args.checkpoint, args.env)
    res = evaluate_policy(make_env(args.env), policy, args.episodes, args.seed, deterministic=not args.stochastic)
    print(json.dumps({"mean": res.mean, "std": res.std, "stderr": res.stderr, "episodes": args.episodes}))
    return EXIT_OK


def cmd_verify(args) -> int:
    only = [n for n in args.only.split(",") if n] if args.only else None
    try:
        rows = analysis.run_verification(only, fault=args.inject_fault)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    print(analysis.format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicekit", description="Offline imitation by occupancy matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="roll out the scripted expert and write demonstrations")
    g.add_argument("--env", required=True, choices=sorted(ENVS))
    g.add_argument("--n-traj", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=None, help="Gaussian action noise (default: per-env)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train one config over several seeds")
    t.add_argument("--config", help="experiment JSON file")
    t.add_argument("--algorithm", choices=sorted(ALGORITHMS))
    t.add_argument("--env")
    t.add_argument("--demos")
    t.add_argument("--n-traj", dest="n_traj", type=_positive_int)
    t.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an algorithm field (JSON value)")
    t.add_argument("--sweep", metavar="KEY=V1,V2,...", help="one full run per value, e.g. beta=0,0.01,0.1")
    t.add_argument("--workers", type=int, default=1, help="parallel seeds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, choices=sorted(ENVS))
    e.add_argument("--episodes", type=_positive_int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the exact analysis checks")
    v.add_argument("--only", help=f"comma-separated subset of: {', '.join(analysis.CHECKS)}")
    v.add_argument("--inject-fault", choices=["gamma"], help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
