"""End-to-end acceptance checks, one per criterion.

Each check prints a single ``[PASS]``/``[FAIL]`` line before asserting. Run
directly (``python3 tests/test_acceptance.py``) for the report alone.

The imitation runs share one frozen protocol: ten scripted-expert point-mass
demonstrations generated at seed 0, subsampled per seed, trained through the
``dicekit train`` harness for 10,000 gradient steps at batch 128 with two
64-unit hidden layers, evaluated every 2,500 steps over 20 episodes. The final
return of a seed is its last evaluation.
"""

from __future__ import annotations

import atexit
import json
import shutil
import sys
import time
from functools import lru_cache
from pathlib import Path
import tempfile

import numpy as np
import pytest

from dicekit import analysis, cli
from dicekit import diffcore as dc
from dicekit.envs import PointMass2D, PointMassExpert, generate_demos, normalized_score, select_trajectories
from dicekit.nets import CriticF
from dicekit.replay import DemoBuffer
from dicekit.softdice import SoftDiceConfig, train

sys.path.insert(0, str(Path(__file__).parent))
from graphs import penalty_numpy, random_graph  # noqa: E402

SEEDS = [0, 1, 2]
PROTOCOL = {"hidden": [64, 64], "batch_size": 128, "iterations": 10_000, "eval_interval": 2_500, "eval_episodes": 20}
SOFTDICE = {**PROTOCOL, "lr_policy": 1e-3}
BC = {**PROTOCOL, "lr_policy": 1e-3}
BETAS = [0, 0.01, 0.1]
THRESHOLD = 0.8


REPORT: list[str] = []


def report(n: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}"
    REPORT.append(line)
    print(line, flush=True)


# --- shared runs ----------------------------------------------------------------------


@lru_cache(maxsize=None)
def workdir() -> Path:
    path = Path(tempfile.mkdtemp(prefix="dicekit-acceptance-"))
    atexit.register(shutil.rmtree, path, ignore_errors=True)
    return path


@lru_cache(maxsize=None)
def demo_file() -> Path:
    path = workdir() / "demos.jsonl"
    code = cli.main(["gen-demos", "--env", "point_mass", "--n-traj", "10", "--seed", "0", "--out", str(path)])
    assert code == 0
    return path


def _train(name: str, algorithm: str, params: dict, n_traj: int, sweep: str | None = None) -> Path:
    out = workdir() / name
    config = {
        "algorithm": algorithm,
        "env": "point_mass",
        "demos": str(demo_file()),
        "n_traj": n_traj,
        "seeds": SEEDS,
        "out": str(out),
        algorithm: params,
    }
    path = workdir() / f"{name}.json"
    path.write_text(json.dumps(config))
    argv = ["train", "--config", str(path)] + (["--sweep", sweep] if sweep else [])
    assert cli.main(argv) == 0, f"{name} run failed"
    return out


def _load(path: Path) -> dict:
    return json.loads((path / "summary.json").read_text())


@lru_cache(maxsize=None)
def beta_sweep() -> dict:
    """SoftDICE on one trajectory for each beta; beta=0.01 is the default run."""
    out = _train("beta_sweep", "softdice", SOFTDICE, 1, sweep="beta=" + ",".join(map(str, BETAS)))
    return {str(b): _load(out / f"beta={b}") for b in BETAS}


@lru_cache(maxsize=None)
def run(algorithm: str, n_traj: int) -> dict:
    if algorithm == "softdice" and n_traj == 1:
        return beta_sweep()["0.01"]
    params = SOFTDICE if algorithm == "softdice" else BC
    return _load(_train(f"{algorithm}_{n_traj}", algorithm, params, n_traj))


def scores(summary: dict) -> list[float]:
    return [normalized_score(summary["seeds"][str(s)]["final_return"]) for s in SEEDS]


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# --- criteria ---------------------------------------------------------------------------


def criterion_1() -> tuple[bool, str]:
    start = time.perf_counter()
    rows = analysis.run_verification()
    elapsed = time.perf_counter() - start
    failed = [r.name for r in rows if not r.passed]
    ok = not failed and elapsed < 30.0
    return ok, f"verification suite {len(rows) - len(failed)}/{len(rows)} rows pass in {elapsed:.1f}s (< 30s)" + (f"; failed: {failed}" if failed else "")


def criterion_2() -> tuple[bool, str]:
    first = analysis.minibatch_bias(1.0, 1)
    target = np.e / (1 + np.e) - 0.5
    biases = [analysis.minibatch_bias(1.0, m).bias for m in (1, 2, 4, 8)]
    decreasing = all(a > b for a, b in zip(biases, biases[1:]))
    ok = abs(first.bias - target) < 1e-9 and decreasing
    return ok, f"bias(m=1)={first.bias:.10f} vs e/(1+e)-0.5={target:.10f}; m=1,2,4,8 -> {_fmt(biases)} strictly decreasing={decreasing}"


def criterion_3() -> tuple[bool, str]:
    start = time.perf_counter()
    worst = max(dc.gradcheck(*random_graph(np.random.default_rng(seed))) for seed in range(100))

    rng = np.random.default_rng(2024)
    gp_worst = 0.0
    for _ in range(5):
        critic = CriticF(3, 2, hidden=(8, 8), rng=rng)
        x = rng.normal(size=(6, 5))
        g = dc.input_gradient(critic.apply_joint, x)
        penalty = dc.mean(dc.square(dc.l2norm(g, axis=1) - 1.0))
        params = critic.parameters()
        pairs = list(zip(critic.net.weights, critic.net.biases))
        analytic = dc.gradient(penalty, params)
        numeric = dc.numerical_gradient(lambda: penalty_numpy([(w.value, b.value) for w, b in pairs], x), [p.value for p in params])
        gp_worst = max(gp_worst, max(dc.relative_error(a, n) for a, n in zip(analytic, numeric)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and gp_worst < 1e-3 and elapsed < 60.0
    return ok, f"max rel err {worst:.2e} over 100 graphs (< 1e-4); double-backward penalty {gp_worst:.2e} (< 1e-3); {elapsed:.1f}s (< 60s)"


def criterion_4() -> tuple[bool, str]:
    sd, bc = run("softdice", 1), run("bc", 1)
    sd_scores = scores(sd)
    reached = sum(s >= THRESHOLD for s in sd_scores)
    ok = reached >= 2 and bc["mean"] < sd["mean"]
    return ok, (
        f"1 trajectory: SoftDICE normalized {_fmt(sd_scores)} ({reached}/3 seeds >= {THRESHOLD}); "
        f"mean return SoftDICE {sd['mean']:.3f} vs BC {bc['mean']:.3f} (BC {_fmt(scores(bc))}), BC strictly lower={bc['mean'] < sd['mean']}"
    )


def criterion_5() -> tuple[bool, str]:
    bc1, bc10 = run("bc", 1), run("bc", 10)
    sd1, sd10 = run("softdice", 1), run("softdice", 10)
    sd_means = [float(np.mean(scores(sd1))), float(np.mean(scores(sd10)))]
    ok = bc10["mean"] > bc1["mean"] and min(sd_means) >= THRESHOLD
    return ok, (
        f"BC mean return 1 traj {bc1['mean']:.3f} -> 10 traj {bc10['mean']:.3f}; "
        f"SoftDICE mean normalized 1 traj {sd_means[0]:.3f}, 10 traj {sd_means[1]:.3f} (>= {THRESHOLD})"
    )


def criterion_6() -> tuple[bool, str]:
    sweep = beta_sweep()
    entropies = [sweep[str(b)]["entropy_mean"] for b in BETAS]
    monotone = all(a <= b for a, b in zip(entropies, entropies[1:]))
    summaries = (workdir() / "beta_sweep" / "sweep.json").is_file() and all((workdir() / "beta_sweep" / f"beta={b}" / "summary.json").is_file() for b in BETAS)
    return monotone and summaries, f"final entropy over beta {BETAS}: {_fmt(entropies)} non-decreasing={monotone}; one summary per beta={summaries}"


def criterion_7() -> tuple[bool, str]:
    trajs = generate_demos(PointMass2D(), PointMassExpert(), 10, seed=0)
    demo = DemoBuffer(select_trajectories(trajs, 1, seed=0))
    env = PointMass2D()
    cfg = SoftDiceConfig(hidden=(64, 64), batch_size=128, iterations=300, eval_interval=0, lr_policy=1e-3)
    train(cfg, demo, env)
    return env.step_count == 0, f"environment steps during 300 offline SoftDICE iterations: {env.step_count}"


def criterion_8() -> tuple[bool, str]:
    details = []
    ok = True
    for algorithm in ("softdice", "valuedice", "bc"):
        params = {"hidden": [16, 16], "batch_size": 32, "iterations": 40, "eval_interval": 20, "eval_episodes": 2}
        blobs = []
        for rep in ("a", "b"):
            out = _train(f"determinism_{algorithm}_{rep}", algorithm, params, 2)
            blobs.append([(out / f"seed_{s}" / "metrics.csv").read_bytes() for s in SEEDS])
        same = blobs[0] == blobs[1]
        ok &= same
        details.append(f"{algorithm}={'identical' if same else 'DIFFERENT'}")
    return ok, "metrics.csv across two runs per seed: " + ", ".join(details)


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 9)}


@pytest.mark.parametrize("n", [1, 2, 3, 7, 8])
def test_fast_criteria(n):
    ok, detail = CRITERIA[n]()
    report(n, ok, detail)
    assert ok, detail


@pytest.mark.slow
@pytest.mark.parametrize("n", [4, 5, 6])
def test_imitation_criteria(n):
    ok, detail = CRITERIA[n]()
    report(n, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = []
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        report(n, ok, detail)
        results.append(ok)
    sys.exit(0 if all(results) else 1)
