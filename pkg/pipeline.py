"""
Pipeline commands behind main.py

Each cmd_* function owns one stage: it takes a resolved RunConfig and a
prepared run directory, does its work and leaves every artifact needed to
recompute its reports in that directory.
"""

import math
import shutil
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import VERBOSE, AblationFlags, RunConfig, derive_seed, write_resolved
from policy_ppo import (PolicyNet, collect_policy_episodes, evaluate_policy, scene_pool, train_policy)
from replay_store import ReplayStore, record_rollout
from socialnav_sim import (EpisodeRecord, MetricsReport, SocialNavEnv, compute_metrics, export_trace,
                           greedy_action, metrics_from_traces, scripted_action)
from world_model import WorldModel, evaluate_wm, train_wm

METRICS = ["SR", "SPL", "PSC", "H-Coll"]
TEAM_METRICS = ["T-SR", "T-SPL"]
WM_METRICS = ["cos_sim", "depth_rmse", "traj_ade", "traj_fde"]

POLICY_ROWS = [
    AblationFlags(lookahead=False, traj_reward=False),
    AblationFlags(lookahead=True, traj_reward=False),
    AblationFlags(lookahead=True, traj_reward=True),
]
WM_ROWS = [
    ("none", False, False),
    ("+L_d", True, False),
    ("+L_d+L_ξ", True, True),
]


class MissingPrerequisiteError(ValueError):
    pass


class RunDirectoryExistsError(ValueError):
    pass


class TraceMismatchError(ValueError):
    pass


def write_csv(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def prepare_run_dir(config: RunConfig, command: str, run_name: Optional[str] = None) -> Path:
    """Create <out_dir>/<run name> and write the resolved config, seeds and versions into it"""
    name = run_name or f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
    run_dir = Path(config.out_dir) / name
    if run_dir.exists() and any(run_dir.iterdir()):
        raise RunDirectoryExistsError(f"run directory {run_dir} already exists and is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(config, run_dir)
    return run_dir


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingPrerequisiteError(f"no {what} given (pass it on the command line or set it in paths)")
    resolved = Path(path)
    if not resolved.exists():
        raise MissingPrerequisiteError(f"{what} not found: {resolved}")
    return resolved


def _load_wm(config: RunConfig, checkpoint: Optional[str]) -> WorldModel:
    return WorldModel.from_checkpoint(_require(checkpoint or config.paths.wm_checkpoint, "world model checkpoint"),
                                      config.world_model)


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------

def collect_replay(config: RunConfig, path, seed: int, verbose: bool = VERBOSE) -> ReplayStore:
    """Scripted warm-up rollouts (greedy with random moves mixed in) written episode by episode"""
    episodes = config.episodes
    scenes = scene_pool(seed, "scenes", episodes.n_train_scenes, config.scene)
    rng = np.random.default_rng(derive_seed(seed, "collect"))
    replay = ReplayStore.create(path, config.world_model.n_humans_pred, config.world_model.horizon)

    def choose(env):
        return scripted_action(env, 0, rng, episodes.collect_random_prob)

    for episode_id in range(episodes.collect_episodes):
        scene = scenes[int(rng.integers(len(scenes)))]
        env = SocialNavEnv(scene, n_robots=1, n_humans=episodes.n_humans, max_steps=episodes.max_steps,
                           min_goal_distance=episodes.min_goal_distance,
                           max_goal_distance=episodes.max_goal_distance)
        env.reset(int(rng.integers(2 ** 63)))
        replay.append_episode(record_rollout(env, choose, episode_id, replay.n_humans, replay.horizon))
        if verbose and (episode_id + 1) % 100 == 0:
            print(f"[INFO] collected {episode_id + 1}/{episodes.collect_episodes} episodes "
                  f"({replay.count} transitions)")
    return replay


def write_stats(replay: ReplayStore, path) -> List[str]:
    lines = []
    for split in (None, "train", "heldout"):
        lines += replay.stats(split).to_lines()
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines


def cmd_collect(config: RunConfig, run_dir: Path, verbose: bool = VERBOSE) -> Path:
    print("=" * 60)
    print("Collect warm-up replay")
    print("=" * 60)
    print(f"\n1. Rolling out {config.episodes.collect_episodes} scripted episodes...")
    replay = collect_replay(config, run_dir / "replay.ntrb", config.seed, verbose)
    print(f"   [OK] {len(replay.index)} episodes, {replay.count} transitions")

    print("\n2. Writing stats...")
    write_stats(replay, run_dir / "stats.txt")
    print(f"\n[OK] Replay saved to {replay.path}")
    return replay.path


# ---------------------------------------------------------------------------
# world model
# ---------------------------------------------------------------------------

def wm_comparison(config: RunConfig, model: WorldModel, replay: ReplayStore, seed: int) -> pd.DataFrame:
    """Held-out report of the trained model next to the untrained model with the same init"""
    untrained = WorldModel(config.world_model, seed=derive_seed(seed, "world_model"))
    rows = []
    for label, candidate in (("untrained", untrained), ("trained", model)):
        rows.append({"model": label, **evaluate_wm(candidate, replay).model_dump()})
    return pd.DataFrame(rows)


def cmd_train_wm(config: RunConfig, run_dir: Path, replay_path: Optional[str] = None,
                 verbose: bool = VERBOSE) -> Path:
    replay_file = _require(replay_path or config.paths.replay, "replay file")
    print("=" * 60)
    print("Train world model")
    print("=" * 60)

    print(f"\n1. Loading replay {replay_file}...")
    replay = ReplayStore.load(replay_file)
    print(f"   [OK] {len(replay.index)} episodes, {replay.count} transitions")

    print(f"\n2. Training for {config.schedule.wm_steps} steps...")
    checkpoints = run_dir / "checkpoints"
    checkpoints.mkdir(exist_ok=True)
    model, curve, evals = train_wm(replay, config.world_model, config.seed, steps=config.schedule.wm_steps,
                                   checkpoint_dir=checkpoints, verbose=verbose)
    write_csv(curve, run_dir / "wm_curve.csv")
    write_csv(evals, run_dir / "wm_eval.csv")
    checkpoint = run_dir / "world_model.ntck"
    model.save(checkpoint)

    print("\n3. Held-out evaluation...")
    if replay.count_windows("heldout", config.world_model.context + 2):
        report = wm_comparison(config, model, replay, config.seed)
        write_csv(report, run_dir / "wm_report.csv")
        for row in report.to_dict("records"):
            print(f"   {row['model']:>10}: cos_sim={row['cos_sim']:.3f} depth_rmse={row['depth_rmse']:.4f}")
    else:
        print("   [WARNING] replay has no held-out windows, skipping the report")

    print(f"\n[OK] World model saved to {checkpoint}")
    return checkpoint


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------

def cmd_train_policy(config: RunConfig, run_dir: Path, wm_checkpoint: Optional[str] = None,
                     replay_path: Optional[str] = None, verbose: bool = VERBOSE) -> Path:
    schedule = config.schedule
    wm = _load_wm(config, wm_checkpoint) if config.ablation.needs_world_model else None
    replay = None
    if schedule.interleave_rounds > 1:
        if wm is None:
            raise MissingPrerequisiteError("interleaved schedules refine the world model; the "
                                           f"{config.ablation.label} ablation row has none")
        source = _require(replay_path or config.paths.replay, "replay file")
        shutil.copyfile(source, run_dir / "replay.ntrb")
        replay = ReplayStore.load(run_dir / "replay.ntrb")

    print("=" * 60)
    print(f"Train policy ({config.ablation.label})")
    print("=" * 60)
    checkpoints = run_dir / "checkpoints"
    checkpoints.mkdir(exist_ok=True)
    rounds = schedule.interleave_rounds
    round_config = config.model_copy(update={
        "schedule": schedule.model_copy(update={"policy_steps": math.ceil(schedule.policy_steps / rounds)})})

    net, curves, evals, result = None, [], [], None
    next_episode = max(replay.index, default=-1) + 1 if replay is not None else 0
    for r in range(rounds):
        print(f"\n{r + 1}. Policy round {r + 1}/{rounds}...")
        result = train_policy(round_config, wm, config.seed, net=net, checkpoint_dir=checkpoints, verbose=verbose)
        net = result.net
        curves.append(result.curve)
        evals.append(result.evals)
        print(f"   [OK] {result.updates} updates, SR={result.report.sr:.1f}")
        if r + 1 < rounds:
            round_seed = derive_seed(config.seed, f"round{r}")
            scenes = scene_pool(config.seed, "scenes", config.episodes.n_train_scenes, config.scene)
            next_episode = collect_policy_episodes(net, wm, scenes, config.episodes, config.ablation, replay,
                                                   schedule.interleave_collect_episodes, next_episode, round_seed)
            wm, _, _ = train_wm(replay, config.world_model, round_seed, steps=schedule.wm_steps, model=wm,
                                verbose=verbose)
            print(f"   [OK] replay now {len(replay.index)} episodes, world model refined")

    curve = pd.concat(curves, ignore_index=True) if rounds > 1 else curves[0]
    write_csv(curve, run_dir / "policy_curve.csv")
    write_csv(pd.concat(evals, ignore_index=True) if rounds > 1 else evals[0], run_dir / "policy_eval.csv")
    write_csv(result.report.to_frame(), run_dir / "metrics.csv")
    checkpoint = run_dir / "policy.ntck"
    net.save(checkpoint)
    if replay is not None:
        wm.save(run_dir / "world_model.ntck")
    print(f"\n[OK] Policy saved to {checkpoint}")
    return checkpoint


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _eval_scenes(config: RunConfig, seed: int):
    return scene_pool(seed, "eval_scenes", config.episodes.n_eval_scenes, config.eval_scene or config.scene)


def check_traces(report: MetricsReport, trace_dir: Path) -> MetricsReport:
    """Recompute the metrics from the exported traces; they must match the in-memory report"""
    recomputed = metrics_from_traces(sorted(Path(trace_dir).glob("episode_*.jsonl")))
    if recomputed.aggregate() != report.aggregate() or recomputed.n_episodes != report.n_episodes:
        raise TraceMismatchError(f"metrics from traces {recomputed.aggregate()} differ from "
                                 f"the report {report.aggregate()}")
    return recomputed


def _print_report(report: MetricsReport, team: bool):
    keys = METRICS + TEAM_METRICS if team else METRICS
    agg = report.aggregate()
    print("   " + "  ".join(f"{key}={agg[key]:.2f}" for key in keys))


def cmd_eval(config: RunConfig, run_dir: Path, checkpoint: Optional[str] = None,
             wm_checkpoint: Optional[str] = None, verbose: bool = VERBOSE) -> MetricsReport:
    net = PolicyNet.from_checkpoint(_require(checkpoint or config.paths.policy_checkpoint, "policy checkpoint"))
    wm = _load_wm(config, wm_checkpoint) if config.ablation.needs_world_model else None
    episodes = config.episodes
    print("=" * 60)
    print(f"Evaluate policy ({config.ablation.label}, {episodes.n_robots} robot(s))")
    print("=" * 60)

    print(f"\n1. Running {episodes.eval_episodes} argmax episodes...")
    trace_dir = run_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    report = evaluate_policy(net, wm, _eval_scenes(config, config.seed), episodes, episodes.eval_episodes,
                             config.seed, config.ablation, n_robots=episodes.n_robots, trace_dir=trace_dir)
    write_csv(report.to_frame(), run_dir / "metrics.csv")
    _print_report(report, episodes.n_robots > 1)

    print("\n2. Recomputing metrics from traces...")
    check_traces(report, trace_dir)
    print("   [OK] traces reproduce the report")
    return report


def run_greedy_episodes(config: RunConfig, seed: int, n_episodes: int, trace_dir=None) -> MetricsReport:
    """Geodesic-descent replanner on the same held-out episode seeds the policy is scored on"""
    episodes = config.episodes
    scenes = _eval_scenes(config, seed)
    base = derive_seed(seed, "eval_episodes")
    records: List[EpisodeRecord] = []
    for k in range(n_episodes):
        env = SocialNavEnv(scenes[k % len(scenes)], n_robots=episodes.n_robots, n_humans=episodes.n_humans,
                           max_steps=episodes.max_steps, min_goal_distance=episodes.min_goal_distance,
                           max_goal_distance=episodes.max_goal_distance)
        env.reset((base + k) % 2 ** 64)
        while not env.all_done:
            env.step([None if robot.done else greedy_action(env, i) for i, robot in enumerate(env.robots)])
        records.extend(env.episode_records(k))
        if trace_dir is not None:
            export_trace(Path(trace_dir) / f"episode_{k:05d}.jsonl", env, k)
    return compute_metrics(records)


def cmd_baseline_greedy(config: RunConfig, run_dir: Path, verbose: bool = VERBOSE) -> MetricsReport:
    print("=" * 60)
    print("Greedy geodesic baseline")
    print("=" * 60)
    print(f"\n1. Running {config.episodes.eval_episodes} episodes...")
    trace_dir = run_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    report = run_greedy_episodes(config, config.seed, config.episodes.eval_episodes, trace_dir)
    write_csv(report.to_frame(), run_dir / "metrics.csv")
    _print_report(report, config.episodes.n_robots > 1)
    check_traces(report, trace_dir)
    print("\n[OK] Baseline metrics written")
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def with_medians(rows: List[Dict], columns: List[str], metrics: List[str]) -> pd.DataFrame:
    """Per-seed rows followed by one median row per configuration, in first-seen order"""
    df = pd.DataFrame(rows, columns=columns)
    medians = []
    for label in dict.fromkeys(df["config"]):
        group = df[df["config"] == label]
        median = group.iloc[0].to_dict()
        median["seed"] = "median"
        for key in metrics:
            values = group[key].dropna()
            median[key] = float(np.median(values)) if len(values) else np.nan
        medians.append(median)
    return pd.concat([df, pd.DataFrame(medians, columns=columns)], ignore_index=True)


def seed_run_config(config: RunConfig, k: int) -> RunConfig:
    return config.model_copy(update={"seed": derive_seed(config.seed, f"seed{k}")})


def cmd_ablate(config: RunConfig, run_dir: Path, verbose: bool = VERBOSE) -> pd.DataFrame:
    """base / +LookH / +LookH+TrajR over n_seeds seeds, one shared world model per seed"""
    team = config.episodes.n_robots > 1
    metrics = METRICS + TEAM_METRICS if team else METRICS
    columns = ["config", "lookahead", "traj_reward", "seed"] + metrics
    print("=" * 60)
    print(f"Policy ablation ({config.n_seeds} seeds)")
    print("=" * 60)

    rows = []
    for k in range(config.n_seeds):
        seed_config = seed_run_config(config, k)
        seed = seed_config.seed
        seed_dir = run_dir / f"seed{k}"
        seed_dir.mkdir(exist_ok=True)
        print(f"\n{k + 1}. Seed {seed}")
        replay = collect_replay(seed_config, seed_dir / "replay.ntrb", seed, verbose=False)
        wm, curve, _ = train_wm(replay, config.world_model, seed, steps=config.schedule.wm_steps, verbose=verbose)
        write_csv(curve, seed_dir / "wm_curve.csv")
        wm.save(seed_dir / "world_model.ntck")
        print(f"   [OK] world model trained on {len(replay.index)} episodes")

        for flags in POLICY_ROWS:
            row_config = seed_config.model_copy(update={"ablation": flags})
            row_wm = wm if flags.needs_world_model else None
            result = train_policy(row_config, row_wm, seed, verbose=verbose)
            report = evaluate_policy(result.net, row_wm, _eval_scenes(config, seed), config.episodes,
                                     config.episodes.eval_episodes, seed, flags,
                                     n_robots=config.episodes.n_robots)
            slug = flags.label.replace("+", "_").strip("_") or "base"
            write_csv(result.curve, seed_dir / f"policy_curve_{slug}.csv")
            agg = report.aggregate()
            rows.append({"config": flags.label, "lookahead": flags.lookahead, "traj_reward": flags.traj_reward,
                         "seed": seed, **{key: agg[key] for key in metrics}})
            print(f"   [OK] {flags.label:>13}: SR={agg['SR']:.1f} SPL={agg['SPL']:.1f} H-Coll={agg['H-Coll']:.1f}")

    table = with_medians(rows, columns, metrics)
    write_csv(table, run_dir / "ablation.csv")
    print(f"\n[OK] Ablation table written ({len(table)} rows)")
    return table


def cmd_ablate_wm(config: RunConfig, run_dir: Path, verbose: bool = VERBOSE) -> pd.DataFrame:
    """Auxiliary-loss ablation of the world model: none / +L_d / +L_d+L_ξ"""
    columns = ["config", "use_depth_loss", "use_traj_loss", "seed"] + WM_METRICS
    print("=" * 60)
    print(f"World model ablation ({config.n_seeds} seeds)")
    print("=" * 60)

    rows = []
    for k in range(config.n_seeds):
        seed_config = seed_run_config(config, k)
        seed = seed_config.seed
        seed_dir = run_dir / f"seed{k}"
        seed_dir.mkdir(exist_ok=True)
        print(f"\n{k + 1}. Seed {seed}")
        replay = collect_replay(seed_config, seed_dir / "replay.ntrb", seed, verbose=False)
        for label, use_depth, use_traj in WM_ROWS:
            wm_config = config.world_model.model_copy(update={"use_depth_loss": use_depth,
                                                              "use_traj_loss": use_traj})
            model, _, _ = train_wm(replay, wm_config, seed, steps=config.schedule.wm_steps, verbose=verbose)
            report = evaluate_wm(model, replay)
            row = {"config": label, "use_depth_loss": use_depth, "use_traj_loss": use_traj, "seed": seed,
                   "cos_sim": report.cos_sim, "depth_rmse": report.depth_rmse,
                   "traj_ade": report.traj_ade if use_traj else None,
                   "traj_fde": report.traj_fde if use_traj else None}
            rows.append(row)
            print(f"   [OK] {label:>9}: cos_sim={report.cos_sim:.3f} depth_rmse={report.depth_rmse:.4f}")

    table = with_medians(rows, columns, WM_METRICS)
    write_csv(table, run_dir / "wm_ablation.csv")
    print(f"\n[OK] World model ablation table written ({len(table)} rows)")
    return table


def cmd_stats(replay_path: Optional[str], config: Optional[RunConfig] = None) -> List[str]:
    from verify_replay import verify_replay

    source = replay_path or (config.paths.replay if config is not None else None)
    return verify_replay(_require(source, "replay file"))


__all__ = [
    "MissingPrerequisiteError", "RunDirectoryExistsError", "TraceMismatchError",
    "prepare_run_dir", "collect_replay", "cmd_collect", "cmd_train_wm", "cmd_train_policy", "cmd_eval",
    "cmd_baseline_greedy", "cmd_ablate", "cmd_ablate_wm", "cmd_stats", "run_greedy_episodes", "write_csv",
]
