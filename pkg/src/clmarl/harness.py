"""Two-timescale training orchestration.

The fast timescale collects episodes at the current training difficulty and
applies gradient updates from a whole-episode replay buffer; the slow
timescale evaluates greedily every ``eval_interval`` environment steps and
lets the difficulty scheduler move at most one level per cycle. Evaluation
always happens at the active training difficulty (the scheduler's input)
and at the fixed target difficulty (the reported learning curve); the two
coincide when the scheduler is disabled or has reached the target.

Every random draw comes from named child streams of one master seed, so a
(config, seed) pair reproduces its metrics CSV byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import flexdiff
from .cgrpa import (
    Episode,
    EpisodeBatch,
    LearnerConfig,
    LossReport,
    Networks,
    NonFiniteLossError,
    encode_agent_inputs,
    learner_step,
)
from .config import FullConfig, RunConfig, apply_overrides, config_hash, serialize
from .env import BattleConfig, MicroBattleEnv
from .flexdiff import CycleTrace, EvalSample
from .nn import OptimizerState

METRICS_COLUMNS = (
    "env_step", "train_difficulty",
    "active_win_rate", "active_mean_return",
    "eval_win_rate", "eval_mean_return",
    "mu_w", "sigma_w", "mu_r", "sigma_r", "beta_w", "conv_r", "momentum",
    "tau_h", "tau_l", "stable", "branch",
    "td_loss", "kl_loss", "policy_loss", "grad_norm", "mean_advantage",
    "epsilon",
)

LOSS_COLUMNS = ("step", "td_loss", "kl_loss", "policy_loss", "grad_norm",
                "mean_advantage")

SWEEP_COLUMNS = ("grid_point", "seed", "status", "top_k_win_rate",
                 "final_eval_win_rate", "run_dir", "error")


class ReplayBuffer:
    """Ring buffer of complete episodes with uniform no-replacement sampling."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: list[Episode] = []
        self._cursor = 0

    def add(self, episode: Episode) -> None:
        if len(self._episodes) < self.capacity:
            self._episodes.append(episode)
        else:
            self._episodes[self._cursor] = episode
            self._cursor = (self._cursor + 1) % self.capacity

    def __len__(self) -> int:
        return len(self._episodes)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Episode]:
        if batch_size > len(self._episodes):
            raise ValueError(
                f"cannot sample {batch_size} episodes from {len(self._episodes)}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[int(i)] for i in idx]


def epsilon(step: int, cfg: RunConfig) -> float:
    """Linear exploration schedule, constant after the anneal window."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= cfg.epsilon_anneal_steps:
        return cfg.epsilon_end
    frac = step / cfg.epsilon_anneal_steps
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def normalized_win_rate(history, top_k: int) -> float:
    """Mean of the top_k largest win rates; plain mean on short histories."""
    values = list(history)
    if not values:
        raise ValueError("empty win-rate history")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    values.sort(reverse=True)
    kept = values[:top_k]
    return float(sum(kept) / len(kept))


def greedy_actions(nets: Networks, obs: np.ndarray, avail: np.ndarray,
                   hidden: np.ndarray):
    """One greedy decentralized step; returns (actions, new_hidden)."""
    inputs = encode_agent_inputs(obs)
    q, new_hidden = nets.agent_net.step(nets.agent, inputs, hidden)
    masked = np.where(avail > 0, q, -np.inf)
    return masked.argmax(axis=-1), new_hidden


def run_episode(env: MicroBattleEnv, nets: Networks, eps_fn, global_step: int,
                seed: int, explore_rng: np.random.Generator):
    """Collect one epsilon-greedy episode.

    eps_fn maps a global env-step index to an exploration rate; actions are
    sampled uniformly over available actions with that probability and
    greedily otherwise. Returns (episode, won, episode_return).
    """
    result = env.reset(seed)
    n = env.n_agents
    hidden = np.zeros((n, nets.agent_net.hidden))
    obs_list = [result.obs]
    state_list = [result.state]
    avail_list = [result.avail]
    actions_list = []
    rewards = []
    terminated = []
    episode_return = 0.0
    t = 0
    while not result.terminated:
        eps = eps_fn(global_step + t)
        inputs = encode_agent_inputs(result.obs)
        q, hidden = nets.agent_net.step(nets.agent, inputs, hidden)
        masked = np.where(result.avail > 0, q, -np.inf)
        actions = masked.argmax(axis=-1)
        explore = explore_rng.random(n) < eps
        for i in range(n):
            if explore[i]:
                options = np.flatnonzero(result.avail[i])
                actions[i] = int(options[explore_rng.integers(options.size)])
        result = env.step(actions)
        obs_list.append(result.obs)
        state_list.append(result.state)
        avail_list.append(result.avail)
        actions_list.append(actions)
        rewards.append(result.reward)
        terminated.append(result.terminated)
        episode_return += result.reward
        t += 1
    episode = Episode(
        obs=np.stack(obs_list), state=np.stack(state_list),
        avail=np.stack(avail_list), actions=np.stack(actions_list),
        rewards=np.array(rewards), terminated=np.array(terminated, dtype=bool),
        won=result.won,
    )
    return episode, result.won, episode_return


def evaluate(nets: Networks, env_cfg: BattleConfig, difficulty: int,
             seeds) -> EvalSample:
    """K greedy rollouts; win_rate = wins / K, mean_return normalized by the
    declared maximum return."""
    env = MicroBattleEnv(env_cfg)
    env.set_difficulty(difficulty)
    wins = 0
    returns = []
    for seed in seeds:
        result = env.reset(int(seed))
        hidden = np.zeros((env.n_agents, nets.agent_net.hidden))
        total = 0.0
        while not result.terminated:
            actions, hidden = greedy_actions(nets, result.obs, result.avail, hidden)
            result = env.step(actions)
            total += result.reward
        wins += int(result.won)
        returns.append(total)
    mean_return = float(np.mean(returns)) / env_cfg.max_return
    return EvalSample(win_rate=wins / len(list(seeds)),
                      mean_return=max(0.0, mean_return))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def cgrpa_disabled(learner_cfg: LearnerConfig) -> LearnerConfig:
    """The ablation switch: plain monotonic value factorization."""
    return dataclasses.replace(learner_cfg, lam=0.0, beta=0.0, policy_term=False)


@dataclass
class RunResult:
    run_dir: str
    env_steps: int
    cycles: int
    eval_win_rates: list[float]
    top_k_win_rate: float
    final_eval_win_rate: float
    aborted: bool = False
    abort_reason: str = ""


def train(cfg: FullConfig, seed: int, out_dir: str) -> RunResult:
    """One full training run; writes metrics, losses, checkpoints, figures.

    The run directory is addressed by (config hash, seed) and contains the
    exact resolved config, so any run can be reproduced from its artifacts.
    """
    cfg.validate()
    run = cfg.run
    run_dir = os.path.join(out_dir, f"run_{config_hash(cfg)}_{seed}")
    os.makedirs(run_dir, exist_ok=True)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    with open(os.path.join(run_dir, "resolved.cfg"), "w") as fh:
        fh.write(serialize(cfg))

    seed_root = np.random.SeedSequence(seed)
    init_seq, train_env_seq, explore_seq, buffer_seq, eval_seq = \
        seed_root.spawn(5)
    init_rng = np.random.default_rng(init_seq)
    explore_rng = np.random.default_rng(explore_seq)
    buffer_rng = np.random.default_rng(buffer_seq)
    train_seed_rng = np.random.default_rng(train_env_seq)
    eval_seed_rng = np.random.default_rng(eval_seq)

    learner_cfg = cfg.learner
    if not run.cgrpa_enabled:
        learner_cfg = cgrpa_disabled(learner_cfg)

    env = MicroBattleEnv(cfg.env)
    nets = Networks.create(env.obs_size(), env.state_size(), env.n_agents,
                           env.n_actions, learner_cfg, init_rng)
    opt = OptimizerState.for_params(nets.merged_online(),
                                    lr=learner_cfg.learning_rate)
    buffer = ReplayBuffer(learner_cfg.buffer_capacity)
    sched_state = flexdiff.initial_state(cfg.flexdiff)

    metrics_path = os.path.join(run_dir, "metrics.csv")
    losses_path = os.path.join(run_dir, "losses.csv")
    metrics_fh = open(metrics_path, "w", newline="")
    losses_fh = open(losses_path, "w", newline="")
    metrics_csv = csv.writer(metrics_fh)
    losses_csv = csv.writer(losses_fh)
    metrics_csv.writerow(METRICS_COLUMNS)
    losses_csv.writerow(LOSS_COLUMNS)

    env_steps = 0
    episodes_seen = 0
    grad_steps = 0
    next_eval = run.eval_interval
    cycle_reports: list[LossReport] = []
    eval_win_rates: list[float] = []
    aborted = False
    abort_reason = ""
    cycles = 0

    def current_difficulty() -> int:
        return sched_state.difficulty if run.scheduler_enabled else run.target_difficulty

    def checkpoint(tag: str) -> None:
        cp_dir = os.path.join(run_dir, "checkpoints", tag)
        os.makedirs(cp_dir, exist_ok=True)
        nets.save(os.path.join(cp_dir, "params.bin"),
                  os.path.join(cp_dir, "params.manifest"))
        with open(os.path.join(cp_dir, "scheduler.txt"), "w") as fh:
            fh.write(flexdiff.save_snapshot(sched_state))

    eps_fn = lambda step: epsilon(min(step, run.total_env_steps), run)

    try:
        while env_steps < run.total_env_steps:
            env.set_difficulty(current_difficulty())
            ep_seed = int(train_seed_rng.integers(2**63 - 1))
            episode, won, _ret = run_episode(env, nets, eps_fn, env_steps,
                                             ep_seed, explore_rng)
            buffer.add(episode)
            env_steps += episode.length
            episodes_seen += 1

            if (episodes_seen % run.train_every == 0
                    and len(buffer) >= learner_cfg.batch_size):
                for _ in range(run.k_grad):
                    batch = EpisodeBatch.from_episodes(
                        buffer.sample(learner_cfg.batch_size, buffer_rng))
                    report = learner_step(batch, nets, opt, learner_cfg)
                    grad_steps += 1
                    cycle_reports.append(report)
                    losses_csv.writerow([
                        grad_steps, _fmt(report.td_loss), _fmt(report.kl_loss),
                        _fmt(report.policy_loss), _fmt(report.grad_norm),
                        _fmt(report.mean_advantage)])
                    if grad_steps % learner_cfg.target_update_interval == 0:
                        nets.sync_targets()

            if env_steps >= next_eval:
                cycles += 1
                active_d = current_difficulty()
                active_seeds = eval_seed_rng.integers(
                    2**63 - 1, size=run.eval_rollouts)
                active_sample = evaluate(nets, cfg.env, active_d, active_seeds)
                if active_d == run.target_difficulty:
                    target_sample = active_sample
                else:
                    target_seeds = eval_seed_rng.integers(
                        2**63 - 1, size=run.eval_rollouts)
                    target_sample = evaluate(nets, cfg.env,
                                             run.target_difficulty, target_seeds)
                eval_win_rates.append(target_sample.win_rate)

                if run.scheduler_enabled:
                    sched_state, trace = flexdiff.schedule_step_traced(
                        sched_state, active_sample, cfg.flexdiff)
                else:
                    trace = None
                _write_metrics_row(metrics_csv, env_steps, active_d,
                                   active_sample, target_sample, trace,
                                   cycle_reports, eps_fn(env_steps))
                cycle_reports = []
                if cycles % run.checkpoint_interval_cycles == 0:
                    checkpoint(f"cycle_{cycles:05d}")
                next_eval += run.eval_interval
    except NonFiniteLossError as exc:
        aborted = True
        abort_reason = str(exc)
        with open(os.path.join(run_dir, "abort.txt"), "w") as fh:
            fh.write(f"env_steps={env_steps} grad_steps={grad_steps}\n{exc}\n")
    finally:
        checkpoint("final")
        metrics_fh.close()
        losses_fh.close()

    top_k = normalized_win_rate(eval_win_rates, run.top_k) if eval_win_rates else 0.0
    result = RunResult(
        run_dir=run_dir, env_steps=env_steps, cycles=cycles,
        eval_win_rates=eval_win_rates, top_k_win_rate=top_k,
        final_eval_win_rate=eval_win_rates[-1] if eval_win_rates else 0.0,
        aborted=aborted, abort_reason=abort_reason,
    )
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump({
            "config_hash": config_hash(cfg), "seed": seed,
            "env_steps": result.env_steps, "cycles": result.cycles,
            "top_k_win_rate": result.top_k_win_rate,
            "final_eval_win_rate": result.final_eval_win_rate,
            "aborted": aborted, "abort_reason": abort_reason,
        }, fh, indent=2)
    if run.write_figures and not aborted:
        from . import report
        report.metrics_figure(metrics_path,
                              os.path.join(run_dir, "metrics.png"))
    if aborted:
        raise NonFiniteLossError(abort_reason)
    return result


def _write_metrics_row(writer, env_step: int, train_difficulty: int,
                       active: EvalSample, target: EvalSample,
                       trace: CycleTrace | None,
                       reports: list[LossReport], eps: float) -> None:
    if reports:
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
        loss_cols = [_fmt(mean("td_loss")), _fmt(mean("kl_loss")),
                     _fmt(mean("policy_loss")), _fmt(mean("grad_norm")),
                     _fmt(mean("mean_advantage"))]
    else:
        loss_cols = ["", "", "", "", ""]
    if trace is None:
        sched_cols = ["", "", "", "", "", "", "", "", "", "", "off"]
    else:
        sched_cols = [_fmt(trace.mu_w), _fmt(trace.sigma_w), _fmt(trace.mu_r),
                      _fmt(trace.sigma_r), _fmt(trace.beta_w), _fmt(trace.conv_r),
                      _fmt(trace.momentum), _fmt(trace.tau_h), _fmt(trace.tau_l),
                      "" if trace.stable is None else str(trace.stable),
                      trace.branch]
    writer.writerow([
        env_step, train_difficulty,
        _fmt(active.win_rate), _fmt(active.mean_return),
        _fmt(target.win_rate), _fmt(target.mean_return),
        *sched_cols, *loss_cols, _fmt(eps),
    ])


# --- parameter sweeps ---------------------------------------------------------

def _sweep_worker(args):
    """Subprocess entry: run one (grid point, seed) training job."""
    base_cfg, overrides, seed, out_dir = args
    label = ";".join(f"{k}={v}" for k, v in sorted(overrides.items()))
    try:
        cfg = apply_overrides(base_cfg, overrides)
        cfg.validate()
        result = train(cfg, seed, out_dir)
        return {
            "grid_point": label, "seed": seed, "status": "ok",
            "top_k_win_rate": result.top_k_win_rate,
            "final_eval_win_rate": result.final_eval_win_rate,
            "run_dir": result.run_dir, "error": "",
        }
    except Exception as exc:  # individual failures recorded, sweep continues
        return {
            "grid_point": label, "seed": seed, "status": "failed",
            "top_k_win_rate": "", "final_eval_win_rate": "",
            "run_dir": "", "error": f"{type(exc).__name__}: {exc}",
        }


def sweep(base_cfg: FullConfig, grid: dict[str, list[str]], seeds: list[int],
          out_dir: str, processes: int | None = None) -> str:
    """Cartesian sweep over dotted-key value lists, seeds crossed in.

    Runs fan out as independent processes; per-run failures are recorded in
    the summary and do not stop the sweep. Returns the summary CSV path.
    """
    os.makedirs(out_dir, exist_ok=True)
    keys = sorted(grid)
    jobs = []
    for combo in product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, (str(v) for v in combo)))
        for seed in seeds:
            jobs.append((base_cfg, overrides, seed, out_dir))

    if processes is None:
        processes = max(1, min(len(jobs), os.cpu_count() or 1))
    if processes == 1:
        rows = [_sweep_worker(job) for job in jobs]
    else:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=processes) as pool:
            rows = pool.map(_sweep_worker, jobs)

    summary_path = os.path.join(out_dir, "sweep_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in SWEEP_COLUMNS])
    if base_cfg.run.write_figures:
        from . import report
        report.sweep_figure(summary_path, os.path.join(out_dir, "sweep_summary.png"))
    return summary_path
