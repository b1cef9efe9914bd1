"""Command-line entry points: train, eval, replay-scheduler, sweep,
inspect-checkpoint.

Exit codes: 0 success, 1 configuration error (including bad usage), 2
runtime abort (non-finite loss or unexpected failure mid-run).
"""

from __future__ import annotations

import os

# BLAS threading must be pinned before numpy loads; per-step tensors here
# are small enough that thread fan-out costs more than it saves, and sweeps
# parallelize across processes instead.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys

from . import __version__


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage is a config error: exit 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise_config_error(f"override {pair!r} must look like section.key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def raise_config_error(message: str):
    from .config import ConfigError
    raise ConfigError(message)


def _load_config(args):
    from .config import apply_overrides, default_config, load_file
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "config", None):
        return load_file(args.config, overrides)
    cfg = apply_overrides(default_config(), overrides)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clmarl",
                     description="Curriculum-driven multi-agent micro-battle "
                                 "training and analysis")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="config file (defaults used if omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    p_train = sub.add_parser("train", help="run one training job")
    add_config_args(p_train)
    p_train.add_argument("--seed", type=int, default=1)
    p_train.add_argument("--out", default="runs", help="output directory")
    p_train.add_argument("--no-figures", action="store_true",
                         help="skip figure rendering")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True,
                        help="checkpoint directory holding params.bin/.manifest")
    p_eval.add_argument("--difficulty", type=int, default=None,
                        help="opponent level (default: run.target_difficulty)")
    p_eval.add_argument("--rollouts", type=int, default=None,
                        help="number of rollouts (default: run.eval_rollouts)")
    p_eval.add_argument("--seed", type=int, default=1)

    p_replay = sub.add_parser("replay-scheduler",
                              help="re-run the difficulty scheduler over a "
                                   "(cycle, win_rate, mean_return) CSV")
    add_config_args(p_replay)
    p_replay.add_argument("--csv", required=True, help="input sample CSV")
    p_replay.add_argument("--out", default="scheduler_trace.csv",
                          help="output trace CSV path")
    p_replay.add_argument("--no-figures", action="store_true")

    p_sweep = sub.add_parser("sweep", help="grid sweep of training runs")
    add_config_args(p_sweep)
    p_sweep.add_argument("--grid", action="append", required=True,
                         metavar="SECTION.KEY=V1,V2,...",
                         help="axis of the sweep grid (repeatable)")
    p_sweep.add_argument("--seeds", default="1,2,3",
                         help="comma-separated seeds per grid point")
    p_sweep.add_argument("--out", default="sweeps", help="output directory")
    p_sweep.add_argument("--processes", type=int, default=None)

    p_inspect = sub.add_parser("inspect-checkpoint",
                               help="print a checkpoint manifest")
    p_inspect.add_argument("--checkpoint", required=True,
                           help="checkpoint directory or manifest path")
    return parser


def cmd_train(args) -> int:
    from .config import config_hash
    from .harness import train
    cfg = _load_config(args)
    if args.no_figures:
        from .config import apply_override
        cfg = apply_override(cfg, "run.write_figures", "false")
    print(f"clmarl {__version__} | config {config_hash(cfg)} | seed {args.seed}")
    result = train(cfg, args.seed, args.out)
    print(f"run dir: {result.run_dir}")
    print(f"cycles: {result.cycles}  env steps: {result.env_steps}")
    print(f"top-{cfg.run.top_k} win rate: {result.top_k_win_rate:.4f}  "
          f"final: {result.final_eval_win_rate:.4f}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .cgrpa import Networks
    from .config import config_hash
    from .env import MicroBattleEnv
    from .harness import evaluate
    cfg = _load_config(args)
    difficulty = args.difficulty or cfg.run.target_difficulty
    rollouts = args.rollouts or cfg.run.eval_rollouts
    env = MicroBattleEnv(cfg.env)
    nets = Networks.create(env.obs_size(), env.state_size(), env.n_agents,
                           env.n_actions, cfg.learner,
                           np.random.default_rng(0))
    cp = args.checkpoint
    bin_path = cp if cp.endswith(".bin") else os.path.join(cp, "params.bin")
    manifest = bin_path[:-4] + ".manifest"
    nets.load(bin_path, manifest)
    seeds = np.random.default_rng(args.seed).integers(2**63 - 1, size=rollouts)
    sample = evaluate(nets, cfg.env, difficulty, seeds)
    print(f"clmarl {__version__} | config {config_hash(cfg)}")
    print(f"difficulty {difficulty} | rollouts {rollouts}")
    print(f"win_rate = {sample.win_rate}")
    print(f"mean_return = {sample.mean_return}")
    return 0


def cmd_replay_scheduler(args) -> int:
    from .config import config_hash
    from .flexdiff import read_replay_csv, replay_samples, write_trace_csv
    cfg = _load_config(args)
    samples = read_replay_csv(args.csv)
    traces = replay_samples(samples, cfg.flexdiff)
    write_trace_csv(args.out, traces)
    print(f"clmarl {__version__} | config {config_hash(cfg)}")
    print(f"replayed {len(traces)} cycles -> {args.out}")
    print(f"final difficulty: {traces[-1].difficulty}")
    if not args.no_figures:
        from . import report
        fig_path = os.path.splitext(args.out)[0] + ".png"
        report.trace_figure(args.out, fig_path)
        print(f"figure: {fig_path}")
    return 0


def cmd_sweep(args) -> int:
    from .config import config_hash
    from .harness import sweep
    cfg = _load_config(args)
    grid = {}
    for axis in args.grid:
        key, sep, values = axis.partition("=")
        if not sep or not values:
            raise_config_error(f"grid axis {axis!r} must look like "
                               "section.key=v1,v2,...")
        grid[key.strip()] = [v.strip() for v in values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    print(f"clmarl {__version__} | base config {config_hash(cfg)}")
    summary = sweep(cfg, grid, seeds, args.out, processes=args.processes)
    print(f"sweep summary: {summary}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    cp = args.checkpoint
    manifest = cp if cp.endswith(".manifest") else os.path.join(cp, "params.manifest")
    with open(manifest) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    print(lines[0])
    total = 0
    for line in lines[1:]:
        name, dtype, shape, offset, length = line.split()
        total += int(length)
        print(f"  {name:<28} {dtype:<8} {shape:<14} {int(length):>10} bytes")
    print(f"{len(lines) - 1} tensors, {total} bytes total")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "replay-scheduler": cmd_replay_scheduler,
    "sweep": cmd_sweep,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    from .cgrpa import NonFiniteLossError
    from .config import ConfigError
    from .env import UnavailableActionError
    from .flexdiff import MalformedReplayError, SchedulerConfigError
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SchedulerConfigError, MalformedReplayError,
            FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLossError, UnavailableActionError, RuntimeError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
