"""Statistical difficulty scheduler driven by windowed evaluation metrics.

The scheduler consumes one (win_rate, mean_return) pair per evaluation cycle
and keeps a bounded history window. Each full-window cycle it computes the
window means/standard deviations, the least-squares win-rate trend, the
second difference of recent returns, and an EMA momentum of the blended
trend signal; difficulty-adaptive thresholds then drive a three-way
decision: promote, demote, or hold.

All functions here are pure: ``schedule_step`` maps (state, sample, config)
to a new state without mutating its inputs, so the scheduler can be
checkpointed, replayed offline from a CSV of samples, and unit-tested
against closed-form oracles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from math import fsum
from typing import Iterable, NamedTuple, Sequence

WARMUP = "warmup"
HOLD = "hold"
PROMOTE = "promote"
DEMOTE = "demote"

SNAPSHOT_FORMAT = "clmarl-scheduler-v1"


class SchedulerConfigError(ValueError):
    """A scheduler configuration violates one of its invariants."""


class InsufficientHistoryError(ValueError):
    """Window statistics were requested before the window filled."""


class UndefinedSlopeError(ValueError):
    """A trend slope was requested on fewer than two samples."""


class MalformedReplayError(ValueError):
    """A replay CSV row could not be parsed; message carries the line number."""


@dataclass(frozen=True)
class EvalSample:
    """One evaluation cycle's result.

    win_rate is the fraction of test rollouts won, in [0, 1]. mean_return is
    the mean episode return divided by the environment's declared maximum
    return, so it is nonnegative and usually below 1.
    """

    win_rate: float
    mean_return: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.win_rate) and 0.0 <= self.win_rate <= 1.0):
            raise ValueError(f"win_rate must be in [0, 1], got {self.win_rate!r}")
        if not (math.isfinite(self.mean_return) and self.mean_return >= 0.0):
            raise ValueError(f"mean_return must be finite and >= 0, got {self.mean_return!r}")


class EvalWindow:
    """Fixed-capacity window of EvalSamples, oldest first.

    ``push`` is functional: it returns a new window, dropping the oldest
    sample once capacity is reached.
    """

    __slots__ = ("capacity", "_samples")

    def __init__(self, capacity: int, samples: Sequence[EvalSample] = ()) -> None:
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        if len(samples) > capacity:
            raise ValueError("more samples than capacity")
        self.capacity = capacity
        self._samples: tuple[EvalSample, ...] = tuple(samples)

    def push(self, sample: EvalSample) -> "EvalWindow":
        kept = self._samples[-(self.capacity - 1):] if self.capacity > 1 else ()
        return EvalWindow(self.capacity, kept + (sample,))

    @property
    def samples(self) -> tuple[EvalSample, ...]:
        return self._samples

    @property
    def full(self) -> bool:
        return len(self._samples) == self.capacity

    def __len__(self) -> int:
        return len(self._samples)

    def win_rates(self) -> list[float]:
        return [s.win_rate for s in self._samples]

    def mean_returns(self) -> list[float]:
        return [s.mean_return for s in self._samples]


@dataclass(frozen=True)
class SchedulerConfig:
    """Tunable constants of the difficulty scheduler.

    The momentum gate (``momentum_tolerance``) bounds how quickly opposite
    difficulty switches can follow each other: see
    ``min_opposite_switch_gap``.
    """

    window_len: int = 20
    momentum_threshold: float = 0.1     # dead zone: slopes at or below this are ignored
    ema_decay: float = 0.9
    momentum_tolerance: float = 0.2     # |momentum| gate for any switch
    reward_tolerance: float = 0.05      # convexity floor that can trigger demotion
    winrate_std_tolerance: float = 0.08
    reward_std_tolerance: float = 0.1
    anchor: float = 0.5                 # performance anchor the threshold band spreads from
    scale_coef: float = 0.02
    band_max: float = 0.75
    band_min: float = 0.25
    d_min: int = 1
    d_max: int = 10
    d_start: int = 5
    step_up: int = 1
    step_down: int = 1

    def validate(self) -> None:
        if self.window_len < 1:
            raise SchedulerConfigError("window_len must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise SchedulerConfigError("ema_decay must be in [0, 1)")
        if not 0.0 <= self.band_min < self.band_max <= 1.0:
            raise SchedulerConfigError(
                "threshold band requires 0 <= band_min < band_max <= 1, "
                f"got band_min={self.band_min}, band_max={self.band_max}"
            )
        if not self.d_min <= self.d_start <= self.d_max:
            raise SchedulerConfigError(
                f"need d_min <= d_start <= d_max, got {self.d_min}, {self.d_start}, {self.d_max}"
            )
        if self.step_up < 1 or self.step_down < 1:
            raise SchedulerConfigError("step_up and step_down must be >= 1")
        for name in ("momentum_threshold", "momentum_tolerance", "reward_tolerance",
                     "winrate_std_tolerance", "reward_std_tolerance", "scale_coef"):
            if getattr(self, name) < 0:
                raise SchedulerConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.anchor <= 1.0:
            raise SchedulerConfigError("anchor must be in [0, 1]")
        if not self.band_min <= self.anchor <= self.band_max:
            raise SchedulerConfigError(
                "anchor must lie inside [band_min, band_max] so the threshold "
                f"band stays ordered, got anchor={self.anchor}"
            )


@dataclass(frozen=True)
class SchedulerState:
    """Complete mutable state of the scheduler, carried between cycles."""

    difficulty: int
    momentum: float
    window: EvalWindow
    cycle_index: int = 0
    last_switch_cycle: int | None = None


class WindowStats(NamedTuple):
    mu_w: float
    sigma_w: float
    mu_r: float
    sigma_r: float


@dataclass(frozen=True)
class CycleTrace:
    """Everything computed during one schedule_step, for logs and replay."""

    cycle: int
    win_rate: float
    mean_return: float
    branch: str
    difficulty: int
    momentum: float
    mu_w: float = math.nan
    sigma_w: float = math.nan
    mu_r: float = math.nan
    sigma_r: float = math.nan
    beta_w: float = math.nan
    conv_r: float = math.nan
    tau_h: float = math.nan
    tau_l: float = math.nan
    stable: int | None = None


TRACE_COLUMNS = (
    "cycle", "win_rate", "mean_return", "mu_w", "sigma_w", "mu_r", "sigma_r",
    "beta_w", "conv_r", "momentum", "tau_h", "tau_l", "stable", "branch",
    "difficulty",
)


def initial_state(cfg: SchedulerConfig) -> SchedulerState:
    cfg.validate()
    return SchedulerState(
        difficulty=cfg.d_start,
        momentum=0.0,
        window=EvalWindow(cfg.window_len),
    )


def window_stats(window: EvalWindow) -> WindowStats:
    """Means and population standard deviations of both window metrics.

    Raises InsufficientHistoryError until the window is full; the scheduler
    holds during that warm-up.
    """
    if not window.full:
        raise InsufficientHistoryError(
            f"window holds {len(window)} of {window.capacity} samples"
        )
    n = window.capacity
    ws = window.win_rates()
    rs = window.mean_returns()
    mu_w = fsum(ws) / n
    mu_r = fsum(rs) / n
    sigma_w = math.sqrt(fsum((w - mu_w) ** 2 for w in ws) / n)
    sigma_r = math.sqrt(fsum((r - mu_r) ** 2 for r in rs) / n)
    return WindowStats(mu_w, sigma_w, mu_r, sigma_r)


def stability(sigma_w: float, sigma_r: float, cfg: SchedulerConfig) -> int:
    """1 iff both standard deviations sit strictly below their tolerances."""
    return int(sigma_w < cfg.winrate_std_tolerance and sigma_r < cfg.reward_std_tolerance)


def trend_slope(window: EvalWindow) -> float:
    """Least-squares slope of win rate against window position 0..N-1."""
    if not window.full:
        raise InsufficientHistoryError(
            f"window holds {len(window)} of {window.capacity} samples"
        )
    n = window.capacity
    if n < 2:
        raise UndefinedSlopeError("slope needs at least two samples")
    ws = window.win_rates()
    x_bar = (n - 1) / 2.0
    sxx = fsum((i - x_bar) ** 2 for i in range(n))
    sxw = fsum((i - x_bar) * w for i, w in enumerate(ws))
    return sxw / sxx


def reward_convexity(r_t: float, r_tm1: float, r_tm2: float) -> float:
    """Second difference of the three most recent mean returns."""
    return r_t - 2.0 * r_tm1 + r_tm2


def convexity_from_returns(returns: Sequence[float]) -> tuple[float, bool]:
    """Convexity of the newest three returns; (0.0, True) while fewer exist."""
    if len(returns) < 3:
        return 0.0, True
    return reward_convexity(returns[-1], returns[-2], returns[-3]), False


def update_momentum(m_prev: float, beta_w: float, convexity: float,
                    cfg: SchedulerConfig) -> float:
    """EMA of the tanh-bounded blend of trend slope and return convexity.

    Slopes whose magnitude does not exceed the dead zone contribute nothing,
    so sub-noise drift cannot build momentum. The result stays in [-1, 1]
    whenever m_prev does (convex combination with a tanh).
    """
    beta_eff = beta_w if abs(beta_w) > cfg.momentum_threshold else 0.0
    drive = math.tanh(beta_eff + 0.5 * convexity)
    return cfg.ema_decay * m_prev + (1.0 - cfg.ema_decay) * drive


def thresholds(difficulty: int, cfg: SchedulerConfig) -> tuple[float, float]:
    """Difficulty-adaptive promotion/demotion thresholds (tau_h, tau_l).

    The promotion threshold saturates against band_max before the demotion
    threshold reaches band_min, so the admissible band widens downward as
    difficulty grows: retreating stays easier than advancing.
    """
    tau_h = min(cfg.band_max, cfg.anchor + cfg.scale_coef * difficulty)
    tau_l = max(cfg.band_min, cfg.anchor - cfg.scale_coef * difficulty)
    return tau_h, tau_l


def schedule_step(state: SchedulerState, sample: EvalSample,
                  cfg: SchedulerConfig) -> SchedulerState:
    """Advance the scheduler by one evaluation cycle."""
    new_state, _ = schedule_step_traced(state, sample, cfg)
    return new_state


def schedule_step_traced(state: SchedulerState, sample: EvalSample,
                         cfg: SchedulerConfig) -> tuple[SchedulerState, CycleTrace]:
    """schedule_step plus the full per-cycle trace used by logs and replay.

    Warm-up cycles (window not yet full) hold difficulty and leave momentum
    untouched. On full-window cycles the momentum updates unconditionally;
    the decision order is stats, slope, convexity, momentum, thresholds,
    branch.
    """
    cycle = state.cycle_index
    window = state.window.push(sample)

    if not window.full:
        new_state = SchedulerState(
            difficulty=state.difficulty,
            momentum=state.momentum,
            window=window,
            cycle_index=cycle + 1,
            last_switch_cycle=state.last_switch_cycle,
        )
        trace = CycleTrace(
            cycle=cycle, win_rate=sample.win_rate, mean_return=sample.mean_return,
            branch=WARMUP, difficulty=state.difficulty, momentum=state.momentum,
        )
        return new_state, trace

    stats = window_stats(window)
    stable = stability(stats.sigma_w, stats.sigma_r, cfg)
    beta_w = trend_slope(window)
    conv_r, _warming = convexity_from_returns(window.mean_returns())
    momentum = update_momentum(state.momentum, beta_w, conv_r, cfg)
    tau_h, tau_l = thresholds(state.difficulty, cfg)

    promote = stats.mu_w > tau_h and stable == 1 and momentum > cfg.momentum_tolerance
    demote = ((stats.mu_w < tau_l or conv_r < -cfg.reward_tolerance)
              and momentum < -cfg.momentum_tolerance)

    if promote:
        difficulty = min(state.difficulty + cfg.step_up, cfg.d_max)
        branch = PROMOTE
    elif demote:
        difficulty = max(state.difficulty - cfg.step_down, cfg.d_min)
        branch = DEMOTE
    else:
        difficulty = state.difficulty
        branch = HOLD

    switched = difficulty != state.difficulty
    new_state = SchedulerState(
        difficulty=difficulty,
        momentum=momentum,
        window=window,
        cycle_index=cycle + 1,
        last_switch_cycle=cycle if switched else state.last_switch_cycle,
    )
    trace = CycleTrace(
        cycle=cycle, win_rate=sample.win_rate, mean_return=sample.mean_return,
        branch=branch, difficulty=difficulty, momentum=momentum,
        mu_w=stats.mu_w, sigma_w=stats.sigma_w, mu_r=stats.mu_r,
        sigma_r=stats.sigma_r, beta_w=beta_w, conv_r=conv_r,
        tau_h=tau_h, tau_l=tau_l, stable=stable,
    )
    return new_state, trace


def min_opposite_switch_gap(cfg: SchedulerConfig) -> int:
    """Worst-case cycle gap before an opposite-direction switch can fire.

    After a switch the momentum sits just past +/-momentum_tolerance. Even
    under a maximally adverse drive (tanh saturated at the opposite sign),
    the EMA needs k cycles with decay^k * (1 + L) - 1 < -L before the
    opposite gate opens, L being momentum_tolerance. With the default
    decay 0.9 and L 0.2 this gives 4 cycles.
    """
    low = cfg.momentum_tolerance
    gamma = cfg.ema_decay
    if low >= 1.0:
        raise SchedulerConfigError("momentum_tolerance >= 1 makes switches unreachable")
    if gamma == 0.0 or low == 0.0:
        return 1
    ratio = (1.0 - low) / (1.0 + low)
    k = math.log(ratio) / math.log(gamma)
    return max(1, math.floor(k) + 1)


# --- serialization -----------------------------------------------------------

def save_snapshot(state: SchedulerState) -> str:
    """Plain-text key/value snapshot; floats use repr so loading is exact."""
    lines = [
        f"format = {SNAPSHOT_FORMAT}",
        f"difficulty = {state.difficulty}",
        f"momentum = {state.momentum!r}",
        f"cycle = {state.cycle_index}",
        f"last_switch_cycle = {state.last_switch_cycle if state.last_switch_cycle is not None else 'none'}",
        f"window_capacity = {state.window.capacity}",
        "window_win_rates = " + ",".join(repr(s.win_rate) for s in state.window.samples),
        "window_mean_returns = " + ",".join(repr(s.mean_return) for s in state.window.samples),
    ]
    return "\n".join(lines) + "\n"


def load_snapshot(text: str) -> SchedulerState:
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad snapshot line: {raw!r}")
        fields[key.strip()] = value.strip()
    if fields.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"unrecognized snapshot format {fields.get('format')!r}")
    capacity = int(fields["window_capacity"])
    wr_text = fields.get("window_win_rates", "")
    mr_text = fields.get("window_mean_returns", "")
    wins = [float(v) for v in wr_text.split(",") if v.strip()] if wr_text else []
    rets = [float(v) for v in mr_text.split(",") if v.strip()] if mr_text else []
    if len(wins) != len(rets):
        raise ValueError("window win-rate and return lists differ in length")
    window = EvalWindow(capacity, [EvalSample(w, r) for w, r in zip(wins, rets)])
    last_switch = fields["last_switch_cycle"]
    return SchedulerState(
        difficulty=int(fields["difficulty"]),
        momentum=float(fields["momentum"]),
        window=window,
        cycle_index=int(fields["cycle"]),
        last_switch_cycle=None if last_switch == "none" else int(last_switch),
    )


# --- offline replay ----------------------------------------------------------

def replay_samples(samples: Iterable[EvalSample],
                   cfg: SchedulerConfig) -> list[CycleTrace]:
    """Run the scheduler over a sample stream and collect every trace."""
    state = initial_state(cfg)
    traces = []
    for sample in samples:
        state, trace = schedule_step_traced(state, sample, cfg)
        traces.append(trace)
    return traces


def read_replay_csv(path: str) -> list[EvalSample]:
    """Parse a (cycle, win_rate, mean_return) CSV, tolerating a header row."""
    samples: list[EvalSample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and not _is_float(row[-1]):
                continue  # header
            if len(row) < 3:
                raise MalformedReplayError(f"line {lineno}: expected 3 columns, got {len(row)}")
            try:
                win = float(row[1])
                ret = float(row[2])
                sample = EvalSample(win, ret)
            except ValueError as exc:
                raise MalformedReplayError(f"line {lineno}: {exc}") from exc
            samples.append(sample)
    if not samples:
        raise MalformedReplayError("replay CSV contains no data rows")
    return samples


def trace_to_row(trace: CycleTrace) -> list[str]:
    def fmt(value: float) -> str:
        return "" if isinstance(value, float) and math.isnan(value) else repr(value)

    return [
        str(trace.cycle), repr(trace.win_rate), repr(trace.mean_return),
        fmt(trace.mu_w), fmt(trace.sigma_w), fmt(trace.mu_r), fmt(trace.sigma_r),
        fmt(trace.beta_w), fmt(trace.conv_r), repr(trace.momentum),
        fmt(trace.tau_h), fmt(trace.tau_l),
        "" if trace.stable is None else str(trace.stable),
        trace.branch, str(trace.difficulty),
    ]


def write_trace_csv(path: str, traces: Sequence[CycleTrace]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for trace in traces:
            writer.writerow(trace_to_row(trace))


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
