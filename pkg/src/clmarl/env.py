"""Grid micro-battle: a small cooperative-adversarial Dec-POMDP.

A team of learning-controlled allies fights a scripted enemy team on a
rectangular grid. Units move one cell at a time in four directions or attack
a living enemy inside attack range. Resolution order within a step is fixed:
ally moves, ally attacks, then scripted enemy moves and attacks, so a
(config, seed, action sequence) triple fully determines the trajectory.

The scripted opponent implements a ten-level strength ladder:

  1-3   random-walk movement, random in-range target, attack probability
        0.3 / 0.5 / 0.7
  4-6   chase-nearest movement, nearest-target selection, attack probability
        0.8 / 0.9 / 1.0
  7     focus fire on the lowest-health visible ally, always attacks
  8     level 7 plus full-map vision
  9     level 7 plus +50% starting health
  10    level 7 plus both advantages

Rewards are shaped: health removed from enemies, plus 10 (raw) per enemy
killed, plus 200 (raw) on victory; the raw total is rescaled so that a
perfect episode returns exactly ``max_return`` (default 20).

Observation layout, per agent (all-zero for dead agents):
  [own x / W, own y / H, own health fraction]            3
  [own previous action, one-hot]                         n_actions
  per other unit, allies first then enemies, zero-filled
  when outside sight range or dead:
    [rel x / sight, rel y / sight, distance / sight,
     health fraction, team (+1 ally / -1 enemy)]         5 each

Global state layout:
  per unit, allies first then enemies:
    [x / W, y / H, health fraction, alive flag]          4 each
  [each ally's previous action, one-hot]                 n_allies * n_actions
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

NOOP, STOP, NORTH, SOUTH, WEST, EAST = range(6)
N_FIXED_ACTIONS = 6
MOVE_DELTAS = {NORTH: (0, 1), SOUTH: (0, -1), WEST: (-1, 0), EAST: (1, 0)}
_MOVE_ACTION_IDS = np.array(sorted(MOVE_DELTAS), dtype=np.int64)
_MOVE_DELTA_ARRAY = np.array([MOVE_DELTAS[a] for a in sorted(MOVE_DELTAS)],
                             dtype=np.int64)

KILL_BONUS = 10.0
WIN_BONUS = 200.0

CHEAT_VISION_LEVELS = (8, 10)
CHEAT_HEALTH_LEVELS = (9, 10)
CHEAT_HEALTH_MULTIPLIER = 1.5
RANDOM_ATTACK_PROB = {1: 0.3, 2: 0.5, 3: 0.7}
CHASE_ATTACK_PROB = {4: 0.8, 5: 0.9, 6: 1.0}


class UnavailableActionError(RuntimeError):
    """An agent submitted an action its availability mask forbids."""


class PlacementError(ValueError):
    """Unit counts exceed the spawn-region capacity of the grid."""


@dataclass(frozen=True)
class BattleConfig:
    grid_width: int = 12
    grid_height: int = 12
    n_allies: int = 3
    n_enemies: int = 3
    ally_health: float = 20.0
    ally_damage: float = 3.0
    ally_attack_range: float = 2.0
    ally_sight_range: float = 5.0
    enemy_health: float = 20.0
    enemy_damage: float = 3.0
    enemy_attack_range: float = 2.0
    enemy_sight_range: float = 5.0
    episode_limit: int = 60
    difficulty: int = 5
    max_return: float = 20.0
    log_events: bool = False

    def validate(self) -> None:
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ValueError("both teams need at least one unit")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be >= 1")
        if not 1 <= self.difficulty <= 10:
            raise ValueError(f"difficulty must be in [1, 10], got {self.difficulty}")
        if self.grid_width < 8 or self.grid_height < 4:
            raise ValueError("grid too small for two spawn regions")
        region = 3 * self.grid_height
        if self.n_allies > region or self.n_enemies > region:
            raise PlacementError(
                f"{max(self.n_allies, self.n_enemies)} units exceed spawn capacity {region}")

    @property
    def n_actions(self) -> int:
        return N_FIXED_ACTIONS + self.n_enemies


def preset_3v3() -> BattleConfig:
    """Symmetric three-versus-three skirmish."""
    return BattleConfig()


def preset_3v4() -> BattleConfig:
    """Outnumbered variant: three allies against four enemies."""
    return BattleConfig(n_enemies=4)


PRESETS = {"3v3": preset_3v3, "3v4": preset_3v4}


@dataclass(frozen=True)
class UnitState:
    position: tuple[int, int]
    health: float
    alive: bool
    team: str  # "ally" or "enemy"


@dataclass
class StepResult:
    reward: float
    terminated: bool
    won: bool
    obs: np.ndarray        # (n_allies, obs_size)
    state: np.ndarray      # (state_size,)
    avail: np.ndarray      # (n_allies, n_actions) of {0, 1}


@dataclass(frozen=True)
class Event:
    """One attack or episode-end entry of the per-episode event log."""
    step: int
    actor: str
    action: str
    damage: float
    deaths: int


@dataclass(frozen=True)
class EnemyView:
    """What the scripted opponent is allowed to see."""
    enemy_positions: np.ndarray   # (n_enemies, 2)
    enemy_alive: np.ndarray       # (n_enemies,)
    ally_positions: np.ndarray    # (n_allies, 2)
    ally_health: np.ndarray       # (n_allies,)
    ally_alive: np.ndarray        # (n_allies,)
    attack_range: float
    sight_range: float


def _distances(origin: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = targets.astype(float) - origin.astype(float)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _step_toward(src: tuple[int, int], dst: tuple[int, int]) -> int:
    """Greedy move action closing the larger axis gap first; STOP if colocated."""
    dx = dst[0] - src[0]
    dy = dst[1] - src[1]
    if dx == 0 and dy == 0:
        return STOP
    if abs(dx) >= abs(dy) and dx != 0:
        return EAST if dx > 0 else WEST
    return NORTH if dy > 0 else SOUTH


def scripted_opponent(difficulty: int, view: EnemyView,
                      rng: np.random.Generator) -> list[tuple[str, int]]:
    """Per-enemy decisions for one step of the ladder opponent.

    Returns one ("attack", ally_index) or ("move", action) pair per enemy,
    dead enemies getting ("move", NOOP). Decisions consume the rng in enemy
    index order, so the trajectory is deterministic given the seed stream.
    """
    if not 1 <= difficulty <= 10:
        raise ValueError(f"difficulty must be in [1, 10], got {difficulty}")
    cheat_vision = difficulty in CHEAT_VISION_LEVELS
    decisions: list[tuple[str, int]] = []
    ally_pos = view.ally_positions.tolist()
    ally_alive = view.ally_alive.tolist()
    enemy_pos = view.enemy_positions.tolist()
    attack2 = view.attack_range * view.attack_range
    sight2 = view.sight_range * view.sight_range
    for e in range(len(enemy_pos)):
        if not view.enemy_alive[e]:
            decisions.append(("move", NOOP))
            continue
        pos = enemy_pos[e]
        d2 = [(ax - pos[0]) ** 2 + (ay - pos[1]) ** 2
              for ax, ay in ally_pos]
        dists = np.sqrt(np.array(d2, dtype=float))
        in_range_idx = np.array([a for a in range(len(ally_pos))
                                 if ally_alive[a] and d2[a] <= attack2],
                                dtype=np.int64)
        visible_idx = np.array([a for a in range(len(ally_pos))
                                if ally_alive[a]
                                and (cheat_vision or d2[a] <= sight2)],
                               dtype=np.int64)

        if difficulty <= 3:
            prob = RANDOM_ATTACK_PROB[difficulty]
            if in_range_idx.size and rng.random() < prob:
                target = int(rng.choice(in_range_idx))
                decisions.append(("attack", target))
            else:
                decisions.append(("move", _random_move(rng)))
        elif difficulty <= 6:
            prob = CHASE_ATTACK_PROB[difficulty]
            if in_range_idx.size and rng.random() < prob:
                target = int(in_range_idx[np.argmin(dists[in_range_idx])])
                decisions.append(("attack", target))
            elif visible_idx.size:
                nearest = int(visible_idx[np.argmin(dists[visible_idx])])
                move = _step_toward(tuple(pos), tuple(view.ally_positions[nearest]))
                decisions.append(("move", move))
            else:
                decisions.append(("move", _random_move(rng)))
        else:
            # focus fire: always attack when able, concentrating on the
            # weakest reachable ally; otherwise close on the weakest visible
            if in_range_idx.size:
                target = int(in_range_idx[np.argmin(view.ally_health[in_range_idx])])
                decisions.append(("attack", target))
            elif visible_idx.size:
                target = int(visible_idx[np.argmin(view.ally_health[visible_idx])])
                move = _step_toward(tuple(pos), tuple(view.ally_positions[target]))
                decisions.append(("move", move))
            else:
                decisions.append(("move", _random_move(rng)))
    return decisions


def _random_move(rng: np.random.Generator) -> int:
    pick = int(rng.integers(0, 5))
    return (NORTH, SOUTH, WEST, EAST, STOP)[pick]


class MicroBattleEnv:
    """One environment instance; create one per rollout stream."""

    def __init__(self, config: BattleConfig) -> None:
        config.validate()
        self.config = config
        self.n_agents = config.n_allies
        self.n_actions = config.n_actions
        self._n_units = config.n_allies + config.n_enemies
        self._rng: np.random.Generator | None = None
        self._active = False
        self.events: list[Event] = []

    # --- sizes and layouts ---------------------------------------------------

    def obs_size(self) -> int:
        others = self.config.n_allies - 1 + self.config.n_enemies
        return 3 + self.n_actions + 5 * others

    def state_size(self) -> int:
        return 4 * self._n_units + self.config.n_allies * self.n_actions

    def obs_layout(self) -> list[tuple[str, int]]:
        cfg = self.config
        layout = [("own_position_health", 3), ("own_last_action", self.n_actions)]
        for j in range(cfg.n_allies - 1):
            layout.append((f"other_ally_{j}_relative", 5))
        for j in range(cfg.n_enemies):
            layout.append((f"enemy_{j}_relative", 5))
        return layout

    def state_layout(self) -> list[tuple[str, int]]:
        cfg = self.config
        layout = [(f"ally_{i}_unit", 4) for i in range(cfg.n_allies)]
        layout += [(f"enemy_{j}_unit", 4) for j in range(cfg.n_enemies)]
        layout += [(f"ally_{i}_last_action", self.n_actions) for i in range(cfg.n_allies)]
        return layout

    # --- difficulty ------------------------------------------------------------

    def set_difficulty(self, difficulty: int) -> None:
        """Change opponent strength; takes effect at the next reset."""
        if not 1 <= difficulty <= 10:
            raise ValueError(f"difficulty must be in [1, 10], got {difficulty}")
        self.config = replace(self.config, difficulty=difficulty)

    # --- episode lifecycle -----------------------------------------------------

    def reset(self, seed: int) -> StepResult:
        cfg = self.config
        self._rng = np.random.default_rng(seed)
        self._step_count = 0
        self._active = True
        self.events = []

        nA, nE = cfg.n_allies, cfg.n_enemies
        self._pos = np.zeros((self._n_units, 2), dtype=np.int64)
        self._pos[:nA] = self._spawn(x_lo=1, x_hi=3, count=nA)
        self._pos[nA:] = self._spawn(x_lo=cfg.grid_width - 4, x_hi=cfg.grid_width - 2,
                                     count=nE)
        health_mult = (CHEAT_HEALTH_MULTIPLIER
                       if cfg.difficulty in CHEAT_HEALTH_LEVELS else 1.0)
        self._max_health = np.concatenate([
            np.full(nA, cfg.ally_health),
            np.full(nE, cfg.enemy_health * health_mult),
        ])
        self._health = self._max_health.copy()
        self._alive = np.ones(self._n_units, dtype=bool)
        self._last_actions = np.zeros(nA, dtype=np.int64)
        self._occupied = {tuple(p) for p in self._pos.tolist()}

        max_raw = float(np.sum(self._max_health[nA:])) + KILL_BONUS * nE + WIN_BONUS
        self._reward_scale = cfg.max_return / max_raw
        self._avail = self._compute_avail()
        return StepResult(
            reward=0.0, terminated=False, won=False,
            obs=self._compute_obs(), state=self._compute_state(),
            avail=self._avail.copy(),
        )

    def _spawn(self, x_lo: int, x_hi: int, count: int) -> np.ndarray:
        cells = [(x, y) for x in range(x_lo, x_hi + 1)
                 for y in range(self.config.grid_height)]
        chosen = self._rng.choice(len(cells), size=count, replace=False)
        return np.array([cells[int(c)] for c in chosen], dtype=np.int64)

    def step(self, joint_action: Sequence[int]) -> StepResult:
        if not self._active:
            raise RuntimeError("step called on terminated or unreset environment")
        cfg = self.config
        nA = cfg.n_allies
        actions = np.asarray(joint_action, dtype=np.int64)
        if actions.shape != (nA,):
            raise ValueError(f"expected {nA} actions, got shape {actions.shape}")
        for i, act in enumerate(actions):
            if not self._avail[i, act]:
                raise UnavailableActionError(
                    f"agent {i} chose action {int(act)} but mask forbids it")

        self._step_count += 1
        raw_reward = 0.0

        # ally movement, then ally attacks
        for i, act in enumerate(actions):
            if self._alive[i] and int(act) in MOVE_DELTAS:
                self._try_move(i, int(act))
        kills = 0
        for i, act in enumerate(actions):
            if not self._alive[i] or act < N_FIXED_ACTIONS:
                continue
            target = nA + (int(act) - N_FIXED_ACTIONS)
            dealt, died = self._resolve_attack(i, target, cfg.ally_damage)
            raw_reward += dealt
            kills += died
        raw_reward += KILL_BONUS * kills

        won = not np.any(self._alive[nA:])
        terminated = False
        if won:
            raw_reward += WIN_BONUS
            terminated = True
            if cfg.log_events:
                self.events.append(Event(self._step_count, "episode", "victory",
                                         WIN_BONUS, 0))
        else:
            self._enemy_phase()
            if not np.any(self._alive[:nA]):
                terminated = True
            elif self._step_count >= cfg.episode_limit:
                terminated = True

        self._last_actions = actions.copy()
        self._avail = self._compute_avail()
        if terminated:
            self._active = False
        return StepResult(
            reward=raw_reward * self._reward_scale,
            terminated=terminated, won=won,
            obs=self._compute_obs(), state=self._compute_state(),
            avail=self._avail.copy(),
        )

    def _try_move(self, unit: int, action: int) -> None:
        dx, dy = MOVE_DELTAS[action]
        x, y = self._pos[unit]
        nx, ny = int(x) + dx, int(y) + dy
        if not (0 <= nx < self.config.grid_width and 0 <= ny < self.config.grid_height):
            return
        if (nx, ny) in self._occupied:
            return
        self._occupied.discard((int(x), int(y)))
        self._occupied.add((nx, ny))
        self._pos[unit] = (nx, ny)

    def _resolve_attack(self, attacker: int, target: int,
                        damage: float) -> tuple[float, int]:
        """Deal up to ``damage``, capped at remaining health; returns (dealt, died)."""
        if not self._alive[target]:
            return 0.0, 0
        dealt = min(damage, float(self._health[target]))
        self._health[target] -= dealt
        died = 0
        if self._health[target] <= 0.0:
            self._health[target] = 0.0
            self._alive[target] = False
            self._occupied.discard((int(self._pos[target, 0]),
                                    int(self._pos[target, 1])))
            died = 1
        if self.config.log_events:
            nA = self.config.n_allies
            actor = f"ally_{attacker}" if attacker < nA else f"enemy_{attacker - nA}"
            victim = f"enemy_{target - nA}" if target >= nA else f"ally_{target}"
            self.events.append(Event(self._step_count, actor, f"attack_{victim}",
                                     dealt, died))
        return dealt, died

    def _enemy_phase(self) -> None:
        cfg = self.config
        nA = cfg.n_allies
        view = EnemyView(
            enemy_positions=self._pos[nA:].copy(),
            enemy_alive=self._alive[nA:].copy(),
            ally_positions=self._pos[:nA].copy(),
            ally_health=self._health[:nA].copy(),
            ally_alive=self._alive[:nA].copy(),
            attack_range=cfg.enemy_attack_range,
            sight_range=cfg.enemy_sight_range,
        )
        decisions = scripted_opponent(cfg.difficulty, view, self._rng)
        for e, (kind, value) in enumerate(decisions):
            if kind == "move" and self._alive[nA + e] and value in MOVE_DELTAS:
                self._try_move(nA + e, value)
        for e, (kind, value) in enumerate(decisions):
            if kind == "attack" and self._alive[nA + e]:
                self._resolve_attack(nA + e, value, cfg.enemy_damage)

    # --- views -------------------------------------------------------------------

    def get_avail_actions(self, agent: int) -> np.ndarray:
        return self._avail[agent].copy()

    def get_obs(self, agent: int) -> np.ndarray:
        """Current observation vector of one agent (documented layout)."""
        return self._compute_obs()[agent]

    def get_state(self) -> np.ndarray:
        """Current global state vector (documented layout)."""
        return self._compute_state()

    def dump_events(self, path: str) -> None:
        """Write the episode event log, one line per event."""
        with open(path, "w") as fh:
            fh.write("step actor action damage deaths\n")
            for ev in self.events:
                fh.write(f"{ev.step} {ev.actor} {ev.action} "
                         f"{ev.damage!r} {ev.deaths}\n")

    def _compute_avail(self) -> np.ndarray:
        cfg = self.config
        nA = cfg.n_allies
        avail = np.zeros((nA, self.n_actions), dtype=np.int8)
        pos = self._pos.tolist()
        alive = self._alive.tolist()
        occupied = self._occupied
        range2 = cfg.ally_attack_range * cfg.ally_attack_range
        W, H = cfg.grid_width, cfg.grid_height
        for i in range(nA):
            if not alive[i]:
                avail[i, NOOP] = 1
                continue
            row = avail[i]
            row[STOP] = 1
            x, y = pos[i]
            for action, (dx, dy) in MOVE_DELTAS.items():
                nx, ny = x + dx, y + dy
                if 0 <= nx < W and 0 <= ny < H and (nx, ny) not in occupied:
                    row[action] = 1
            for j in range(cfg.n_enemies):
                u = nA + j
                if alive[u]:
                    ex, ey = pos[u]
                    if (ex - x) ** 2 + (ey - y) ** 2 <= range2:
                        row[N_FIXED_ACTIONS + j] = 1
        return avail

    def _compute_obs(self) -> np.ndarray:
        cfg = self.config
        nA = cfg.n_allies
        sight = cfg.ally_sight_range
        sight2 = sight * sight
        obs = np.zeros((nA, self.obs_size()))
        pos = self._pos.tolist()
        alive = self._alive.tolist()
        frac = (self._health / self._max_health).tolist()
        base = 3 + self.n_actions
        for i in range(nA):
            if not alive[i]:
                continue
            vec = obs[i]
            x, y = pos[i]
            vec[0] = x / cfg.grid_width
            vec[1] = y / cfg.grid_height
            vec[2] = frac[i]
            vec[3 + int(self._last_actions[i])] = 1.0
            slot = 0
            for u in range(self._n_units):
                if u == i:
                    continue
                offset = base + 5 * slot
                slot += 1
                if not alive[u]:
                    continue
                dx = pos[u][0] - x
                dy = pos[u][1] - y
                d2 = dx * dx + dy * dy
                if d2 > sight2:
                    continue
                vec[offset] = dx / sight
                vec[offset + 1] = dy / sight
                vec[offset + 2] = math.sqrt(d2) / sight
                vec[offset + 3] = frac[u]
                vec[offset + 4] = 1.0 if u < nA else -1.0
        return obs

    def _compute_state(self) -> np.ndarray:
        cfg = self.config
        state = np.zeros(self.state_size())
        for u in range(self._n_units):
            offset = 4 * u
            state[offset] = self._pos[u, 0] / cfg.grid_width
            state[offset + 1] = self._pos[u, 1] / cfg.grid_height
            state[offset + 2] = self._health[u] / self._max_health[u]
            state[offset + 3] = 1.0 if self._alive[u] else 0.0
        base = 4 * self._n_units
        for i in range(cfg.n_allies):
            state[base + i * self.n_actions + int(self._last_actions[i])] = 1.0
        return state

    def decode_state(self, state: np.ndarray) -> dict:
        """Invert _compute_state; used to verify the documented layout."""
        cfg = self.config
        units = []
        for u in range(self._n_units):
            x, y, hf, alive = state[4 * u: 4 * u + 4]
            units.append(UnitState(
                position=(round(x * cfg.grid_width), round(y * cfg.grid_height)),
                health=hf * self._max_health[u],
                alive=bool(alive > 0.5),
                team="ally" if u < cfg.n_allies else "enemy",
            ))
        base = 4 * self._n_units
        last = []
        for i in range(cfg.n_allies):
            hot = state[base + i * self.n_actions: base + (i + 1) * self.n_actions]
            last.append(int(np.argmax(hot)))
        return {"units": units, "last_actions": last}

    def unit_states(self) -> list[UnitState]:
        return [UnitState(position=(int(self._pos[u, 0]), int(self._pos[u, 1])),
                          health=float(self._health[u]),
                          alive=bool(self._alive[u]),
                          team="ally" if u < self.config.n_allies else "enemy")
                for u in range(self._n_units)]

    @property
    def reward_scale(self) -> float:
        return self._reward_scale

    @property
    def steps_taken(self) -> int:
        return self._step_count


def mediocre_policy(env: MicroBattleEnv, rng: np.random.Generator) -> np.ndarray:
    """Fixed heuristic ally controller used for ladder audits and baselines.

    Attacks the nearest in-range enemy (or advances on the nearest visible
    one) 75% of the time, otherwise acts uniformly over available actions.
    Deliberately unoptimized: it neither focuses fire nor retreats.
    """
    cfg = env.config
    nA = cfg.n_allies
    actions = np.zeros(nA, dtype=np.int64)
    for i in range(nA):
        avail = env._avail[i]
        if not env._alive[i]:
            actions[i] = NOOP
            continue
        options = np.flatnonzero(avail)
        if rng.random() < 0.25:
            actions[i] = int(rng.choice(options))
            continue
        attack_options = options[options >= N_FIXED_ACTIONS]
        if attack_options.size:
            enemy_idx = attack_options - N_FIXED_ACTIONS + nA
            dists = _distances(env._pos[i], env._pos[enemy_idx])
            actions[i] = int(attack_options[np.argmin(dists)])
            continue
        enemies = np.arange(nA, nA + cfg.n_enemies)
        live = enemies[env._alive[enemies]]
        if live.size:
            dists = _distances(env._pos[i], env._pos[live])
            visible = live[dists <= cfg.ally_sight_range]
            if visible.size:
                nearest = visible[np.argmin(_distances(env._pos[i], env._pos[visible]))]
                move = _step_toward(tuple(env._pos[i]), tuple(env._pos[nearest]))
                if avail[move]:
                    actions[i] = move
                    continue
        actions[i] = int(rng.choice(options))
    return actions
