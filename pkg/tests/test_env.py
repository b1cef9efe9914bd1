import math

import numpy as np
import pytest

from clmarl.env import (
    EAST,
    KILL_BONUS,
    N_FIXED_ACTIONS,
    NOOP,
    NORTH,
    STOP,
    WIN_BONUS,
    BattleConfig,
    EnemyView,
    Event,
    MicroBattleEnv,
    PlacementError,
    UnavailableActionError,
    mediocre_policy,
    preset_3v3,
    preset_3v4,
    scripted_opponent,
)


def make_env(**overrides) -> MicroBattleEnv:
    cfg = BattleConfig(**overrides)
    return MicroBattleEnv(cfg)


def random_rollout(env, seed, policy_seed=0, max_steps=None):
    """Roll an episode with uniformly random available actions."""
    rng = np.random.default_rng(policy_seed)
    result = env.reset(seed)
    trajectory = [result]
    steps = 0
    while not result.terminated:
        actions = [int(rng.choice(np.flatnonzero(result.avail[i])))
                   for i in range(env.n_agents)]
        result = env.step(actions)
        trajectory.append(result)
        steps += 1
        if max_steps and steps >= max_steps:
            break
    return trajectory


class TestReset:
    def test_deterministic_given_config_and_seed(self):
        env_a, env_b = make_env(), make_env()
        ra = env_a.reset(123)
        rb = env_b.reset(123)
        assert np.array_equal(ra.obs, rb.obs)
        assert np.array_equal(ra.state, rb.state)
        assert np.array_equal(ra.avail, rb.avail)

    def test_obs_and_state_sizes_match_layout(self):
        env = make_env()
        result = env.reset(0)
        assert result.obs.shape == (3, env.obs_size())
        assert result.state.shape == (env.state_size(),)
        assert env.obs_size() == sum(size for _, size in env.obs_layout())
        assert env.state_size() == sum(size for _, size in env.state_layout())

    def test_placement_invariants_over_many_seeds(self):
        env = make_env()
        for seed in range(1000):
            env.reset(seed)
            pos = env._pos
            assert len({tuple(p) for p in pos}) == len(pos)  # distinct cells
            assert np.all(pos[:, 0] >= 0) and np.all(pos[:, 1] >= 0)
            assert np.all(pos[:3, 0] <= 3)                  # allies spawn left
            assert np.all(pos[3:, 0] >= env.config.grid_width - 4)

    def test_capacity_error(self):
        with pytest.raises(PlacementError):
            BattleConfig(n_allies=40, grid_height=10).validate()

    def test_last_action_slots_zero_at_reset(self):
        env = make_env()
        result = env.reset(5)
        base = 3
        # one-hot of action 0 means slot zero is hot, rest zero
        for i in range(3):
            hot = result.obs[i, base:base + env.n_actions]
            assert hot[0] == 1.0 and np.all(hot[1:] == 0.0)


class TestStepMechanics:
    def setup_fixed_duel(self):
        """1v1 with hand-placed units for exact arithmetic checks."""
        env = make_env(n_allies=1, n_enemies=1, difficulty=1, log_events=True)
        env.reset(0)
        env._pos[0] = (5, 5)
        env._pos[1] = (6, 5)  # enemy adjacent, within range 2
        env._health[:] = (20.0, 10.0)
        env._avail = env._compute_avail()
        return env

    def test_attack_arithmetic_and_reward(self):
        env = self.setup_fixed_duel()
        scale = env.reward_scale
        result = env.step([N_FIXED_ACTIONS + 0])
        assert env._health[1] == pytest.approx(7.0)
        assert result.reward == pytest.approx(3.0 * scale)

    def test_kill_and_win_bonus(self):
        env = self.setup_fixed_duel()
        env._health[1] = 2.0
        scale = env.reward_scale
        result = env.step([N_FIXED_ACTIONS + 0])
        assert result.won and result.terminated
        assert result.reward == pytest.approx((2.0 + KILL_BONUS + WIN_BONUS) * scale)

    def test_all_stop_far_apart_zero_reward(self):
        env = make_env(difficulty=1)
        result = env.reset(3)
        # spawn regions are >= 4 cells apart, nobody is in attack range
        result = env.step([STOP] * 3)
        assert result.reward == 0.0

    def test_blocked_move_is_noop(self):
        env = make_env(n_allies=2, n_enemies=1, difficulty=1)
        env.reset(0)
        env._pos[0] = (4, 4)
        env._pos[1] = (4, 6)
        env._pos[2] = (11, 11)
        env._avail = env._compute_avail()
        # both allies walk toward (4, 5); the first claims it, the second is blocked
        env.step([NORTH, 2 + 1])  # agent 0 north, agent 1 south
        assert tuple(env._pos[0]) == (4, 5)
        assert tuple(env._pos[1]) == (4, 6)

    def test_unavailable_action_raises(self):
        env = make_env()
        result = env.reset(0)
        # enemies spawn far away, so no attack can be available initially
        assert not result.avail[0, N_FIXED_ACTIONS:].any()
        with pytest.raises(UnavailableActionError):
            env.step([N_FIXED_ACTIONS, STOP, STOP])

    def test_episode_reward_matches_event_log(self):
        for seed in range(8):
            env = make_env(log_events=True, difficulty=4)
            trajectory = random_rollout(env, seed, policy_seed=seed + 50)
            total = sum(r.reward for r in trajectory)
            nA = env.config.n_allies
            raw = 0.0
            for ev in env.events:
                if ev.actor.startswith("ally"):
                    raw += ev.damage + KILL_BONUS * ev.deaths
                elif ev.actor == "episode":
                    raw += ev.damage  # win bonus entry
            assert total == pytest.approx(raw * env.reward_scale, abs=1e-9)

    def test_conservation_damage_equals_health_lost(self):
        for seed in range(8):
            env = make_env(log_events=True, difficulty=7)
            env.reset(seed)
            start = env._health.copy()
            rollout = random_rollout(env, seed, policy_seed=seed)
            lost = float(np.sum(start - env._health))
            dealt = sum(ev.damage for ev in env.events if ev.actor != "episode")
            assert dealt == pytest.approx(lost, abs=1e-9)

    def test_termination_within_episode_limit(self):
        env = make_env(episode_limit=25, difficulty=2)
        trajectory = random_rollout(env, 4, policy_seed=1)
        assert trajectory[-1].terminated
        assert env.steps_taken <= 25

    def test_trajectory_determinism(self):
        def run():
            env = make_env(difficulty=6)
            rewards = [r.reward for r in random_rollout(env, 11, policy_seed=2)]
            return rewards, env._pos.copy(), env._health.copy()

        (rew_a, pos_a, hp_a), (rew_b, pos_b, hp_b) = run(), run()
        assert rew_a == rew_b
        assert np.array_equal(pos_a, pos_b)
        assert np.array_equal(hp_a, hp_b)


class TestAvailability:
    def test_dead_agent_noop_only(self):
        env = make_env()
        env.reset(0)
        env._alive[0] = False
        avail = env._compute_avail()
        assert avail[0, NOOP] == 1
        assert avail[0].sum() == 1

    def test_living_agents_never_noop(self):
        env = make_env()
        result = env.reset(0)
        assert not result.avail[:, NOOP].any()
        assert result.avail[:, STOP].all()

    def test_out_of_range_attack_unavailable(self):
        env = make_env(n_allies=1, n_enemies=1)
        env.reset(0)
        env._pos[0] = (0, 0)
        env._pos[1] = (5, 5)
        avail = env._compute_avail()
        assert avail[0, N_FIXED_ACTIONS] == 0
        env._pos[1] = (1, 1)  # distance sqrt(2) <= 2
        avail = env._compute_avail()
        assert avail[0, N_FIXED_ACTIONS] == 1

    def test_masks_match_geometric_recomputation(self):
        env = make_env(difficulty=5)
        result = env.reset(9)
        rng = np.random.default_rng(0)
        for _ in range(40):
            if result.terminated:
                break
            for i in range(env.n_agents):
                if not env._alive[i]:
                    continue
                for j in range(env.config.n_enemies):
                    expect = (env._alive[3 + j]
                              and math.hypot(*(env._pos[3 + j] - env._pos[i]))
                              <= env.config.ally_attack_range)
                    assert bool(result.avail[i, N_FIXED_ACTIONS + j]) == expect
            actions = [int(rng.choice(np.flatnonzero(result.avail[i])))
                       for i in range(env.n_agents)]
            result = env.step(actions)

    def test_mask_soundness_random_rollouts(self):
        # any action reported available must execute without contract errors
        for seed in range(20):
            env = make_env(difficulty=int(1 + seed % 10))
            random_rollout(env, seed, policy_seed=seed * 7)


class TestScriptedOpponent:
    def view(self, enemy_pos, ally_pos, ally_health, sight=5.0):
        return EnemyView(
            enemy_positions=np.array(enemy_pos),
            enemy_alive=np.ones(len(enemy_pos), dtype=bool),
            ally_positions=np.array(ally_pos),
            ally_health=np.array(ally_health, dtype=float),
            ally_alive=np.ones(len(ally_pos), dtype=bool),
            attack_range=2.0,
            sight_range=sight,
        )

    def test_focus_fire_targets_lowest_health(self):
        view = self.view([(5, 5)], [(4, 5), (6, 5)], [9.0, 5.0])
        decisions = scripted_opponent(7, view, np.random.default_rng(0))
        assert decisions == [("attack", 1)]

    def test_cheat_vision_extends_acquisition(self):
        # ally at distance 8: invisible at level 7, visible at level 8
        view = self.view([(0, 0)], [(8, 0)], [10.0])
        rng = np.random.default_rng(1)
        lvl7 = scripted_opponent(7, view, np.random.default_rng(1))
        lvl8 = scripted_opponent(8, view, np.random.default_rng(1))
        assert lvl7[0][0] == "move"  # random walk, no target seen
        assert lvl8 == [("move", EAST)]  # chases the ally it now sees

    def test_level_one_attacks_rarely(self):
        view = self.view([(5, 5)], [(5, 6)], [10.0])
        rng = np.random.default_rng(2)
        attacks = sum(scripted_opponent(1, view, rng)[0][0] == "attack"
                      for _ in range(2000))
        assert 0.25 < attacks / 2000 < 0.35

    def test_level_six_always_attacks_in_range(self):
        view = self.view([(5, 5)], [(5, 6)], [10.0])
        rng = np.random.default_rng(3)
        for _ in range(50):
            assert scripted_opponent(6, view, rng)[0] == ("attack", 0)

    def test_dead_enemy_noops(self):
        view = EnemyView(
            enemy_positions=np.array([(5, 5)]),
            enemy_alive=np.array([False]),
            ally_positions=np.array([(4, 5)]),
            ally_health=np.array([10.0]),
            ally_alive=np.array([True]),
            attack_range=2.0, sight_range=5.0,
        )
        assert scripted_opponent(7, view, np.random.default_rng(0)) == [("move", NOOP)]

    def test_cheat_health_multiplier_applied(self):
        env = make_env(difficulty=9)
        env.reset(0)
        assert np.all(env._health[3:] == 30.0)
        env_base = make_env(difficulty=7)
        env_base.reset(0)
        assert np.all(env_base._health[3:] == 20.0)


class TestObservations:
    def test_out_of_sight_blocks_zero(self):
        env = make_env(n_allies=2, n_enemies=1)
        env.reset(0)
        env._pos[0] = (0, 0)
        env._pos[1] = (0, 1)   # visible ally
        env._pos[2] = (11, 11)  # far enemy
        obs = env._compute_obs()
        base = 3 + env.n_actions
        assert obs[0, base:base + 5].any()            # ally block populated
        assert not obs[0, base + 5:base + 10].any()   # enemy block zeroed

    def test_dead_agents_observe_zeros(self):
        env = make_env()
        env.reset(0)
        env._alive[0] = False
        obs = env._compute_obs()
        assert not obs[0].any()

    def test_state_round_trip(self):
        env = make_env(difficulty=3)
        result = env.reset(21)
        for _ in range(5):
            if result.terminated:
                break
            result = env.step([int(np.flatnonzero(result.avail[i])[0])
                               for i in range(3)])
        decoded = env.decode_state(result.state)
        for unit, live in zip(decoded["units"], env.unit_states()):
            assert unit.position == live.position
            assert unit.alive == live.alive
            assert unit.health == pytest.approx(live.health, abs=1e-9)
        assert decoded["last_actions"] == [int(a) for a in env._last_actions]

    def test_observation_relative_geometry(self):
        env = make_env(n_allies=2, n_enemies=1)
        env.reset(0)
        env._pos[0] = (4, 4)
        env._pos[1] = (6, 5)
        env._pos[2] = (11, 11)
        obs = env._compute_obs()
        base = 3 + env.n_actions
        sight = env.config.ally_sight_range
        assert obs[0, base] == pytest.approx(2 / sight)
        assert obs[0, base + 1] == pytest.approx(1 / sight)
        assert obs[0, base + 2] == pytest.approx(math.hypot(2, 1) / sight)
        assert obs[0, base + 4] == 1.0  # same team


class TestPublicViews:
    def test_get_obs_and_state_match_step_result(self):
        env = make_env(difficulty=3)
        result = env.reset(7)
        assert np.array_equal(env.get_state(), result.state)
        for i in range(3):
            assert np.array_equal(env.get_obs(i), result.obs[i])
            assert np.array_equal(env.get_avail_actions(i), result.avail[i])

    def test_event_log_file(self, tmp_path):
        env = make_env(difficulty=5, log_events=True)
        random_rollout(env, 3, policy_seed=4)
        path = tmp_path / "events.log"
        env.dump_events(str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0].split() == ["step", "actor", "action", "damage", "deaths"]
        assert len(lines) == len(env.events) + 1


class TestPresets:
    def test_preset_shapes(self):
        assert preset_3v3().n_enemies == 3
        assert preset_3v4().n_enemies == 4
        env = MicroBattleEnv(preset_3v4())
        env.reset(0)
        assert env.n_actions == N_FIXED_ACTIONS + 4

    def test_set_difficulty_applies_next_reset(self):
        env = make_env(difficulty=5)
        env.reset(0)
        env.set_difficulty(9)
        assert np.all(env._health[3:] == 20.0)  # unchanged mid-episode
        env.reset(0)
        assert np.all(env._health[3:] == 30.0)


class TestMediocrePolicyAndLadder:
    def win_rate(self, difficulty, episodes=120, base_seed=0):
        wins = 0
        env = make_env(difficulty=difficulty)
        rng = np.random.default_rng(base_seed + difficulty * 1000)
        for ep in range(episodes):
            result = env.reset(base_seed + ep)
            while not result.terminated:
                result = env.step(mediocre_policy(env, rng))
            wins += int(result.won)
        return wins / episodes

    def test_ladder_smoke_ordering(self):
        # quick sanity version of the full audit: easy beats hard
        easy = self.win_rate(1, episodes=60)
        hard = self.win_rate(7, episodes=60)
        cheat = self.win_rate(10, episodes=60)
        assert easy > hard >= cheat
