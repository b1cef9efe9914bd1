"""Counterfactual group-relative credit assignment and the learning update.

Each agent's advantage compares the joint value of the executed joint action
with a policy-expected counterfactual baseline (the mixer re-evaluated for
every alternative action of that agent, others held fixed), minus a KL
penalty pulling the agent's policy toward the group average. The advantage
then augments the agent's chosen-action utility before monotonic mixing,
and additionally weights a log-likelihood policy term in the loss.

Policies are Boltzmann distributions over each agent's own utilities; they
exist only inside the advantage, the KL terms, and the policy loss, while
behavior remains epsilon-greedy. Advantages are constants with respect to
the gradient everywhere they appear.

The batched learner consumes whole padded episodes (recurrent hidden state
resets at episode boundaries) and performs one clipped adaptive-moment
update of the shared agent network and mixer per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import AgentNet, ArrayPool, MonotonicMixer, OptimizerState, Params

KL_FLOOR = 1e-8


class NoAvailableActionError(RuntimeError):
    """An agent had no available action; the environment state is malformed."""


class NonFiniteLossError(RuntimeError):
    """The loss became non-finite; diagnostics carried in args."""


@dataclass(frozen=True)
class LearnerConfig:
    """Learning constants; lam in (0, 1] with 0 allowed as the ablation
    switch and negative values only for sign-convention sweeps."""

    lam: float = 0.5
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.99
    learning_rate: float = 5e-4
    grad_norm_clip: float = 10.0
    batch_size: int = 32
    buffer_capacity: int = 5000
    target_update_interval: int = 200
    policy_temperature: float = 1.0
    policy_term: bool = True
    policy_weight: float = 1.0   # coefficient on the advantage-weighted term
    hidden_dim: int = 64
    mixer_embed: int = 32

    def validate(self) -> None:
        if not -1.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [-1, 1], got {self.lam}")
        if self.alpha < 0 or self.beta < 0 or self.policy_weight < 0:
            raise ValueError("alpha, beta, and policy_weight must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.policy_temperature <= 0:
            raise ValueError("policy_temperature must be positive")
        for name in ("learning_rate", "grad_norm_clip", "batch_size",
                     "buffer_capacity", "target_update_interval",
                     "hidden_dim", "mixer_embed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PolicyDistribution:
    probs: np.ndarray
    avail_mask: np.ndarray

    def validate(self) -> None:
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probs sum to {self.probs.sum()}, not 1")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        if np.any(self.probs[self.avail_mask == 0] != 0):
            raise ValueError("probability mass on unavailable action")


@dataclass(frozen=True)
class CounterfactualAdvantage:
    value: float
    joint_q: float
    baseline: float
    kl_penalty: float
    alpha: float


@dataclass(frozen=True)
class Transition:
    """One Dec-POMDP step with the observation histories needed to rebuild
    recurrent utilities from the episode start."""

    obs_history: np.ndarray       # (t+1, n_agents, obs_dim), ending at time t
    next_obs_history: np.ndarray  # (t+2, n_agents, obs_dim), ending at t+1
    state: np.ndarray
    next_state: np.ndarray
    actions: np.ndarray           # (n_agents,) int
    reward: float
    terminated: bool
    avail: np.ndarray             # (n_agents, n_actions)
    next_avail: np.ndarray


@dataclass
class Episode:
    """A complete episode; arrays indexed by timestep."""

    obs: np.ndarray        # (T+1, n_agents, obs_dim)
    state: np.ndarray      # (T+1, state_dim)
    avail: np.ndarray      # (T+1, n_agents, n_actions)
    actions: np.ndarray    # (T, n_agents)
    rewards: np.ndarray    # (T,)
    terminated: np.ndarray  # (T,) bool, True on the final step
    won: bool = False

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def transition(self, t: int) -> Transition:
        return Transition(
            obs_history=self.obs[:t + 1],
            next_obs_history=self.obs[:t + 2],
            state=self.state[t],
            next_state=self.state[t + 1],
            actions=self.actions[t],
            reward=float(self.rewards[t]),
            terminated=bool(self.terminated[t]),
            avail=self.avail[t],
            next_avail=self.avail[t + 1],
        )


@dataclass
class EpisodeBatch:
    """Episodes padded to a common length with a validity mask."""

    obs: np.ndarray        # (T+1, B, n, obs_dim)
    state: np.ndarray      # (T+1, B, state_dim)
    avail: np.ndarray      # (T+1, B, n, A)
    actions: np.ndarray    # (T, B, n)
    rewards: np.ndarray    # (T, B)
    terminated: np.ndarray  # (T, B)
    mask: np.ndarray       # (T, B) 1.0 where the step is real

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def size(self) -> int:
        return self.actions.shape[1]

    @classmethod
    def from_episodes(cls, episodes: list[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise ValueError("empty batch")
        T = max(ep.length for ep in episodes)
        B = len(episodes)
        _, n, obs_dim = episodes[0].obs.shape
        state_dim = episodes[0].state.shape[1]
        n_actions = episodes[0].avail.shape[2]
        obs = np.zeros((T + 1, B, n, obs_dim))
        state = np.zeros((T + 1, B, state_dim))
        avail = np.zeros((T + 1, B, n, n_actions), dtype=np.int8)
        avail[..., 0] = 1  # padding rows stay well-formed for the softmax
        actions = np.zeros((T, B, n), dtype=np.int64)
        rewards = np.zeros((T, B))
        terminated = np.zeros((T, B), dtype=bool)
        mask = np.zeros((T, B))
        for b, ep in enumerate(episodes):
            L = ep.length
            obs[:L + 1, b] = ep.obs
            state[:L + 1, b] = ep.state
            avail[:L + 1, b] = ep.avail
            actions[:L, b] = ep.actions
            rewards[:L, b] = ep.rewards
            terminated[:L, b] = ep.terminated
            mask[:L, b] = 1.0
        return cls(obs=obs, state=state, avail=avail, actions=actions,
                   rewards=rewards, terminated=terminated, mask=mask)


@dataclass
class LossReport:
    td_loss: float
    kl_loss: float
    policy_loss: float
    total_loss: float
    grad_norm: float
    mean_advantage: float


# --- policy primitives --------------------------------------------------------

def boltzmann_probs(q_values: np.ndarray, avail_mask: np.ndarray,
                    temperature: float) -> np.ndarray:
    """Masked Boltzmann distribution over the trailing action axis."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    avail = np.asarray(avail_mask)
    if not np.all(avail.any(axis=-1)):
        raise NoAvailableActionError("an agent has no available action")
    logits = np.where(avail > 0, np.asarray(q_values, dtype=float) / temperature,
                      -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def derive_policy(q_values: np.ndarray, avail_mask: np.ndarray,
                  temperature: float = 1.0) -> PolicyDistribution:
    probs = boltzmann_probs(q_values, avail_mask, temperature)
    return PolicyDistribution(probs=probs, avail_mask=np.asarray(avail_mask).copy())


def group_average_policy(policies: list[PolicyDistribution]) -> PolicyDistribution:
    """Entrywise mean of the probability vectors, renormalized.

    Actions unavailable to every agent end up with exactly zero mass; the
    availability mask of the result is the union of the inputs'.
    """
    if not policies:
        raise ValueError("cannot average an empty group")
    stacked = np.stack([p.probs for p in policies])
    mean = stacked.mean(axis=0)
    mean = mean / mean.sum()
    union = np.zeros_like(policies[0].avail_mask)
    for p in policies:
        union = np.maximum(union, p.avail_mask)
    return PolicyDistribution(probs=mean, avail_mask=union)


def kl_divergence(p: PolicyDistribution, q: PolicyDistribution) -> float:
    """KL(p || q) over p's support with q floored at KL_FLOOR inside the log."""
    return float(kl_terms(p.probs, q.probs))


def kl_terms(p: np.ndarray, q: np.ndarray, floor: float = KL_FLOOR) -> np.ndarray:
    """Batched KL over the trailing axis, support restricted to p > 0."""
    log_q = np.log(np.maximum(q, floor))
    safe_p = np.where(p > 0.0, p, 1.0)
    contrib = np.where(p > 0.0, p * (np.log(safe_p) - log_q), 0.0)
    return contrib.sum(axis=-1)


# --- counterfactual quantities --------------------------------------------------

def counterfactual_baseline(agent_index: int, utilities: np.ndarray,
                            mixer: MonotonicMixer, mixer_params: Params,
                            state: np.ndarray, joint_action: np.ndarray,
                            policy: PolicyDistribution) -> float:
    """Exact policy expectation of the joint value over one agent's actions.

    utilities: (n_agents, n_actions) per-agent utility vectors. Only the
    mixer is re-evaluated per counterfactual action; other agents keep their
    chosen-action utilities.
    """
    n_agents, n_actions = utilities.shape
    chosen = utilities[np.arange(n_agents), np.asarray(joint_action)]
    substituted = np.tile(chosen, (n_actions, 1))
    substituted[:, agent_index] = utilities[agent_index]
    states = np.broadcast_to(state, (n_actions, state.shape[-1]))
    q_tot, _ = mixer.forward(mixer_params, substituted, states, with_cache=False)
    return float(np.dot(policy.probs, q_tot))


def counterfactual_advantage(agent_index: int, joint_q: float, baseline: float,
                             kl: float, alpha: float) -> CounterfactualAdvantage:
    if kl < 0:
        raise ValueError("kl must be nonnegative")
    return CounterfactualAdvantage(
        value=joint_q - baseline - alpha * kl,
        joint_q=joint_q, baseline=baseline, kl_penalty=kl, alpha=alpha,
    )


def augment_utilities(q_i, advantage, lam: float):
    """Counterfactual-augmented utility: q + lam * advantage (elementwise)."""
    return q_i + lam * advantage


# --- networks -------------------------------------------------------------------

@dataclass
class Networks:
    """Shared-parameter agent network plus mixer, with target copies.

    The agent network is shared across agents; inputs are observations with
    an agent-index one-hot appended, so utilities remain per-agent functions
    of their own histories.
    """

    agent_net: AgentNet
    mixer_net: MonotonicMixer
    agent: Params
    mixer: Params
    target_agent: Params
    target_mixer: Params
    n_agents: int
    pool: ArrayPool = field(default_factory=ArrayPool)

    @classmethod
    def create(cls, obs_dim: int, state_dim: int, n_agents: int, n_actions: int,
               cfg: LearnerConfig, rng: np.random.Generator) -> "Networks":
        agent_net = AgentNet(obs_dim + n_agents, n_actions, hidden=cfg.hidden_dim)
        mixer_net = MonotonicMixer(n_agents, state_dim, embed=cfg.mixer_embed)
        agent = agent_net.init_params(rng)
        mixer = mixer_net.init_params(rng)
        return cls(agent_net=agent_net, mixer_net=mixer_net,
                   agent=agent, mixer=mixer,
                   target_agent=nn.clone_params(agent),
                   target_mixer=nn.clone_params(mixer),
                   n_agents=n_agents)

    def sync_targets(self) -> None:
        nn.sync_targets(self.agent, self.target_agent)
        nn.sync_targets(self.mixer, self.target_mixer)

    def merged_online(self) -> Params:
        out = {f"agent/{k}": v for k, v in self.agent.items()}
        out.update({f"mixer/{k}": v for k, v in self.mixer.items()})
        return out

    def save(self, bin_path: str, manifest_path: str) -> None:
        combined = self.merged_online()
        combined.update({f"target_agent/{k}": v for k, v in self.target_agent.items()})
        combined.update({f"target_mixer/{k}": v for k, v in self.target_mixer.items()})
        nn.save_params(combined, bin_path, manifest_path)

    def load(self, bin_path: str, manifest_path: str) -> None:
        loaded = nn.load_params(bin_path, manifest_path)
        for key, value in loaded.items():
            group, _, name = key.partition("/")
            store = {"agent": self.agent, "mixer": self.mixer,
                     "target_agent": self.target_agent,
                     "target_mixer": self.target_mixer}[group]
            np.copyto(store[name], value)


def encode_agent_inputs(obs: np.ndarray) -> np.ndarray:
    """Append an agent-index one-hot to (..., n_agents, obs_dim) observations."""
    *lead, n_agents, _ = obs.shape
    eye = np.eye(n_agents)
    hot = np.broadcast_to(eye, (*lead, n_agents, n_agents))
    return np.concatenate([obs, hot], axis=-1)


def _elu_inplace(x: np.ndarray) -> np.ndarray:
    np.expm1(x, out=x, where=x < 0.0)
    return x


def counterfactual_baselines_batch(q_all: np.ndarray, q_taken: np.ndarray,
                                   probs: np.ndarray, w1: np.ndarray,
                                   b1: np.ndarray, w2: np.ndarray,
                                   v: np.ndarray,
                                   pool: ArrayPool | None = None) -> np.ndarray:
    """Vectorized exact baselines for a flat batch of positions.

    q_all: (V, n, A); q_taken: (V, n); probs: (V, n, A); hypernet outputs
    w1 (V, n, E), b1/w2 (V, E), v (V,). One mixer hidden evaluation per
    candidate action, sharing the chosen-action preactivation.
    """
    pool = pool or ArrayPool()
    V, n, A = q_all.shape
    E = w2.shape[-1]
    pre_chosen = np.einsum("vn,vne->ve", q_taken, w1)
    pre_chosen += b1
    delta = q_all - q_taken[..., None]
    pre_sub = pool.get("cf_pre_sub", (V, n, A, E))
    np.multiply(delta[..., None], w1[:, :, None, :], out=pre_sub)
    pre_sub += pre_chosen[:, None, None, :]
    hid = _elu_inplace(pre_sub)
    q_tot_sub = np.einsum("vnae,ve->vna", hid, w2)
    q_tot_sub += v[:, None, None]
    return np.einsum("vna,vna->vn", probs, q_tot_sub)


def _take_actions(q: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]


def _masked_argmax(q: np.ndarray, avail: np.ndarray) -> np.ndarray:
    return np.where(avail > 0, q, -np.inf).argmax(axis=-1)


def _group_average(probs: np.ndarray) -> np.ndarray:
    group = probs.mean(axis=-2, keepdims=True)
    return group / group.sum(axis=-1, keepdims=True)


def _advantage_terms(q_all, actions, avail, states, mixer_net, mixer_params,
                     temperature, alpha, pool: ArrayPool | None = None):
    """Advantage pieces for a batch of positions with (..., n, A) utilities.

    Returns (advantage, probs, joint_q, baselines, kls); everything here is
    treated as constant by the backward pass.
    """
    lead = q_all.shape[:-2]
    n, A = q_all.shape[-2:]
    V = int(np.prod(lead)) if lead else 1
    q_flat = np.ascontiguousarray(q_all).reshape(V, n, A)
    avail_flat = np.ascontiguousarray(avail).reshape(V, n, A)
    act_flat = np.ascontiguousarray(actions).reshape(V, n)
    state_flat = np.ascontiguousarray(states).reshape(V, states.shape[-1])

    probs = boltzmann_probs(q_flat, avail_flat, temperature)
    q_taken = _take_actions(q_flat, act_flat)
    w1, b1, w2, v = mixer_net.hyper_outputs(mixer_params, state_flat)
    joint_q = MonotonicMixer.mix(w1, b1, w2, v, q_taken)
    baselines = counterfactual_baselines_batch(q_flat, q_taken, probs,
                                               w1, b1, w2, v, pool)
    group = _group_average(probs)
    kls = kl_terms(probs, np.broadcast_to(group, probs.shape))
    advantage = joint_q[..., None] - baselines - alpha * kls
    return (advantage.reshape(*lead, n), probs.reshape(*lead, n, A),
            joint_q.reshape(lead), baselines.reshape(*lead, n),
            kls.reshape(*lead, n))


def td_target(transition: Transition, nets: Networks, lam: float,
              gamma: float, cfg: LearnerConfig) -> float:
    """Bootstrapped target for one transition, from target networks only.

    The greedy joint next action is the agent-wise argmax of target
    utilities (exactly joint-greedy under the monotonic mixer); advantages
    inside the target use the target policies and are constants.
    """
    if transition.terminated:
        return float(transition.reward)
    inputs = encode_agent_inputs(transition.next_obs_history)  # (L, n, d)
    n = nets.n_agents
    q_seq, _, _ = nets.agent_net.forward(
        nets.target_agent, inputs, np.zeros((n, nets.agent_net.hidden)),
        with_cache=False)
    q_last = q_seq[-1]                       # (n, A)
    avail = transition.next_avail
    u_star = _masked_argmax(q_last, avail)   # (n,)
    adv, _, _, _, _ = _advantage_terms(
        q_last[None, None], u_star[None, None], avail[None, None],
        transition.next_state[None, None], nets.mixer_net, nets.target_mixer,
        cfg.policy_temperature, cfg.alpha)
    q_taken = q_last[np.arange(n), u_star]
    augmented = q_taken + lam * adv[0, 0]
    w1, b1, w2, v = nets.mixer_net.hyper_outputs(nets.target_mixer,
                                                 transition.next_state)
    q_tot = MonotonicMixer.mix(w1, b1, w2, v, augmented)
    return float(transition.reward + gamma * q_tot)


@dataclass
class LearnerForward:
    """Forward quantities of one learning step; advantages and targets are
    already detached constants.

    Policy quantities are stored compacted over the valid (step, batch)
    positions ``idx`` (indices into the flattened T*B grid) to avoid paying
    for padding.
    """

    y: np.ndarray             # (T, B)
    q_tot: np.ndarray         # (T, B)
    advantage: np.ndarray     # (T, B, n), zeros when unused
    q_online: np.ndarray      # (T, B, n, A)
    td_loss: float
    kl_loss: float
    policy_loss: float
    total_loss: float
    agent_cache: dict
    mixer_cache: dict
    mask: np.ndarray
    idx: np.ndarray           # valid positions in the T*B grid
    probs_c: np.ndarray | None  # (V, n, A) online policies at idx
    kls_c: np.ndarray | None    # (V, n)
    adv_c: np.ndarray | None    # (V, n)


@dataclass
class FrozenSignals:
    """Detached inputs for gradient checking: hold (y, advantage) fixed while
    parameters vary."""

    y: np.ndarray
    advantage: np.ndarray


def _compact(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(arr).reshape((-1,) + arr.shape[2:])
    return flat[idx]


def learner_forward(batch: EpisodeBatch, nets: Networks, cfg: LearnerConfig,
                    frozen: FrozenSignals | None = None) -> LearnerForward:
    T, B = batch.horizon, batch.size
    n = nets.n_agents
    need_policies = cfg.lam != 0.0 or cfg.beta > 0.0 or cfg.policy_term
    need_advantage = cfg.lam != 0.0 or cfg.policy_term
    pool = nets.pool

    inputs = encode_agent_inputs(batch.obs)            # (T+1, B, n, d)
    flat_in = inputs.reshape(T + 1, B * n, -1)
    h0 = np.zeros((B * n, nets.agent_net.hidden))

    q_on_flat, _, agent_cache = nets.agent_net.forward(
        nets.agent, flat_in[:T], h0, with_cache=True, pool=pool, pool_tag="online")
    q_online = q_on_flat.reshape(T, B, n, -1)

    mask = batch.mask
    idx = np.flatnonzero(mask.ravel() > 0)
    avail_c = _compact(batch.avail[:T], idx)
    actions_c = _compact(batch.actions, idx)
    state_c = _compact(batch.state[:T], idx)
    q_on_c = _compact(q_online, idx)

    probs_c = kls_c = adv_c = None
    if frozen is not None:
        y = frozen.y
        advantage = frozen.advantage
        adv_c = _compact(advantage, idx)
        if need_policies:
            probs_c = boltzmann_probs(q_on_c, avail_c, cfg.policy_temperature)
            kls_c = kl_terms(probs_c, np.broadcast_to(_group_average(probs_c),
                                                      probs_c.shape))
    else:
        q_tg_flat, _, _ = nets.agent_net.forward(
            nets.target_agent, flat_in, h0, with_cache=False,
            pool=pool, pool_tag="target")
        q_target = q_tg_flat.reshape(T + 1, B, n, -1)

        # target side only matters at valid non-terminal positions
        boot = np.flatnonzero((mask * ~batch.terminated).ravel() > 0)
        q_next_c = _compact(q_target[1:], boot)
        avail_next_c = _compact(batch.avail[1:T + 1], boot)
        state_next_c = _compact(batch.state[1:T + 1], boot)
        u_star_c = _masked_argmax(q_next_c, avail_next_c)
        if need_advantage:
            adv_next_c, _, _, _, _ = _advantage_terms(
                q_next_c, u_star_c, avail_next_c, state_next_c,
                nets.mixer_net, nets.target_mixer, cfg.policy_temperature,
                cfg.alpha, pool)
        else:
            adv_next_c = np.zeros(u_star_c.shape)
        q_next_taken_c = _take_actions(q_next_c, u_star_c)
        augmented_next_c = q_next_taken_c + cfg.lam * adv_next_c
        w1, b1, w2, v = nets.mixer_net.hyper_outputs(nets.target_mixer,
                                                     state_next_c)
        q_tot_next_c = MonotonicMixer.mix(w1, b1, w2, v, augmented_next_c)
        q_tot_next = np.zeros(T * B)
        q_tot_next[boot] = q_tot_next_c
        y = batch.rewards + cfg.gamma * q_tot_next.reshape(T, B)

        # online side advantages (constants in the gradient)
        if need_advantage:
            adv_c, probs_c, _, _, kls_c = _advantage_terms(
                q_on_c, actions_c, avail_c, state_c,
                nets.mixer_net, nets.mixer, cfg.policy_temperature, cfg.alpha,
                pool)
        elif need_policies:
            probs_c = boltzmann_probs(q_on_c, avail_c, cfg.policy_temperature)
            kls_c = kl_terms(probs_c, np.broadcast_to(_group_average(probs_c),
                                                      probs_c.shape))
        if adv_c is None:
            advantage = np.zeros((T, B, n))
            adv_c = np.zeros((idx.size, n))
        else:
            advantage = np.zeros((T * B, n))
            advantage[idx] = adv_c
            advantage = advantage.reshape(T, B, n)

    q_taken = _take_actions(q_online, batch.actions)
    augmented = q_taken + cfg.lam * advantage
    q_tot_flat, mixer_cache = nets.mixer_net.forward(
        nets.mixer, augmented.reshape(T * B, n),
        np.ascontiguousarray(batch.state[:T]).reshape(T * B, -1), with_cache=True)
    q_tot = q_tot_flat.reshape(T, B)

    denom = float(mask.sum())
    delta = q_tot - y
    td_loss = float(np.sum(mask * delta * delta) / denom)

    kl_loss = 0.0
    if need_policies and cfg.beta > 0.0:
        kl_loss = float(np.sum(kls_c) / denom)
    policy_loss = 0.0
    if cfg.policy_term:
        p_taken_c = _take_actions(probs_c, actions_c)
        policy_loss = float(np.sum(adv_c * (-np.log(p_taken_c))) / denom)

    total = td_loss + cfg.beta * kl_loss + cfg.policy_weight * policy_loss
    return LearnerForward(
        y=y, q_tot=q_tot, advantage=advantage, q_online=q_online,
        td_loss=td_loss, kl_loss=kl_loss, policy_loss=policy_loss,
        total_loss=total, agent_cache=agent_cache, mixer_cache=mixer_cache,
        mask=mask, idx=idx, probs_c=probs_c, kls_c=kls_c, adv_c=adv_c,
    )


def learner_backward(batch: EpisodeBatch, nets: Networks, cfg: LearnerConfig,
                     fwd: LearnerForward) -> Params:
    """Gradients of the total loss for the merged online parameter set."""
    T, B = batch.horizon, batch.size
    n = nets.n_agents
    mask = fwd.mask
    denom = float(mask.sum())
    idx = fwd.idx

    # TD term through the mixer
    dq_tot = (2.0 / denom) * mask * (fwd.q_tot - fwd.y)
    mixer_grads, dq_augmented = nets.mixer_net.backward(
        nets.mixer, fwd.mixer_cache, dq_tot.reshape(T * B))
    dq_taken = dq_augmented.reshape(T, B, n)  # advantage offset is constant

    dq_online = np.zeros_like(fwd.q_online)
    np.put_along_axis(dq_online, batch.actions[..., None],
                      dq_taken[..., None], axis=-1)

    # policy and KL terms through the Boltzmann policies, on valid positions
    if (cfg.policy_term or cfg.beta > 0.0) and fwd.probs_c is not None:
        probs = fwd.probs_c                                  # (V, n, A)
        actions_c = _compact(batch.actions, idx)
        dprobs = np.zeros_like(probs)
        if cfg.beta > 0.0:
            w = cfg.beta / denom
            group_raw = probs.mean(axis=-2)                  # (V, A)
            S = group_raw.sum(axis=-1, keepdims=True)
            group = group_raw / S
            floored = np.maximum(group, KL_FLOOR)
            support = probs > 0.0
            safe_p = np.where(support, probs, 1.0)
            dprobs += np.where(
                support,
                w * (np.log(safe_p) - np.log(floored)[..., None, :] + 1.0),
                0.0,
            )
            dgroup = -np.sum(np.where(support, w * probs, 0.0)
                             / floored[..., None, :], axis=-2)
            dgroup = np.where(group > KL_FLOOR, dgroup, 0.0)
            dgroup_raw = (dgroup - (dgroup * group).sum(axis=-1, keepdims=True)) / S
            dprobs += dgroup_raw[..., None, :] / n
        if cfg.policy_term:
            p_taken = _take_actions(probs, actions_c)
            coeff = -(cfg.policy_weight / denom) * fwd.adv_c / p_taken
            np.put_along_axis(
                dprobs, actions_c[..., None],
                np.take_along_axis(dprobs, actions_c[..., None], axis=-1)
                + coeff[..., None],
                axis=-1,
            )
        # softmax Jacobian back to utilities, scattered into the full grid
        inner = dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)
        dq_c = probs * inner / cfg.policy_temperature
        dq_flat = dq_online.reshape(T * B, n, -1)
        dq_flat[idx] += dq_c

    agent_grads = nets.agent_net.backward(
        nets.agent, fwd.agent_cache, dq_online.reshape(T, B * n, -1),
        pool=nets.pool, pool_tag="online_bwd")

    grads = {f"agent/{k}": v for k, v in agent_grads.items()}
    grads.update({f"mixer/{k}": v for k, v in mixer_grads.items()})
    return grads


def learner_step(batch: EpisodeBatch, nets: Networks, opt: OptimizerState,
                 cfg: LearnerConfig) -> LossReport:
    """One full learning update: forward, backward, clip, optimize."""
    fwd = learner_forward(batch, nets, cfg)
    if not math.isfinite(fwd.total_loss):
        raise NonFiniteLossError(
            f"loss diverged: td={fwd.td_loss} kl={fwd.kl_loss} "
            f"policy={fwd.policy_loss}")
    grads = learner_backward(batch, nets, cfg, fwd)
    grads, norm = nn.clip_gradients(grads, cfg.grad_norm_clip)
    nn.optimizer_step(opt, nets.merged_online(), grads)
    mean_adv = float(np.sum(fwd.adv_c) / fwd.adv_c.size) if fwd.adv_c is not None else 0.0
    return LossReport(
        td_loss=fwd.td_loss, kl_loss=fwd.kl_loss, policy_loss=fwd.policy_loss,
        total_loss=fwd.total_loss, grad_norm=norm, mean_advantage=mean_adv,
    )
