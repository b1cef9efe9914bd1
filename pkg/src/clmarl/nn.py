"""Minimal double-precision function approximators with explicit gradients.

Everything here is numpy float64 and deterministic given (seed, inputs):
a recurrent utility network (affine encoder, GRU cell, linear head), a
state-conditioned monotonic mixing network whose effective weights pass
through an absolute value, global-norm gradient clipping, an
adaptive-moment optimizer, and hard target synchronization. Backward
passes are written by hand for these fixed architectures and are verified
against central finite differences in the test suite.

Parameters and gradients travel as flat ``dict[str, np.ndarray]`` keyed by
layer name, which keeps clipping, optimization, target sync, and
checkpointing uniform across networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_FORMAT = "clmarl-params-v1"


class ShapeMismatchError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


class ArrayPool:
    """Reusable float64 scratch buffers keyed by tag.

    Buffers are overwritten by the next request with the same tag, so their
    contents are only valid within one forward/backward round; callers that
    mutate parameters concurrently are outside the supported contract anyway.
    """

    def __init__(self) -> None:
        self._store: dict[str, np.ndarray] = {}

    def get(self, tag: str, shape: tuple) -> np.ndarray:
        arr = self._store.get(tag)
        if arr is None or arr.shape != shape:
            arr = np.empty(shape)
            self._store[tag] = arr
        return arr


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _elu(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    np.expm1(x, out=out, where=x < 0.0)
    return out


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols])


class AgentNet:
    """Recurrent per-agent utility network.

    Encoder: relu(obs @ enc_W + enc_b); GRU cell of width ``hidden``; head
    producing one utility per action. ``forward`` consumes a whole
    (T, B, obs_dim) sequence, ``step`` advances a single timestep for
    rollouts. Gate layout in the fused GRU matrices is [update, reset,
    candidate]; the reset gate multiplies the hidden contribution of the
    candidate only.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 64) -> None:
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden

    def init_params(self, rng: np.random.Generator) -> Params:
        h, d, a = self.hidden, self.obs_dim, self.n_actions
        return {
            "enc_W": _uniform_fan_in(rng, d, (d, h)),
            "enc_b": _uniform_fan_in(rng, d, (h,)),
            "gru_W": _uniform_fan_in(rng, h, (h, 3 * h)),
            "gru_U": np.concatenate(
                [_orthogonal(rng, h, h) for _ in range(3)], axis=1),
            "gru_b": np.zeros(3 * h),
            "head_W": _uniform_fan_in(rng, h, (h, a)),
            "head_b": _uniform_fan_in(rng, h, (a,)),
        }

    def _check(self, obs: np.ndarray) -> None:
        if obs.shape[-1] != self.obs_dim:
            raise ShapeMismatchError(
                f"expected obs dim {self.obs_dim}, got {obs.shape[-1]}")

    def step(self, params: Params, obs_t: np.ndarray,
             h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single-step forward without cache; used for action selection."""
        self._check(obs_t)
        hid = self.hidden
        x = np.maximum(obs_t @ params["enc_W"] + params["enc_b"], 0.0)
        gx = x @ params["gru_W"] + params["gru_b"]
        gh = h @ params["gru_U"]
        z = _sigmoid(gx[..., :hid] + gh[..., :hid])
        r = _sigmoid(gx[..., hid:2 * hid] + gh[..., hid:2 * hid])
        n = np.tanh(gx[..., 2 * hid:] + r * gh[..., 2 * hid:])
        h_new = (1.0 - z) * n + z * h
        q = h_new @ params["head_W"] + params["head_b"]
        return q, h_new

    def forward(self, params: Params, obs: np.ndarray, h0: np.ndarray,
                with_cache: bool = True, pool: ArrayPool | None = None,
                pool_tag: str = "agent"):
        """Run the full sequence; returns (q, h_T, cache).

        obs: (T, B, obs_dim); h0: (B, hidden); q: (T, B, n_actions).
        The cache holds per-step activations for ``backward`` and is None
        when with_cache is False. With a pool, cache and output buffers are
        reused across calls sharing the pool_tag; they stay valid until the
        next such call.

        Input-side affine maps have no recurrent dependency, so the encoder
        and the x-part of the gates run as single whole-sequence matmuls;
        only the hidden-side contribution loops over time.
        """
        self._check(obs)
        T, B, _ = obs.shape
        hid = self.hidden

        def buf(name, shape):
            if pool is None:
                return np.empty(shape)
            return pool.get(f"{pool_tag}/{name}", shape)

        flat_obs = obs.reshape(T * B, -1)
        x_all = buf("x_all", (T * B, hid))
        np.matmul(flat_obs, params["enc_W"], out=x_all)
        x_all += params["enc_b"]
        np.maximum(x_all, 0.0, out=x_all)
        gx_flat = buf("gx", (T * B, 3 * hid))
        np.matmul(x_all, params["gru_W"], out=gx_flat)
        gx_flat += params["gru_b"]
        gx_all = gx_flat.reshape(T, B, 3 * hid)

        h = h0
        h_all = buf("h", (T, B, hid))
        cache = None
        if with_cache:
            cache = {
                "obs": obs,
                "x": x_all.reshape(T, B, hid),
                "z": buf("z", (T, B, hid)),
                "r": buf("r", (T, B, hid)),
                "n": buf("n", (T, B, hid)),
                "gh_n": buf("gh_n", (T, B, hid)),
                "h0": h0,
                "h": h_all,
            }
        for t in range(T):
            gx = gx_all[t]
            gh = h @ params["gru_U"]
            z = _sigmoid(gx[:, :hid] + gh[:, :hid])
            r = _sigmoid(gx[:, hid:2 * hid] + gh[:, hid:2 * hid])
            gh_n = gh[:, 2 * hid:]
            n = np.tanh(gx[:, 2 * hid:] + r * gh_n)
            h = (1.0 - z) * n + z * h
            h_all[t] = h
            if with_cache:
                cache["z"][t] = z
                cache["r"][t] = r
                cache["n"][t] = n
                cache["gh_n"][t] = gh_n
        q_flat = buf("q", (T * B, self.n_actions))
        np.matmul(h_all.reshape(T * B, hid), params["head_W"], out=q_flat)
        q_flat += params["head_b"]
        return q_flat.reshape(T, B, self.n_actions), h_all[T - 1].copy(), cache

    def backward(self, params: Params, cache: dict, dq: np.ndarray,
                 dh_last: np.ndarray | None = None,
                 pool: ArrayPool | None = None,
                 pool_tag: str = "agent") -> Params:
        """Backpropagate through time given dLoss/dq (T, B, n_actions).

        Only the recurrent chain loops; all parameter-gradient contractions
        batch over the whole sequence.
        """
        obs = cache["obs"]
        T, B, _ = obs.shape
        hid = self.hidden
        U_T = params["gru_U"].T

        def buf(name, shape):
            if pool is None:
                return np.empty(shape)
            return pool.get(f"{pool_tag}/{name}", shape)

        h_all = cache["h"]
        dq_flat = dq.reshape(T * B, -1)
        dhq_flat = buf("dhq", (T * B, hid))
        np.matmul(dq_flat, params["head_W"].T, out=dhq_flat)
        dh_from_q = dhq_flat.reshape(T, B, hid)

        dh = dh_from_q[T - 1].copy() if dh_last is None else dh_from_q[T - 1] + dh_last
        dgx_all = buf("dgx", (T, B, 3 * hid))
        dgh_all = buf("dgh", (T, B, 3 * hid))
        for t in range(T - 1, -1, -1):
            z, r = cache["z"][t], cache["r"][t]
            n, gh_n = cache["n"][t], cache["gh_n"][t]
            h_prev = cache["h"][t - 1] if t > 0 else cache["h0"]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dh_prev = dh * z
            da_n = dn * (1.0 - n * n)
            dr = da_n * gh_n
            dgx = dgx_all[t]
            dgh = dgh_all[t]
            dgx[:, :hid] = dz * z * (1.0 - z)
            dgx[:, hid:2 * hid] = dr * r * (1.0 - r)
            dgx[:, 2 * hid:] = da_n
            dgh[:, :2 * hid] = dgx[:, :2 * hid]
            dgh[:, 2 * hid:] = da_n * r
            dh_prev += dgh @ U_T
            if t > 0:
                dh = dh_prev + dh_from_q[t - 1]
        # batched parameter contractions
        x_flat = cache["x"].reshape(T * B, hid)
        h_flat = h_all.reshape(T * B, hid)
        h_prev_flat = np.concatenate(
            [cache["h0"][None], h_all[:T - 1]], axis=0).reshape(T * B, hid)
        dgx_flat = dgx_all.reshape(T * B, 3 * hid)
        dgh_flat = dgh_all.reshape(T * B, 3 * hid)
        dx = dgx_flat @ params["gru_W"].T
        dx *= x_flat > 0.0  # relu mask; encoder output is exactly 0 where inactive
        grads = {
            "head_W": h_flat.T @ dq_flat,
            "head_b": dq_flat.sum(axis=0),
            "gru_W": x_flat.T @ dgx_flat,
            "gru_b": dgx_flat.sum(axis=0),
            "gru_U": h_prev_flat.T @ dgh_flat,
            "enc_W": obs.reshape(T * B, -1).T @ dx,
            "enc_b": dx.sum(axis=0),
        }
        return grads


class MonotonicMixer:
    """State-conditioned mixer, nondecreasing in every agent utility.

    Hypernetworks map the global state to the mixing weights of a one-hidden
    layer network (width ``embed``); both weight layers pass through an
    absolute value, and the hidden activation is ELU (strictly increasing),
    so dQ_tot/dq_i >= 0 holds structurally for every parameter setting. A
    separate two-layer state head provides the additive state value.
    """

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32) -> None:
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed

    def init_params(self, rng: np.random.Generator) -> Params:
        s, n, e = self.state_dim, self.n_agents, self.embed
        return {
            "hw1_W": _uniform_fan_in(rng, s, (s, n * e)),
            "hw1_b": _uniform_fan_in(rng, s, (n * e,)),
            "hb1_W": _uniform_fan_in(rng, s, (s, e)),
            "hb1_b": _uniform_fan_in(rng, s, (e,)),
            "hw2_W": _uniform_fan_in(rng, s, (s, e)),
            "hw2_b": _uniform_fan_in(rng, s, (e,)),
            "hv1_W": _uniform_fan_in(rng, s, (s, e)),
            "hv1_b": _uniform_fan_in(rng, s, (e,)),
            "hv2_W": _uniform_fan_in(rng, e, (e, 1)),
            "hv2_b": _uniform_fan_in(rng, e, (1,)),
        }

    def hyper_outputs(self, params: Params, state: np.ndarray):
        """Hypernetwork outputs for a batch of states.

        Returns (w1, b1, w2, v) with w1: (..., n_agents, embed), b1/w2:
        (..., embed), v: (...,). Reused by counterfactual sweeps that
        re-mix many utility vectors under one state.
        """
        lead = state.shape[:-1]
        w1 = np.abs(state @ params["hw1_W"] + params["hw1_b"])
        w1 = w1.reshape(*lead, self.n_agents, self.embed)
        b1 = state @ params["hb1_W"] + params["hb1_b"]
        w2 = np.abs(state @ params["hw2_W"] + params["hw2_b"])
        vh = np.maximum(state @ params["hv1_W"] + params["hv1_b"], 0.0)
        v = (vh @ params["hv2_W"])[..., 0] + params["hv2_b"][0]
        return w1, b1, w2, v

    @staticmethod
    def mix(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, v: np.ndarray,
            qs: np.ndarray) -> np.ndarray:
        """Forward mix from precomputed hypernet outputs; qs: (..., n_agents)."""
        pre = np.einsum("...n,...ne->...e", qs, w1) + b1
        return np.einsum("...e,...e->...", _elu(pre), w2) + v

    def forward(self, params: Params, qs: np.ndarray, state: np.ndarray,
                with_cache: bool = True):
        if qs.shape[-1] != self.n_agents:
            raise ShapeMismatchError(
                f"expected {self.n_agents} utilities, got {qs.shape[-1]}")
        if state.shape[-1] != self.state_dim:
            raise ShapeMismatchError(
                f"expected state dim {self.state_dim}, got {state.shape[-1]}")
        w1_raw = state @ params["hw1_W"] + params["hw1_b"]
        w1 = np.abs(w1_raw).reshape(*state.shape[:-1], self.n_agents, self.embed)
        b1 = state @ params["hb1_W"] + params["hb1_b"]
        pre = np.einsum("...n,...ne->...e", qs, w1) + b1
        hid = _elu(pre)
        w2_raw = state @ params["hw2_W"] + params["hw2_b"]
        w2 = np.abs(w2_raw)
        vh = np.maximum(state @ params["hv1_W"] + params["hv1_b"], 0.0)
        v = (vh @ params["hv2_W"])[..., 0] + params["hv2_b"][0]
        qtot = np.einsum("...e,...e->...", hid, w2) + v
        cache = None
        if with_cache:
            cache = {"qs": qs, "state": state, "w1_raw": w1_raw, "w1": w1,
                     "pre": pre, "hid": hid, "w2_raw": w2_raw, "w2": w2, "vh": vh}
        return qtot, cache

    def backward(self, params: Params, cache: dict,
                 dqtot: np.ndarray) -> tuple[Params, np.ndarray]:
        """Returns (param grads, dLoss/dqs). dqtot has the mix's leading shape."""
        qs, state = cache["qs"], cache["state"]
        lead = state.shape[:-1]
        flat = int(np.prod(lead)) if lead else 1
        s2 = state.reshape(flat, self.state_dim)
        dq = dqtot.reshape(flat)
        grads = {k: np.zeros_like(v) for k, v in params.items()}

        # state value head
        vh = cache["vh"].reshape(flat, self.embed)
        grads["hv2_W"] += vh.T @ dq[:, None]
        grads["hv2_b"] += np.array([dq.sum()])
        dvh = dq[:, None] @ params["hv2_W"].T
        dvh *= vh > 0.0
        grads["hv1_W"] += s2.T @ dvh
        grads["hv1_b"] += dvh.sum(axis=0)

        # second mixing layer
        hid = cache["hid"].reshape(flat, self.embed)
        w2 = cache["w2"].reshape(flat, self.embed)
        w2_raw = cache["w2_raw"].reshape(flat, self.embed)
        dw2 = dq[:, None] * hid * np.sign(w2_raw)
        grads["hw2_W"] += s2.T @ dw2
        grads["hw2_b"] += dw2.sum(axis=0)
        dhid = dq[:, None] * w2

        # elu derivative: 1 above zero, hid + 1 below (hid stores exp(x) - 1)
        pre = cache["pre"].reshape(flat, self.embed)
        dpre = dhid * np.where(pre > 0.0, 1.0, hid + 1.0)
        grads["hb1_W"] += s2.T @ dpre
        grads["hb1_b"] += dpre.sum(axis=0)

        # first mixing layer
        q2 = qs.reshape(flat, self.n_agents)
        w1 = cache["w1"].reshape(flat, self.n_agents, self.embed)
        w1_raw = cache["w1_raw"].reshape(flat, self.n_agents * self.embed)
        dw1 = np.einsum("le,ln->lne", dpre, q2).reshape(flat, -1) * np.sign(w1_raw)
        grads["hw1_W"] += s2.T @ dw1
        grads["hw1_b"] += dw1.sum(axis=0)
        dqs = np.einsum("le,lne->ln", dpre, w1).reshape(qs.shape)
        return grads, dqs


def clip_gradients(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (grads, pre-clip global norm); scaling happens in place.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators; one slot per parameter key."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = None
    v: Params = None

    @classmethod
    def for_params(cls, params: Params, lr: float = 5e-4) -> "OptimizerState":
        return cls(lr=lr,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(state: OptimizerState, params: Params, grads: Params) -> Params:
    """One adaptive-moment update with bias correction, in place."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {key}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for key, p in params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def sync_targets(online: Params, target: Params) -> None:
    """Hard copy online parameters into the target set, bit for bit."""
    if online.keys() != target.keys():
        raise ShapeMismatchError("parameter sets have different keys")
    for key, src in online.items():
        if target[key].shape != src.shape:
            raise ShapeMismatchError(
                f"{key}: target shape {target[key].shape} != {src.shape}")
        np.copyto(target[key], src)


def clone_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# --- checkpoint format -------------------------------------------------------
#
# <name>.bin       raw little-endian float64 tensors, concatenated
# <name>.manifest  text: first line the format id, then one line per tensor:
#                  "<key> <dtype> <dim0xdim1x...> <byte offset> <byte length>"

def save_params(params: Params, bin_path: str, manifest_path: str) -> None:
    keys = sorted(params)
    offset = 0
    lines = [CHECKPOINT_FORMAT]
    with open(bin_path, "wb") as fh:
        for key in keys:
            arr = np.ascontiguousarray(params[key], dtype="<f8")
            data = arr.tobytes()
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{key} float64 {shape} {offset} {len(data)}")
            fh.write(data)
            offset += len(data)
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(bin_path: str, manifest_path: str) -> Params:
    with open(manifest_path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {lines[:1]}")
    blob = open(bin_path, "rb").read()
    params: Params = {}
    for line in lines[1:]:
        key, dtype, shape_text, offset, length = line.split()
        if dtype != "float64":
            raise ValueError(f"unsupported dtype {dtype} for {key}")
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
        start, n = int(offset), int(length)
        arr = np.frombuffer(blob[start:start + n], dtype="<f8").reshape(shape)
        params[key] = arr.astype(np.float64, copy=True)
    return params


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(vec: np.ndarray, like: Params) -> Params:
    out: Params = {}
    pos = 0
    for key in sorted(like):
        size = like[key].size
        out[key] = vec[pos:pos + size].reshape(like[key].shape).copy()
        pos += size
    return out
