"""Independent PPO: per-agent actor/critic MLPs, GAE, and the clipped
surrogate update.  Nothing here is ever shared between agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Mlp, ShapeError


@dataclass
class PpoHyper:
    gamma: float = 0.98
    lam: float = 0.94
    clip: float = 0.2
    value_clip: float = 10.0     # unusually wide clip radius; applied literally
    c_entropy: float = 3e-4
    c_value: float = 0.5
    max_grad_norm: float = 0.6
    minibatch: int = 32
    epochs: int = 10
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3

    def validate(self) -> None:
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip <= 0 or self.minibatch <= 0 or self.epochs <= 0:
            raise ValueError("clip, minibatch, and epochs must be positive")


@dataclass
class Trajectory:
    """One contiguous (possibly truncated) experience segment."""

    obs: np.ndarray        # (T, d)
    actions: np.ndarray    # (T,) ints or (T, act_dim)
    rewards: np.ndarray    # (T,)
    values: np.ndarray     # (T,)
    log_probs: np.ndarray  # (T,)
    bootstrap_value: float = 0.0

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass
class AgentPolicy:
    actor: Mlp
    critic: Mlp
    action_kind: str                 # "discrete" | "continuous"
    log_std: np.ndarray | None = None  # state-independent, continuous only
    adam_actor: nn.AdamState = None
    adam_critic: nn.AdamState = None

    def actor_params(self) -> list:
        params = self.actor.params()
        if self.action_kind == "continuous":
            params = params + [self.log_std]
        return params


def make_policy(obs_dim: int, action_kind: str, act_dim: int, hp: PpoHyper,
                rng) -> AgentPolicy:
    """Actor and critic with (128,128) tanh hidden layers."""
    actor = nn.mlp_init([obs_dim, 128, 128, act_dim], "tanh", rng, final_scale=0.01)
    critic = nn.mlp_init([obs_dim, 128, 128, 1], "tanh", rng)
    log_std = np.zeros(act_dim) if action_kind == "continuous" else None
    policy = AgentPolicy(actor, critic, action_kind, log_std)
    policy.adam_actor = nn.adam_init(policy.actor_params(), hp.actor_lr)
    policy.adam_critic = nn.adam_init(critic.params(), hp.critic_lr)
    return policy


# ---------------------------------------------------------------------------
# acting


def act_batch(policy: AgentPolicy, obs: np.ndarray, rng):
    """Sample actions for a batch of observations.

    Returns (actions, log_probs, values).
    """
    out = nn.mlp_forward(policy.actor, obs)
    values = nn.mlp_forward(policy.critic, obs)[:, 0]
    if policy.action_kind == "discrete":
        actions = nn.categorical_sample_batch(out, rng)
        lp = nn.log_softmax(out)[np.arange(len(actions)), actions]
    else:
        std = np.exp(policy.log_std)
        actions = out + std * rng.standard_normal(out.shape)
        lp = nn.gaussian_logprob_batch(out, policy.log_std, actions)
    return actions, lp, values


def act(policy: AgentPolicy, obs, rng):
    """Single-observation convenience wrapper: (action, log_prob, value)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1 or obs.shape[0] != policy.actor.in_dim:
        raise ShapeError(f"observation shape {obs.shape} does not match actor input")
    actions, lp, values = act_batch(policy, obs[None, :], rng)
    action = int(actions[0]) if policy.action_kind == "discrete" else actions[0]
    return action, float(lp[0]), float(values[0])


# ---------------------------------------------------------------------------
# advantage estimation


def compute_gae(rewards, values, bootstrap_value: float, gamma: float, lam: float):
    """A_t = delta_t + gamma*lam*A_{t+1}; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty trajectory")
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rewards + gamma * next_values - values
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values


def compute_gae_batch(rewards, values, bootstrap_values, gamma: float, lam: float):
    """Row-wise GAE over (n_traj, T) arrays."""
    next_values = np.concatenate([values[:, 1:], bootstrap_values[:, None]], axis=1)
    deltas = rewards + gamma * next_values - values
    adv = np.empty_like(deltas)
    acc = np.zeros(deltas.shape[0])
    for t in range(deltas.shape[1] - 1, -1, -1):
        acc = deltas[:, t] + gamma * lam * acc
        adv[:, t] = acc
    return adv, adv + values


def flatten_trajectories(trajs: list, hp: PpoHyper) -> dict:
    """Run GAE per trajectory and stack everything into one update batch."""
    if not trajs:
        raise ValueError("no trajectories")
    advs, rets = [], []
    for tr in trajs:
        a, r = compute_gae(tr.rewards, tr.values, tr.bootstrap_value,
                           hp.gamma, hp.lam)
        advs.append(a)
        rets.append(r)
    return {
        "obs": np.concatenate([t.obs for t in trajs]),
        "actions": np.concatenate([t.actions for t in trajs]),
        "log_probs": np.concatenate([t.log_probs for t in trajs]),
        "values": np.concatenate([t.values for t in trajs]),
        "adv": np.concatenate(advs),
        "ret": np.concatenate(rets),
    }


# ---------------------------------------------------------------------------
# update


def _actor_minibatch(policy, hp, obs, actions, logp_old, adv):
    """Clipped-surrogate step on one minibatch; returns (loss, entropy)."""
    n = obs.shape[0]
    out, cache = nn.mlp_forward_cached(policy.actor, obs)
    if policy.action_kind == "discrete":
        lp_all = nn.log_softmax(out)
        p = np.exp(lp_all)
        idx = np.arange(n)
        lp = lp_all[idx, actions]
        entropy = -(p * lp_all).sum(axis=1)
    else:
        std = np.exp(policy.log_std)
        zerr = (actions - out) / std
        lp = nn.gaussian_logprob_batch(out, policy.log_std, actions)
        entropy = np.full(n, float(np.sum(policy.log_std + 0.5 * (1.0 + nn.LOG_2PI))))

    ratio = np.exp(lp - logp_old)
    clipped = np.clip(ratio, 1.0 - hp.clip, 1.0 + hp.clip)
    unclipped_active = ratio * adv <= clipped * adv
    surrogate = np.minimum(ratio * adv, clipped * adv)
    loss = -surrogate.mean() - hp.c_entropy * entropy.mean()

    # d loss / d lp: only the unclipped branch carries gradient
    g_lp = np.where(unclipped_active, ratio * adv, 0.0) / n
    if policy.action_kind == "discrete":
        d_out = -g_lp[:, None] * (np.eye(out.shape[1])[actions] - p)
        d_out += (hp.c_entropy / n) * p * (lp_all + entropy[:, None])
        grads, _ = nn.mlp_backward(policy.actor, cache, d_out)
    else:
        d_mean = -g_lp[:, None] * (zerr / std)
        grads, _ = nn.mlp_backward(policy.actor, cache, d_mean)
        d_log_std = (-g_lp[:, None] * (zerr * zerr - 1.0)).sum(axis=0)
        d_log_std -= hp.c_entropy  # entropy bonus: dH/dlog_std = 1 per dim
        grads = grads + [d_log_std]

    nn.clip_grad_norm(grads, hp.max_grad_norm)
    nn.adam_step(policy.adam_actor, policy.actor_params(), grads)
    return float(loss), float(entropy.mean())


def _critic_minibatch(policy, hp, obs, ret, val_old):
    n = obs.shape[0]
    out, cache = nn.mlp_forward_cached(policy.critic, obs)
    v = out[:, 0]
    v_clip = val_old + np.clip(v - val_old, -hp.value_clip, hp.value_clip)
    l_plain = (v - ret) ** 2
    l_clip = (v_clip - ret) ** 2
    loss = hp.c_value * np.maximum(l_plain, l_clip).mean()
    inside = np.abs(v - val_old) <= hp.value_clip
    dv = np.where(l_plain >= l_clip, 2.0 * (v - ret),
                  np.where(inside, 2.0 * (v_clip - ret), 0.0))
    d_out = (hp.c_value / n) * dv[:, None]
    grads, _ = nn.mlp_backward(policy.critic, cache, d_out)
    nn.clip_grad_norm(grads, hp.max_grad_norm)
    nn.adam_step(policy.adam_critic, policy.critic.params(), grads)
    return float(loss)


def ppo_update(policy: AgentPolicy, trajs: list, hp: PpoHyper, rng) -> dict:
    """Run the configured epochs of minibatch updates; returns mean losses."""
    batch = trajs if isinstance(trajs, dict) else flatten_trajectories(trajs, hp)
    adv = batch["adv"]
    adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    n = len(adv)
    actor_losses, critic_losses, entropies = [], [], []
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hp.minibatch):
            mb = order[lo:lo + hp.minibatch]
            a_loss, ent = _actor_minibatch(
                policy, hp, batch["obs"][mb], batch["actions"][mb],
                batch["log_probs"][mb], adv[mb])
            c_loss = _critic_minibatch(
                policy, hp, batch["obs"][mb], batch["ret"][mb],
                batch["values"][mb])
            if not (np.isfinite(a_loss) and np.isfinite(c_loss)):
                raise nn.NumericError(
                    f"non-finite PPO loss (actor={a_loss}, critic={c_loss})")
            actor_losses.append(a_loss)
            critic_losses.append(c_loss)
            entropies.append(ent)
    return {
        "actor_loss": float(np.mean(actor_losses)),
        "critic_loss": float(np.mean(critic_losses)),
        "entropy": float(np.mean(entropies)),
    }
