"""Latent/opponent-action correspondence check on a tiny preset game.

Setup: 3 states, 3 agents, 2 actions each, a 4-way categorical latent.  The
transition and reward tables are preset so that the other two agents' joint
action has a state-independent effect: it picks one of four reward levels and
shifts the next state, identically in every state.  The two other agents
follow preset stochastic policies and agent 0 explores uniformly.

The latent model consists of a prior net psi(z|s) and per-latent transition
and reward components whose state pathway is fixed by construction: the
reward is a per-latent offset plus a state/action base, and the transition
predicts the relative state shift with per-latent logits plus a state/action
base.  Keeping the latent pathway state-independent is what allows a global
latent/joint-action correspondence to emerge instead of one that is
re-encoded per state.

Training maximises the marginal likelihood of each experience with the
latent summed out exactly; gradients are posterior-weighted, so components
specialise.  Reward offsets are initialised at the k-means centres of the
observed rewards and refined alone for a warm-up phase before joint
training.  Afterwards each experience is assigned a latent sampled from the
posterior and the conditional matrices P(z | a_other) and P(a_other | z) are
estimated by counting; success means the argmax map from joint actions to
latent values is injective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .metrics import CorrespondenceMatrices, correspondence_counts, kmeans
from .streams import stream

N_STATES = 3
N_JOINT = 4        # two other agents with two actions each
N_LATENT = 4
REWARD_LEVELS = np.array([0.05, 0.30, 0.55, 0.80])
REWARD_SIGMA = 0.08


@dataclass
class VerifyResult:
    matrices: CorrespondenceMatrices
    injective: bool
    final_loss: float
    argmax_map: np.ndarray   # joint action -> latent index


@dataclass
class VerifyModel:
    psi: nn.Mlp          # state -> latent logits
    v: np.ndarray        # (Z,) per-latent reward offset
    b: np.ndarray        # (S, 2) state/action reward base
    U: np.ndarray        # (Z, S) per-latent shift logits
    C: np.ndarray        # (S, 2, S) state/action shift logits


def preset_game(seed: int):
    """(T, R, other_policies): the joint action of the other agents shifts
    the next state and sets the reward level, identically in every state."""
    T = np.zeros((N_STATES, 2, N_JOINT, N_STATES))
    R = np.zeros((N_STATES, 2, N_JOINT))
    rng = stream(seed, "verify", "base")
    base = rng.uniform(0.0, 1.0, size=(N_STATES, 2))
    for s in range(N_STATES):
        for a0 in range(2):
            for j in range(N_JOINT):
                row = np.full(N_STATES, 0.2 / N_STATES)
                row[(s + 1 + j) % N_STATES] += 0.8
                T[s, a0, j] = row
                R[s, a0, j] = np.clip(REWARD_LEVELS[j] + 0.05 * base[s, a0],
                                      0.0, 1.0)
    e = stream(seed, "verify", "policies").exponential(1.0, size=(2, N_STATES, 2))
    policies = e / e.sum(axis=-1, keepdims=True)
    return T, R, policies


def collect_experience(T, R, policies, n: int, rng):
    """Uniform exploration for agent 0; returns index arrays (s, a0, j, s', r)."""
    s = rng.integers(0, N_STATES, size=n)
    a0 = rng.integers(0, 2, size=n)
    u = rng.random((2, n))
    a1 = (u[0] > policies[0][s, 0]).astype(int)
    a2 = (u[1] > policies[1][s, 0]).astype(int)
    j = 2 * a1 + a2
    rows = T[s, a0, j]
    cdf = np.cumsum(rows, axis=1)
    s_next = np.minimum((cdf < rng.random(n)[:, None]).sum(axis=1), N_STATES - 1)
    r = R[s, a0, j]
    return s, a0, j, s_next, r


def _component_logliks(model: VerifyModel, s, a0, shift, r, inv_var: float):
    """(lp_reward, lp_shift, reward residuals, shift log-softmax): all per
    (sample, latent)."""
    n = len(s)
    rhat = model.v[None, :] + model.b[s, a0][:, None]           # (n, Z)
    lp_rew = -0.5 * inv_var * (rhat - r[:, None]) ** 2
    logits = model.U[None, :, :] + model.C[s, a0][:, None, :]   # (n, Z, S)
    lps = nn.log_softmax(logits, axis=-1)
    lp_shift = lps[np.arange(n)[:, None], np.arange(N_LATENT)[None, :],
                   shift[:, None]]
    return lp_rew, lp_shift, rhat, lps


def train_verify_model(s, a0, s_next, r, seed: int, steps: int = 3000,
                       batch: int = 128, warm_steps: int = 500):
    """Posterior-weighted marginal-likelihood training; returns (model,
    mean loss over the final 100 steps)."""
    shift = (s_next - s) % N_STATES
    init = stream(seed, "verify", "model")
    labels = kmeans(r[:, None], N_LATENT, stream(seed, "verify", "kmeans"))
    centres = np.sort(np.array([r[labels == c].mean() for c in range(N_LATENT)]))
    model = VerifyModel(
        psi=nn.mlp_init([N_STATES, 32, N_LATENT], "relu", init),
        v=centres,
        b=np.zeros((N_STATES, 2)),
        U=0.1 * init.standard_normal((N_LATENT, N_STATES)),
        C=np.zeros((N_STATES, 2, N_STATES)))
    adam_psi = nn.adam_init(model.psi.params(), 1e-3)
    adam_comp = nn.adam_init([model.v, model.b, model.U, model.C], 1e-2)
    rng = stream(seed, "verify", "train")
    inv_var = 1.0 / REWARD_SIGMA ** 2
    n_data = len(s)
    losses = []
    for step in range(steps):
        reward_only = step < warm_steps
        idx = rng.integers(0, n_data, size=batch)
        sb, ab, db, rb = s[idx], a0[idx], shift[idx], r[idx]
        n = len(idx)
        obs = np.eye(N_STATES)[sb]
        psi_out, psi_cache = nn.mlp_forward_cached(model.psi, obs)
        log_prior = nn.log_softmax(psi_out)
        lp_rew, lp_shift, rhat, lps = _component_logliks(
            model, sb, ab, db, rb, inv_var)

        joint = lp_rew - np.log(N_LATENT) if reward_only \
            else log_prior + lp_rew + lp_shift
        m = joint.max(axis=1, keepdims=True)
        log_marginal = m[:, 0] + np.log(np.exp(joint - m).sum(axis=1))
        q = np.exp(joint - log_marginal[:, None])
        losses.append(float(-log_marginal.mean()))

        gr = q * inv_var * (rhat - rb[:, None]) / n
        g_v = gr.sum(axis=0)
        g_b = np.zeros_like(model.b)
        np.add.at(g_b, (sb, ab), gr.sum(axis=1))
        if reward_only:
            nn.adam_step(adam_comp, [model.v, model.b, model.U, model.C],
                         [g_v, g_b, np.zeros_like(model.U),
                          np.zeros_like(model.C)])
            continue
        d_logits = np.exp(lps)
        d_logits[np.arange(n)[:, None], np.arange(N_LATENT)[None, :],
                 db[:, None]] -= 1.0
        d_logits *= q[:, :, None] / n
        g_U = d_logits.sum(axis=0)
        g_C = np.zeros_like(model.C)
        np.add.at(g_C, (sb, ab), d_logits.sum(axis=1))
        g_psi, _ = nn.mlp_backward(model.psi, psi_cache,
                                   (np.exp(log_prior) - q) / n)
        nn.adam_step(adam_comp, [model.v, model.b, model.U, model.C],
                     [g_v, g_b, g_U, g_C])
        nn.adam_step(adam_psi, model.psi.params(), g_psi)
    return model, float(np.mean(losses[-100:]))


def posterior_latents(model: VerifyModel, s, a0, s_next, r, rng) -> np.ndarray:
    """Sample a latent per experience from the trained posterior."""
    shift = (s_next - s) % N_STATES
    log_prior = nn.log_softmax(nn.mlp_forward(model.psi, np.eye(N_STATES)[s]))
    lp_rew, lp_shift, _, _ = _component_logliks(model, s, a0, shift, r,
                                                1.0 / REWARD_SIGMA ** 2)
    return nn.categorical_sample_batch(log_prior + lp_rew + lp_shift, rng)


def run_correspondence_experiment(seed: int, n_experience: int = 4000,
                                  train_steps: int = 3000) -> VerifyResult:
    T, R, policies = preset_game(seed)
    s, a0, j, s_next, r = collect_experience(T, R, policies, n_experience,
                                             stream(seed, "verify", "data"))
    model, final_loss = train_verify_model(s, a0, s_next, r, seed,
                                           steps=train_steps)
    z_idx = posterior_latents(model, s, a0, s_next, r,
                              stream(seed, "verify", "assign"))
    matrices = correspondence_counts(z_idx, j, N_LATENT, N_JOINT)
    argmax_map = matrices.z_given_a.argmax(axis=1)
    injective = len(set(argmax_map.tolist())) == N_JOINT
    return VerifyResult(matrices, injective, final_loss, argmax_map)
