"""Per-agent environment model: transition and reward nets with ensemble
heads, a window of latent functions over the last ``l`` policy rollouts, a
latent prediction net, and branched rollout generation.

The latent head comes in three flavours: ``det`` (vector used as z directly,
with an L2 penalty on z in the model loss), ``cat`` (categorical over a small
latent alphabet, trained by exact expectation over z), and ``gauss``
(diagonal Gaussian, reparameterised).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Mlp
from .ppo import AgentPolicy, act_batch


class ContractError(RuntimeError):
    pass


@dataclass
class ModelHyper:
    l: int = 8                 # latent window length (policy rollouts kept)
    h: int = 8                 # real steps per branched trajectory
    k: int = 4                 # model steps appended per branched trajectory
    c_trans: float = 10.0      # weight of the next-obs likelihood term
    model_batch: int = 64
    pred_batch: int = 32
    psi_lr: float = 1e-5
    pred_lr: float = 1e-4
    trans_lr: float = 1e-4
    rew_lr: float = 1e-4
    z_dim: int = 3
    latent_kind: str = "det"   # det | cat | gauss
    n_ensemble: int = 3
    l2_coef: float = 1e-3      # penalty on deterministic latents
    model_steps: int = 100     # gradient steps per round for trans/rew/psi
    pred_steps: int = 50       # gradient steps per round for the predictor

    def validate(self) -> None:
        if self.l < 2 or self.h < 1 or self.k < 0 or self.c_trans <= 0:
            raise ValueError("invalid model hyperparameters")
        if self.latent_kind not in ("det", "cat", "gauss"):
            raise ValueError(f"unknown latent kind {self.latent_kind!r}")


@dataclass
class RolloutBuffer:
    """One policy-rollout round, episode-major arrays of shape (E, T, ...)."""

    obs_enc: np.ndarray
    next_obs_enc: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    obs_idx: np.ndarray | None = None       # tabular only
    next_obs_idx: np.ndarray | None = None

    @property
    def n_episodes(self) -> int:
        return self.rewards.shape[0]

    @property
    def episode_len(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_transitions(self) -> int:
        return self.rewards.size

    def flat(self) -> dict:
        d = self.obs_enc.shape[-1]
        out = {
            "obs_enc": self.obs_enc.reshape(-1, d),
            "next_obs_enc": self.next_obs_enc.reshape(-1, d),
            "actions": self.actions.reshape(self.rewards.size, -1)
            if self.actions.ndim == 3 else self.actions.ravel(),
            "rewards": self.rewards.ravel(),
        }
        if self.next_obs_idx is not None:
            out["next_obs_idx"] = self.next_obs_idx.ravel()
        return out


@dataclass
class ModelBuffer:
    """The ordered window D^1..D^l, oldest first."""

    capacity: int
    slots: list = field(default_factory=list)

    def push(self, buf: RolloutBuffer) -> None:
        if len(self.slots) >= self.capacity:
            raise ContractError("buffer window full; shift before pushing")
        self.slots.append(buf)

    def shift(self) -> None:
        if len(self.slots) >= self.capacity:
            self.slots.pop(0)

    def __len__(self) -> int:
        return len(self.slots)


# ---------------------------------------------------------------------------
# ensemble net


@dataclass
class EnsembleNet:
    """Shared trunk with ``n`` independent linear last-layer heads."""

    trunk: Mlp
    heads_w: list
    heads_b: list

    @property
    def n_heads(self) -> int:
        return len(self.heads_w)

    def params(self) -> list:
        out = self.trunk.params()
        for w, b in zip(self.heads_w, self.heads_b):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "EnsembleNet":
        return EnsembleNet(self.trunk.copy(),
                           [w.copy() for w in self.heads_w],
                           [b.copy() for b in self.heads_b])


def ensemble_init(in_dim, hidden, out_dim, n_heads, rng) -> EnsembleNet:
    trunk = nn.mlp_init([in_dim] + list(hidden), "relu", rng, activate_last=True)
    heads_w, heads_b = [], []
    limit = np.sqrt(6.0 / (hidden[-1] + out_dim))
    for _ in range(n_heads):
        heads_w.append(rng.uniform(-limit, limit, size=(out_dim, hidden[-1])))
        heads_b.append(np.zeros(out_dim))
    return EnsembleNet(trunk, heads_w, heads_b)


def ensemble_forward_all(net: EnsembleNet, X):
    """Returns (per-head outputs (n_heads, n, out), trunk cache)."""
    H, cache = nn.mlp_forward_cached(net.trunk, X)
    outs = np.stack([H @ w.T + b for w, b in zip(net.heads_w, net.heads_b)])
    return outs, (H, cache)

def ensemble_backward(net: EnsembleNet, cache, d_outs):
    """d_outs: (n_heads, n, out) upstream; returns grads in params() order
    plus the input gradient."""
    H, trunk_cache = cache
    dH = np.zeros_like(H)
    head_grads = []
    for i in range(net.n_heads):
        dY = d_outs[i]
        head_grads.append(dY.T @ H)
        head_grads.append(dY.sum(axis=0))
        dH += dY @ net.heads_w[i]
    trunk_grads, dX = nn.mlp_backward(net.trunk, trunk_cache, dH)
    return trunk_grads + head_grads, dX


# ---------------------------------------------------------------------------
# environment model


@dataclass
class EnvModel:
    obs_dim: int               # encoded observation size
    act_enc_dim: int
    n_actions: int | None      # None => continuous actions fed raw
    obs_is_index: bool         # tabular: categorical next-obs head over obs_dim
    hp: ModelHyper
    trans: EnsembleNet = None
    rew: EnsembleNet = None
    psis: list = field(default_factory=list)
    psi_adams: list = field(default_factory=list)
    predictor: Mlp = None
    adam_trans: nn.AdamState = None
    adam_rew: nn.AdamState = None
    adam_pred: nn.AdamState = None
    trained: bool = False
    predictor_trained: bool = False

    @property
    def z_enc_dim(self) -> int:
        return self.hp.z_dim  # one-hot for cat, raw vector otherwise

    @property
    def psi_out_dim(self) -> int:
        return 2 * self.hp.z_dim if self.hp.latent_kind == "gauss" else self.hp.z_dim


def make_model(obs_dim: int, n_actions: int | None, act_dim: int,
               obs_is_index: bool, hp: ModelHyper, rng,
               trans_hidden=(128, 64), rew_hidden=(128, 64),
               psi_hidden=(64, 64), pred_hidden=(128,)) -> EnvModel:
    hp.validate()
    act_enc_dim = n_actions if n_actions is not None else act_dim
    model = EnvModel(obs_dim, act_enc_dim, n_actions, obs_is_index, hp)
    in_dim = obs_dim + act_enc_dim + model.z_enc_dim
    trans_out = obs_dim if obs_is_index else 2 * obs_dim  # logits | gaussian delta
    model.trans = ensemble_init(in_dim, trans_hidden, trans_out, hp.n_ensemble, rng)
    model.rew = ensemble_init(in_dim, rew_hidden, 1, hp.n_ensemble, rng)
    model.predictor = nn.mlp_init(
        [(hp.l - 1) * model.z_enc_dim] + list(pred_hidden) + [model.psi_out_dim],
        "relu", rng)
    model.adam_trans = nn.adam_init(model.trans.params(), hp.trans_lr)
    model.adam_rew = nn.adam_init(model.rew.params(), hp.rew_lr)
    model.adam_pred = nn.adam_init(model.predictor.params(), hp.pred_lr)
    model._psi_hidden = list(psi_hidden)
    model._psi_rng = rng
    return model


def push_latent(model: EnvModel) -> None:
    """Open the latent slot for a new rollout: the new latent function starts
    as a copy of the newest one (fresh init on the first round)."""
    if len(model.psis) >= model.hp.l:
        raise ContractError("latent window full; shift before pushing")
    if model.psis:
        model.psis.append(model.psis[-1].copy())
        model.psi_adams.append(model.psi_adams[-1].copy())
    else:
        psi = nn.mlp_init([model.obs_dim] + model._psi_hidden + [model.psi_out_dim],
                          "relu", model._psi_rng)
        model.psis.append(psi)
        model.psi_adams.append(nn.adam_init(psi.params(), model.hp.psi_lr))


def shift_latents(model: EnvModel, buffer: ModelBuffer) -> None:
    """End-of-round shift: slots 1..l-1 take 2..l, in lockstep for the buffer
    window and the latent-function list."""
    if len(model.psis) != len(buffer):
        raise ContractError("latent/buffer windows out of lockstep")
    if len(model.psis) >= model.hp.l:
        model.psis.pop(0)
        model.psi_adams.pop(0)
    buffer.shift()


# ---------------------------------------------------------------------------
# latent evaluation


def latent_encode(model: EnvModel, psi: Mlp, obs_enc: np.ndarray, rng,
                  sample: bool = True):
    """z encoding for model input: (z_enc, backprop context)."""
    kind = model.hp.latent_kind
    out, cache = nn.mlp_forward_cached(psi, obs_enc)
    if kind == "det":
        return out, ("det", cache)
    if kind == "cat":
        probs = nn.softmax(out)
        if sample:
            idx = nn.categorical_sample_batch(out, rng)
            z = np.eye(model.hp.z_dim)[idx]
        else:
            z = probs
        return z, ("cat", cache, probs)
    mean, log_std = out[:, :model.hp.z_dim], out[:, model.hp.z_dim:]
    eps = rng.standard_normal(mean.shape) if sample else np.zeros_like(mean)
    z = mean + np.exp(log_std) * eps
    return z, ("gauss", cache, eps, np.exp(log_std))


def _latent_backward(model: EnvModel, psi: Mlp, ctx, dz):
    kind = ctx[0]
    if kind == "det":
        grads, _ = nn.mlp_backward(psi, ctx[1], dz)
        return grads
    if kind == "gauss":
        _, cache, eps, std = ctx
        d_out = np.concatenate([dz, dz * std * eps], axis=1)
        grads, _ = nn.mlp_backward(psi, cache, d_out)
        return grads
    raise ContractError("categorical latents train via exact expectation")


# ---------------------------------------------------------------------------
# model loss and training


def _heads_loss(model: EnvModel, X, next_obs_target, rewards, weights=None):
    """Forward both ensemble nets on X and return per-sample losses plus the
    gradient w.r.t. X.  ``weights`` (n,) reweights samples (used by the
    exact-expectation categorical path).

    Returns (l_rew, l_trans, per_sample_loss, grads_trans, grads_rew, dX).
    """
    n = X.shape[0]
    w = np.ones(n) if weights is None else weights
    wn = w / w.sum()
    n_heads = model.hp.n_ensemble
    c = model.hp.c_trans

    t_outs, t_cache = ensemble_forward_all(model.trans, X)
    r_outs, r_cache = ensemble_forward_all(model.rew, X)

    d_t = np.empty_like(t_outs)
    d_r = np.empty_like(r_outs)
    per_sample = np.zeros(n)
    l_rew_total = 0.0
    l_trans_total = 0.0
    for i in range(n_heads):
        r_err = r_outs[i][:, 0] - rewards
        l_rew_i = r_err ** 2
        d_r[i] = ((2.0 * r_err * wn) / n_heads)[:, None]
        if model.obs_is_index:
            lp = nn.log_softmax(t_outs[i])
            idx = np.arange(n)
            nll = -lp[idx, next_obs_target]
            d_t[i] = np.exp(lp) - np.eye(lp.shape[1])[next_obs_target]
            d_t[i] *= (c * wn / n_heads)[:, None]
        else:
            d = model.obs_dim
            mean, log_std = t_outs[i][:, :d], t_outs[i][:, d:]
            log_std = np.clip(log_std, -8.0, 4.0)
            var = np.exp(2.0 * log_std)
            diff = mean - next_obs_target
            nll = 0.5 * ((diff ** 2) / var + 2.0 * log_std + nn.LOG_2PI).sum(axis=1)
            d_mean = diff / var
            d_log_std = 1.0 - (diff ** 2) / var
            d_t[i] = np.concatenate([d_mean, d_log_std], axis=1)
            d_t[i] *= (c * wn / n_heads)[:, None]
        l_rew_total += float((wn * l_rew_i).sum()) / n_heads
        l_trans_total += float((wn * nll).sum()) / n_heads
        per_sample += (l_rew_i + c * nll) / n_heads

    grads_t, dX_t = ensemble_backward(model.trans, t_cache, d_t)
    grads_r, dX_r = ensemble_backward(model.rew, r_cache, d_r)
    return l_rew_total, l_trans_total, per_sample, grads_t, grads_r, dX_t + dX_r


def model_loss(model: EnvModel, batch: dict, psi_index: int, rng) -> tuple:
    """Evaluate (L_rew, L_trans) of a batch from slot ``psi_index`` paired
    with its latent function.  No parameters are modified."""
    if not 0 <= psi_index < len(model.psis):
        raise ContractError(f"no latent function for slot {psi_index}")
    psi = model.psis[psi_index]
    obs_enc = batch["obs_enc"]
    kind = model.hp.latent_kind
    if kind == "cat":
        X, weights, targets, rewards = _expanded_cat_batch(model, psi, batch)
        l_rew, l_trans, _, _, _, _ = _heads_loss(model, X, targets, rewards, weights)
        return l_rew, l_trans
    z, _ = latent_encode(model, psi, obs_enc, rng)
    X = _model_input(model, batch, z)
    target = batch["next_obs_idx"] if model.obs_is_index \
        else batch["next_obs_enc"] - batch["obs_enc"]
    l_rew, l_trans, _, _, _, _ = _heads_loss(model, X, target, batch["rewards"])
    return l_rew, l_trans


def _model_input(model: EnvModel, batch: dict, z: np.ndarray) -> np.ndarray:
    if model.n_actions is not None:
        a_enc = np.eye(model.n_actions)[batch["actions"].astype(int)]
    else:
        a_enc = batch["actions"]
    return np.concatenate([batch["obs_enc"], a_enc, z], axis=1)


def _expanded_cat_batch(model: EnvModel, psi: Mlp, batch: dict):
    """Replicate the batch over every latent value, weighting rows by the
    latent probabilities (exact expectation over a categorical z)."""
    n = batch["rewards"].shape[0]
    nz = model.hp.z_dim
    logits, _ = nn.mlp_forward_cached(psi, batch["obs_enc"])
    probs = nn.softmax(logits)
    reps = {k: np.repeat(v, nz, axis=0) for k, v in batch.items()}
    z = np.tile(np.eye(nz), (n, 1))
    X = _model_input(model, reps, z)
    weights = probs.ravel()
    target = reps["next_obs_idx"] if model.obs_is_index \
        else reps["next_obs_enc"] - reps["obs_enc"]
    return X, weights, target, reps["rewards"]


def _sample_batch(buf: RolloutBuffer, size: int, rng) -> dict:
    flat = buf.flat()
    idx = rng.integers(0, buf.n_transitions, size=size)
    return {k: v[idx] for k, v in flat.items()}


def train_model(model: EnvModel, buffer: ModelBuffer, hp: ModelHyper, rng) -> dict:
    """Step the transition/reward nets on minibatches rotating over every
    populated slot; only the newest latent function receives gradients."""
    if len(buffer) == 0:
        raise ContractError("empty buffer window")
    if len(model.psis) != len(buffer):
        raise ContractError("latent/buffer windows out of lockstep")
    n_slots = len(buffer)
    newest = n_slots - 1
    losses = []
    for step in range(hp.model_steps):
        j = step % n_slots
        batch = _sample_batch(buffer.slots[j], hp.model_batch, rng)
        psi = model.psis[j]
        kind = hp.latent_kind

        if kind == "cat":
            logits, psi_cache = nn.mlp_forward_cached(psi, batch["obs_enc"])
            X, weights, target, rewards = _expanded_cat_batch(model, psi, batch)
            l_rew, l_trans, per_sample, g_t, g_r, _ = _heads_loss(
                model, X, target, rewards, weights)
            if j == newest:
                # d/d logits of sum_z p_z * loss_z
                n = batch["rewards"].shape[0]
                loss_z = per_sample.reshape(n, hp.z_dim)
                probs = nn.softmax(logits)
                inner = (probs * loss_z).sum(axis=1, keepdims=True)
                d_logits = probs * (loss_z - inner) / n
                g_psi, _ = nn.mlp_backward(psi, psi_cache, d_logits)
                nn.adam_step(model.psi_adams[newest], psi.params(), g_psi)
        else:
            z, ctx = latent_encode(model, psi, batch["obs_enc"], rng)
            X = _model_input(model, batch, z)
            target = batch["next_obs_idx"] if model.obs_is_index \
                else batch["next_obs_enc"] - batch["obs_enc"]
            l_rew, l_trans, _, g_t, g_r, dX = _heads_loss(
                model, X, target, batch["rewards"])
            if j == newest:
                dz = dX[:, -model.z_enc_dim:].copy()
                if kind == "det":
                    n = batch["rewards"].shape[0]
                    l2 = hp.l2_coef
                    dz += 2.0 * l2 * z / n
                g_psi = _latent_backward(model, psi, ctx, dz)
                nn.adam_step(model.psi_adams[newest], psi.params(), g_psi)

        nn.adam_step(model.adam_trans, model.trans.params(), g_t)
        nn.adam_step(model.adam_rew, model.rew.params(), g_r)
        losses.append(l_rew + hp.c_trans * l_trans)
    model.trained = True
    return {"model_loss": float(np.mean(losses))}


def train_predictor(model: EnvModel, newest_buf: RolloutBuffer, hp: ModelHyper,
                    rng) -> dict:
    """Fit the prediction net: newest latent given the older l-1 latents at
    the same observation.  Latent functions are inputs only."""
    if len(model.psis) < hp.l:
        raise ContractError(f"predictor needs {hp.l} latent functions, "
                            f"have {len(model.psis)}")
    losses = []
    for _ in range(hp.pred_steps):
        batch = _sample_batch(newest_buf, hp.pred_batch, rng)
        obs_enc = batch["obs_enc"]
        inputs = [latent_encode(model, p, obs_enc, rng)[0]
                  for p in model.psis[:-1]]
        X = np.concatenate(inputs, axis=1)
        out, cache = nn.mlp_forward_cached(model.predictor, X)
        kind = hp.latent_kind
        n = obs_enc.shape[0]
        if kind == "det":
            target = nn.mlp_forward(model.psis[-1], obs_enc)
            diff = out - target
            loss = float((diff ** 2).sum(axis=1).mean())
            d_out = 2.0 * diff / n
        elif kind == "cat":
            logits_l = nn.mlp_forward(model.psis[-1], obs_enc)
            target_idx = nn.categorical_sample_batch(logits_l, rng)
            lp = nn.log_softmax(out)
            loss = float(-lp[np.arange(n), target_idx].mean())
            d_out = (np.exp(lp) - np.eye(lp.shape[1])[target_idx]) / n
        else:
            out_l = nn.mlp_forward(model.psis[-1], obs_enc)
            zd = hp.z_dim
            tgt_mean, tgt_log_std = out_l[:, :zd], out_l[:, zd:]
            target = tgt_mean + np.exp(tgt_log_std) * rng.standard_normal(tgt_mean.shape)
            mean, log_std = out[:, :zd], np.clip(out[:, zd:], -8.0, 4.0)
            var = np.exp(2.0 * log_std)
            diff = mean - target
            loss = float((0.5 * ((diff ** 2) / var + 2.0 * log_std + nn.LOG_2PI))
                         .sum(axis=1).mean())
            d_out = np.concatenate([diff / var, 1.0 - (diff ** 2) / var], axis=1) / n
        grads, _ = nn.mlp_backward(model.predictor, cache, d_out)
        nn.adam_step(model.adam_pred, model.predictor.params(), grads)
        losses.append(loss)
    model.predictor_trained = True
    return {"pred_loss": float(np.mean(losses))}


# ---------------------------------------------------------------------------
# prediction / rollout


def predicted_latent(model: EnvModel, obs_enc: np.ndarray, use_prediction: bool,
                     rng, psi_window: list | None = None) -> np.ndarray:
    """z for a model step.  With prediction: the predictor fed by the latest
    l-1 latent functions; without: the newest latent function alone."""
    if not use_prediction:
        z, _ = latent_encode(model, model.psis[-1], obs_enc, rng)
        return z
    window = psi_window if psi_window is not None else model.psis[1:]
    if len(window) != model.hp.l - 1:
        raise ContractError("prediction needs exactly l-1 latent inputs")
    inputs = [latent_encode(model, p, obs_enc, rng)[0] for p in window]
    out = nn.mlp_forward(model.predictor, np.concatenate(inputs, axis=1))
    kind = model.hp.latent_kind
    if kind == "det":
        return out
    if kind == "cat":
        idx = nn.categorical_sample_batch(out, rng)
        return np.eye(model.hp.z_dim)[idx]
    zd = model.hp.z_dim
    mean, log_std = out[:, :zd], np.clip(out[:, zd:], -8.0, 4.0)
    return mean + np.exp(log_std) * rng.standard_normal(mean.shape)


def predict_batch(model: EnvModel, obs_enc: np.ndarray, actions: np.ndarray,
                  use_prediction: bool, rng, psi_window=None):
    """One model step for a batch: (next_obs_enc, next_obs_idx|None, rewards).

    One of the ensemble heads is chosen uniformly per sample.
    """
    if not model.trained:
        raise ContractError("model has not been trained")
    z = predicted_latent(model, obs_enc, use_prediction, rng, psi_window)
    X = _model_input(model, {"obs_enc": obs_enc, "actions": actions}, z)
    head_idx = rng.integers(0, model.hp.n_ensemble, size=X.shape[0])
    t_outs, _ = ensemble_forward_all(model.trans, X)
    r_outs, _ = ensemble_forward_all(model.rew, X)
    pick = np.arange(X.shape[0])
    t_out = t_outs[head_idx, pick]
    rewards = r_outs[head_idx, pick, 0]
    if model.obs_is_index:
        idx = nn.categorical_sample_batch(t_out, rng)
        return np.eye(model.obs_dim)[idx], idx, rewards
    d = model.obs_dim
    mean, log_std = t_out[:, :d], np.clip(t_out[:, d:], -8.0, 4.0)
    delta = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return obs_enc + delta, None, rewards


def predict_step(model: EnvModel, obs_enc, action, use_prediction: bool, rng):
    """Single-transition wrapper around :func:`predict_batch`."""
    obs_enc = np.asarray(obs_enc, dtype=np.float64)[None, :]
    a = np.asarray([action]) if model.n_actions is not None \
        else np.asarray(action, dtype=np.float64)[None, :]
    next_enc, next_idx, rewards = predict_batch(model, obs_enc, a,
                                                use_prediction, rng)
    obs_out = int(next_idx[0]) if next_idx is not None else next_enc[0]
    return obs_out, float(rewards[0])


def branched_rollout(model: EnvModel, buf: RolloutBuffer, policy: AgentPolicy,
                     hp: ModelHyper, n_traj: int, rng,
                     use_prediction: bool) -> dict:
    """Sample h-step real segments from the newest rollout and extend each by
    k model steps under the current policy.  Returns equal-length segment
    arrays ready for batched GAE."""
    if buf.n_transitions == 0:
        raise ContractError("empty rollout buffer")
    T = buf.episode_len
    if T < hp.h:
        raise ContractError(f"episodes shorter than h={hp.h}")
    h, k = hp.h, hp.k
    # disjoint windows tiled across episodes: maximal coverage of the
    # rollout, so successive training batches differ by policy change
    # rather than by window-resampling noise
    slots = T // h
    idx = np.arange(n_traj)
    ep = idx % buf.n_episodes
    t0 = ((idx // buf.n_episodes) % slots) * h
    gather = t0[:, None] + np.arange(h)[None, :]

    obs = buf.obs_enc[ep[:, None], gather]
    acts = buf.actions[ep[:, None], gather]
    rews = buf.rewards[ep[:, None], gather]
    logps = buf.log_probs[ep[:, None], gather]
    vals = buf.values[ep[:, None], gather]
    obs_idx = buf.obs_idx[ep[:, None], gather] if buf.obs_idx is not None else None

    cur = buf.next_obs_enc[ep, t0 + h - 1]
    cur_idx = buf.next_obs_idx[ep, t0 + h - 1] if buf.next_obs_idx is not None else None
    m_obs, m_acts, m_rews, m_logps, m_vals, m_idx = [], [], [], [], [], []
    for _ in range(k):
        a, lp, v = act_batch(policy, cur, rng)
        if policy.action_kind == "continuous":
            a = np.clip(a, -1.0, 1.0)
        nxt, nxt_idx, r = predict_batch(model, cur, a, use_prediction, rng)
        m_obs.append(cur)
        m_idx.append(cur_idx)
        m_acts.append(a)
        m_rews.append(r)
        m_logps.append(lp)
        m_vals.append(v)
        cur, cur_idx = nxt, nxt_idx

    if k > 0:
        obs = np.concatenate([obs, np.stack(m_obs, axis=1)], axis=1)
        acts = np.concatenate([acts, np.stack(m_acts, axis=1)], axis=1)
        rews = np.concatenate([rews, np.stack(m_rews, axis=1)], axis=1)
        logps = np.concatenate([logps, np.stack(m_logps, axis=1)], axis=1)
        vals = np.concatenate([vals, np.stack(m_vals, axis=1)], axis=1)
        if obs_idx is not None:
            obs_idx = np.concatenate([obs_idx, np.stack(m_idx, axis=1)], axis=1)
    bootstrap = nn.mlp_forward(policy.critic, cur)[:, 0]
    return {"obs": obs, "actions": acts, "rewards": rews, "log_probs": logps,
            "values": vals, "bootstrap": bootstrap, "obs_idx": obs_idx}
