"""Diagnostics: visitation frequencies and their round-to-round divergence,
an exact dynamic-programming visitation oracle, model prediction errors,
latent/other-agent correspondence matrices, and the soft-update divergence
checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import DomainError, GameSpec
from .model import (ContractError, EnvModel, RolloutBuffer,
                    ensemble_forward_all, latent_encode, _model_input)


@dataclass
class VisitationVector:
    freq: np.ndarray
    kind: str = "empirical"  # "empirical" (normalized) | "discounted"

    def validate(self) -> None:
        if np.any(self.freq < -1e-12):
            raise DomainError("negative visitation entry")
        if self.kind == "empirical" and abs(self.freq.sum() - 1.0) > 1e-9:
            raise DomainError("empirical visitation must sum to 1")


@dataclass
class MetricsRecord:
    round: int
    mean_return: float
    visitation_l1: float | None = None
    xent: float | None = None
    reward_l1: float | None = None
    actor_loss: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    model_loss: list = field(default_factory=list)
    pred_loss: list = field(default_factory=list)


@dataclass
class CorrespondenceMatrices:
    z_given_a: np.ndarray   # rows: other-agent joint actions
    a_given_z: np.ndarray   # rows: latent values


# ---------------------------------------------------------------------------
# visitation


def empirical_visitation(obs, n_obs: int) -> VisitationVector:
    """Normalized observation counts over all provided steps.  ``obs`` is an
    integer array (any shape) or a list of such arrays."""
    if isinstance(obs, (list, tuple)):
        obs = np.concatenate([np.asarray(o).ravel() for o in obs]) if obs \
            else np.empty(0, dtype=int)
    else:
        obs = np.asarray(obs).ravel()
    if obs.size == 0:
        raise DomainError("no observations")
    counts = np.bincount(obs.astype(int), minlength=n_obs).astype(np.float64)
    return VisitationVector(counts / counts.sum(), "empirical")


def visitation_l1(a: VisitationVector, b: VisitationVector) -> float:
    if a.kind != b.kind:
        raise ContractError(f"normalization mismatch: {a.kind} vs {b.kind}")
    if a.freq.shape != b.freq.shape:
        raise ContractError("observation spaces differ")
    return float(np.abs(a.freq - b.freq).sum())


def exact_visitation(spec: GameSpec, policies, gamma: float, horizon: int = 40,
                     init_dist=None) -> VisitationVector:
    """Discounted visitation rho = sum_t gamma^t p_t computed by propagating
    the exact transition operator under the joint policy.

    ``policies`` is a list of per-agent action-probability tables (n_obs,
    n_actions).  The initial distribution defaults to uniform.
    """
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    n = spec.n_obs
    p = np.full(n, 1.0 / n) if init_dist is None else np.asarray(init_dist, float)
    # M[o, o'] = sum over joint actions of pi(a|o) T[o, a, o']
    W = policies[0][:, :, None, None]
    if spec.n_agents >= 2:
        W = W * policies[1][:, None, :, None]
    if spec.n_agents >= 3:
        W = W * policies[2][:, None, None, :]
    T = spec.T
    if spec.n_agents == 1:
        M = np.einsum("oa,oan->on", policies[0], T)
    elif spec.n_agents == 2:
        M = np.einsum("oab,oabn->on", W[:, :, :, 0], T)
    else:
        M = np.einsum("oabc,oabcn->on", W, T)
    rho = np.zeros(n)
    g = 1.0
    for _ in range(horizon):
        rho += g * p
        p = p @ M
        g *= gamma
    return VisitationVector(rho, "discounted")


# ---------------------------------------------------------------------------
# prediction error


@dataclass
class PredictionError:
    xent: float
    reward_l1: float
    xent_kind: str = "cross-entropy"  # "neg-log-density" for continuous obs


def prediction_error(model: EnvModel, next_round_data: RolloutBuffer,
                     use_prediction: bool, rng,
                     psi_window=None) -> PredictionError:
    """Evaluate the model on data it has not trained on: mean next-obs
    cross-entropy (negative log-density for continuous observations) and mean
    reward L1 error, with ensemble heads averaged in probability space."""
    if not model.trained:
        raise ContractError("model has not been trained")
    flat = next_round_data.flat()
    obs_enc = flat["obs_enc"]
    n = obs_enc.shape[0]

    if model.hp.latent_kind == "cat":
        q = _latent_probs(model, obs_enc, use_prediction, psi_window)
        nz = model.hp.z_dim
        reps = {k: np.repeat(v, nz, axis=0) for k, v in flat.items()}
        z = np.tile(np.eye(nz), (n, 1))
        X = _model_input(model, reps, z)
        w = q.ravel()
    else:
        from .model import predicted_latent
        z = predicted_latent(model, obs_enc, use_prediction, rng, psi_window)
        X = _model_input(model, flat, z)
        w = None

    t_outs, _ = ensemble_forward_all(model.trans, X)
    r_outs, _ = ensemble_forward_all(model.rew, X)
    r_hat = r_outs.mean(axis=0)[:, 0]
    if model.obs_is_index:
        probs = nn.softmax(t_outs).mean(axis=0)  # heads averaged as probabilities
        if w is not None:
            probs = (w[:, None] * probs).reshape(n, model.hp.z_dim, -1).sum(axis=1)
            r_hat = (w * r_hat).reshape(n, model.hp.z_dim).sum(axis=1)
        tgt = flat["next_obs_idx"]
        xent = float(-np.log(np.maximum(probs[np.arange(n), tgt], 1e-300)).mean())
        kind = "cross-entropy"
    else:
        d = model.obs_dim
        delta = flat["next_obs_enc"] - flat["obs_enc"]
        mean = t_outs[:, :, :d]
        log_std = np.clip(t_outs[:, :, d:], -8.0, 4.0)
        var = np.exp(2.0 * log_std)
        lp_heads = (-0.5 * ((delta[None] - mean) ** 2 / var
                            + 2.0 * log_std + nn.LOG_2PI)).sum(axis=2)
        m = lp_heads.max(axis=0)
        lp = m + np.log(np.exp(lp_heads - m).mean(axis=0))
        xent = float(-lp.mean())
        kind = "neg-log-density"
    reward_l1 = float(np.abs(r_hat - flat["rewards"]).mean())
    return PredictionError(xent, reward_l1, kind)


def _latent_probs(model: EnvModel, obs_enc, use_prediction: bool, psi_window):
    """Categorical latent distribution per observation, from the predictor or
    the newest latent function."""
    if not use_prediction:
        return nn.softmax(nn.mlp_forward(model.psis[-1], obs_enc))
    window = psi_window if psi_window is not None else model.psis[1:]
    if len(window) != model.hp.l - 1:
        raise ContractError("prediction needs exactly l-1 latent inputs")
    inputs = [nn.softmax(nn.mlp_forward(p, obs_enc)) for p in window]
    return nn.softmax(nn.mlp_forward(model.predictor,
                                     np.concatenate(inputs, axis=1)))


# ---------------------------------------------------------------------------
# latent correspondence


def kmeans(points: np.ndarray, k: int, rng, restarts: int = 10,
           iters: int = 50) -> np.ndarray:
    """Plain Lloyd k-means with restarts; returns labels for each point."""
    best_labels, best_cost = None, np.inf
    n = points.shape[0]
    for _ in range(restarts):
        centers = points[rng.choice(n, size=k, replace=False)].copy()
        labels = np.zeros(n, dtype=int)
        for _ in range(iters):
            d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
            for j in range(k):
                mask = labels == j
                if mask.any():
                    centers[j] = points[mask].mean(axis=0)
        cost = float(((points - centers[labels]) ** 2).sum())
        if cost < best_cost:
            best_cost, best_labels = cost, labels
    return best_labels


def correspondence_counts(z_idx, a_idx, n_z: int, n_joint: int
                          ) -> CorrespondenceMatrices:
    """Row-stochastic P(z|a) and P(a|z) from paired samples; empty rows
    become uniform."""
    counts = np.zeros((n_joint, n_z))
    np.add.at(counts, (np.asarray(a_idx, int), np.asarray(z_idx, int)), 1.0)

    def normalize(m):
        s = m.sum(axis=1, keepdims=True)
        out = np.where(s > 0, m / np.maximum(s, 1.0), 1.0 / m.shape[1])
        return out

    return CorrespondenceMatrices(normalize(counts), normalize(counts.T))


def latent_correspondence(model: EnvModel, labeled_data: dict, rng
                          ) -> CorrespondenceMatrices:
    """Correspondence between the agent's latent and the other agents' joint
    action.  ``labeled_data`` needs obs_enc plus 'other_actions' (joint-action
    indices); categorical latents are sampled per experience, deterministic
    latents are discretized with k-means (k = number of joint actions)."""
    if "other_actions" not in labeled_data:
        raise ContractError("missing other-agents' joint-action labels")
    a_idx = np.asarray(labeled_data["other_actions"], int)
    n_joint = int(a_idx.max()) + 1 if "n_joint" not in labeled_data \
        else int(labeled_data["n_joint"])
    obs_enc = labeled_data["obs_enc"]
    kind = model.hp.latent_kind
    if kind == "cat":
        logits = nn.mlp_forward(model.psis[-1], obs_enc)
        z_idx = nn.categorical_sample_batch(logits, rng)
        n_z = model.hp.z_dim
    else:
        z, _ = latent_encode(model, model.psis[-1], obs_enc, rng)
        z_idx = kmeans(z, n_joint, rng)
        n_z = n_joint
    return correspondence_counts(z_idx, a_idx, n_z, n_joint)


# ---------------------------------------------------------------------------
# soft-update divergence


def softupdate_gap(seq, alpha: float):
    """Max step-to-step inf-norm change of a sequence of probability vectors
    versus its soft-updated counterpart.  Returns (E_raw, E_soft)."""
    seq = np.asarray(seq, dtype=np.float64)
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    if seq.ndim != 2 or seq.shape[0] < 2:
        raise DomainError("need a sequence of at least two vectors")
    if np.any(seq < -1e-12) or np.any(np.abs(seq.sum(axis=1) - 1.0) > 1e-9):
        raise DomainError("rows must be probability vectors")
    e_raw = float(np.abs(np.diff(seq, axis=0)).max(axis=1).max())
    soft = seq[0].copy()
    e_soft = 0.0
    for psi in seq[1:]:
        new = (1.0 - alpha) * soft + alpha * psi
        e_soft = max(e_soft, float(np.abs(new - soft).max()))
        soft = new
    return e_raw, e_soft
