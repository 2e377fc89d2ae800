"""Training loop for three algorithms: the model-based learner (with or
without latent prediction) and the independent-PPO baseline.

A round is: policy rollout in the environment; per agent, train the
transition/reward/latent nets, train the latent predictor (full variant
only), generate branched model rollouts, update PPO on them (the baseline
updates directly on the environment rollout); then shift the rollout window.
Everything is deterministic given the config seeds.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import envs, metrics as metrics_mod, model as model_mod, nn, ppo
from .envs import (CoopNavVecEnv, NSGameVecEnv, PolygonVecEnv, TabularVecEnv,
                   gamespec_to_json, gen_nonstationary_variant,
                   gen_stochastic_game, nsgamespec_to_json)
from .metrics import MetricsRecord, empirical_visitation, visitation_l1
from .model import ContractError, ModelBuffer, RolloutBuffer
from .ppo import PpoHyper, act_batch, compute_gae_batch, make_policy, ppo_update
from .streams import stream

ALGOS = ("mdpo", "mdpo-nopred", "ippo")
ENVS = ("stochastic-game", "ns-game", "coopnav", "polygon")


class StageError(RuntimeError):
    """A round sub-stage failed; the message names the stage and agent."""


@dataclass
class RunConfig:
    algo: str = "mdpo"
    env: str = "stochastic-game"
    seed: int = 0
    env_seed: int = 0
    rounds: int = 300
    steps_per_round: int = 1600
    out_dir: str = "runs/run"
    beta: float = 0.3              # ns-game blending weight
    ppo: PpoHyper = field(default_factory=PpoHyper)
    model: model_mod.ModelHyper = field(default_factory=model_mod.ModelHyper)

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.env not in ENVS:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.rounds < 0 or self.steps_per_round <= 0:
            raise ValueError("rounds/steps_per_round out of range")
        if self.steps_per_round % envs.HORIZON != 0:
            raise ValueError(
                f"steps_per_round must be a multiple of {envs.HORIZON}")
        self.ppo.validate()
        self.model.validate()

    @property
    def model_based(self) -> bool:
        return self.algo in ("mdpo", "mdpo-nopred")


def default_config(algo: str = "mdpo", env: str = "stochastic-game",
                   **overrides) -> RunConfig:
    """Per-environment defaults for round length, latent size/kind, and the
    next-obs loss weight."""
    cfg = RunConfig(algo=algo, env=env)
    m = cfg.model
    if env in ("stochastic-game", "ns-game"):
        cfg.steps_per_round = 1600
        m.c_trans = 10.0
        m.z_dim = 3
        m.latent_kind = "cat" if env == "ns-game" else "det"
    else:
        cfg.steps_per_round = 1280
        m.z_dim = 4
        m.latent_kind = "det"
        m.c_trans = 1.0 if env == "coopnav" else 100.0
        m.trans_lr = m.rew_lr = m.pred_lr = 3e-5
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValueError(f"unknown config field {k!r}")
        setattr(cfg, k, v)
    return cfg


@dataclass
class RunState:
    cfg: RunConfig
    env: object
    env_spec_json: str
    policies: list
    models: list | None
    buffers: list | None
    round: int = 0
    env_steps: int = 0
    prev_visit: list = field(default_factory=list)   # per-agent VisitationVector
    records: list = field(default_factory=list)
    stage_log: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.policies)


def _make_env(cfg: RunConfig):
    """Returns (vec env, pinned spec JSON, obs_dim, action kind, act_dim)."""
    n_envs = cfg.steps_per_round // envs.HORIZON
    rng = stream(cfg.seed, "env-init")
    if cfg.env == "stochastic-game":
        spec = gen_stochastic_game(cfg.env_seed)
        return (TabularVecEnv(spec, n_envs, rng), gamespec_to_json(spec),
                spec.n_obs, "discrete", spec.n_actions)
    if cfg.env == "ns-game":
        ns = gen_nonstationary_variant(cfg.env_seed, cfg.beta)
        return (NSGameVecEnv(ns, n_envs, rng), nsgamespec_to_json(ns),
                ns.base.n_obs, "discrete", ns.base.n_actions)
    if cfg.env == "coopnav":
        env = CoopNavVecEnv(n_envs, rng)
        pin = json.dumps({"kind": "coopnav", "env_seed": cfg.env_seed})
        return env, pin, env.obs_dim, "continuous", 2
    env = PolygonVecEnv(n_envs, rng)
    pin = json.dumps({"kind": "polygon", "env_seed": cfg.env_seed})
    return env, pin, env.obs_dim, "continuous", 2


def init_run(cfg: RunConfig) -> RunState:
    cfg.validate()
    env, pin, obs_dim, action_kind, act_dim = _make_env(cfg)
    tabular = cfg.env in ("stochastic-game", "ns-game")
    policies, models, buffers = [], [], []
    for i in range(env.n_agents):
        policies.append(make_policy(obs_dim, action_kind, act_dim, cfg.ppo,
                                    stream(cfg.seed, "init", "policy", i)))
        if cfg.model_based:
            m = model_mod.make_model(
                obs_dim, act_dim if action_kind == "discrete" else None,
                act_dim, tabular, cfg.model,
                stream(cfg.seed, "init", "model", i))
            models.append(m)
            buffers.append(ModelBuffer(cfg.model.l))
    if not cfg.model_based:
        models = buffers = None
    return RunState(cfg, env, pin, policies, models, buffers)


# ---------------------------------------------------------------------------
# rollout collection


def collect_rollout(state: RunState, round_index: int):
    """Run one round of parallel episodes; returns (per-agent RolloutBuffer,
    mean episode return)."""
    cfg = state.cfg
    env = state.env
    env.rng = stream(cfg.seed, "env-step", "round", round_index)
    if isinstance(env, NSGameVecEnv):
        env.set_round(round_index)
    tabular = cfg.env in ("stochastic-game", "ns-game")
    n_agents = state.n_agents
    agent_rngs = [stream(cfg.seed, "agent", i, "round", round_index, "act")
                  for i in range(n_agents)]

    obs = env.reset()
    eye = np.eye(env.obs_dim) if tabular else None
    T = envs.HORIZON
    store = [dict(obs=[], next_obs=[], actions=[], rewards=[], logps=[],
                  values=[]) for _ in range(n_agents)]
    for _ in range(T):
        if tabular:
            enc = eye[obs]
            acts_for_env = []
            for i in range(n_agents):
                a, lp, v = act_batch(state.policies[i], enc, agent_rngs[i])
                store[i]["obs"].append(obs)
                store[i]["actions"].append(a)
                store[i]["logps"].append(lp)
                store[i]["values"].append(v)
                acts_for_env.append(a)
            next_obs, rewards, done = env.step(np.stack(acts_for_env))
            for i in range(n_agents):
                store[i]["next_obs"].append(next_obs)
                store[i]["rewards"].append(rewards)
            obs = next_obs
        else:
            acts_for_env = []
            for i in range(n_agents):
                a, lp, v = act_batch(state.policies[i], obs[i], agent_rngs[i])
                a = np.clip(a, -1.0, 1.0)
                store[i]["obs"].append(obs[i])
                store[i]["actions"].append(a)
                store[i]["logps"].append(lp)
                store[i]["values"].append(v)
                acts_for_env.append(a)
            next_obs, rewards, done = env.step(acts_for_env)
            for i in range(n_agents):
                store[i]["next_obs"].append(next_obs[i])
                store[i]["rewards"].append(rewards)
            obs = next_obs

    state.env_steps += cfg.steps_per_round
    buffers = []
    for i in range(n_agents):
        s = store[i]
        rewards = np.stack(s["rewards"], axis=1)            # (E, T)
        if tabular:
            obs_idx = np.stack(s["obs"], axis=1)
            next_idx = np.stack(s["next_obs"], axis=1)
            buffers.append(RolloutBuffer(
                obs_enc=eye[obs_idx], next_obs_enc=eye[next_idx],
                actions=np.stack(s["actions"], axis=1),
                rewards=rewards,
                log_probs=np.stack(s["logps"], axis=1),
                values=np.stack(s["values"], axis=1),
                obs_idx=obs_idx, next_obs_idx=next_idx))
        else:
            buffers.append(RolloutBuffer(
                obs_enc=np.stack(s["obs"], axis=1),
                next_obs_enc=np.stack(s["next_obs"], axis=1),
                actions=np.stack(s["actions"], axis=1),
                rewards=rewards,
                log_probs=np.stack(s["logps"], axis=1),
                values=np.stack(s["values"], axis=1)))
    mean_return = float(rewards.sum(axis=1).mean())
    return buffers, mean_return


def batch_from_segments(segs: dict, hp: PpoHyper) -> dict:
    """Batched GAE over equal-length segments, flattened for the PPO update."""
    adv, ret = compute_gae_batch(segs["rewards"], segs["values"],
                                 segs["bootstrap"], hp.gamma, hp.lam)
    d = segs["obs"].shape[-1]
    acts = segs["actions"]
    return {
        "obs": segs["obs"].reshape(-1, d),
        "actions": acts.reshape(-1) if acts.ndim == 2 else acts.reshape(-1, acts.shape[-1]),
        "log_probs": segs["log_probs"].ravel(),
        "values": segs["values"].ravel(),
        "adv": adv.ravel(),
        "ret": ret.ravel(),
    }


def _segments_from_buffer(buf: RolloutBuffer) -> dict:
    """Whole-episode segments (terminal at the horizon, bootstrap 0)."""
    return {
        "obs": buf.obs_enc, "actions": buf.actions, "rewards": buf.rewards,
        "log_probs": buf.log_probs, "values": buf.values,
        "bootstrap": np.zeros(buf.n_episodes), "obs_idx": buf.obs_idx,
    }


# ---------------------------------------------------------------------------
# the round


def _stage(state: RunState, name: str, agent: int | None = None):
    tag = f"round {state.round} stage {name}" + \
        ("" if agent is None else f" agent {agent}")
    state.stage_log.append(tag)
    return tag


def run_round(state: RunState, cfg: RunConfig) -> MetricsRecord:
    """One full training round; returns the metrics recorded for it."""
    n = state.round
    tabular = cfg.env in ("stochastic-game", "ns-game")
    rec = MetricsRecord(round=n, mean_return=0.0)

    def guarded(stage_name, agent, fn, *args, **kw):
        tag = _stage(state, stage_name, agent)
        try:
            return fn(*args, **kw)
        except Exception as exc:
            raise StageError(f"{tag}: {exc}") from exc

    rollout, rec.mean_return = guarded("rollout", None, collect_rollout, state, n)

    train_batches = []
    for i in range(state.n_agents):
        hp = cfg.model
        if cfg.model_based:
            m = state.models[i]
            buf_window = state.buffers[i]
            rng = stream(cfg.seed, "agent", i, "round", n, "model")

            # evaluate last round's model on data it has never seen
            if m.trained:
                use_pred = (cfg.algo == "mdpo" and m.predictor_trained
                            and len(m.psis) == hp.l - 1)
                pe = guarded("predict-eval", i, metrics_mod.prediction_error,
                             m, rollout[i], use_pred,
                             stream(cfg.seed, "agent", i, "round", n, "eval"),
                             m.psis if use_pred else None)
                rec.xent = pe.xent if rec.xent is None else rec.xent + pe.xent
                rec.reward_l1 = pe.reward_l1 if rec.reward_l1 is None \
                    else rec.reward_l1 + pe.reward_l1

            guarded("push", i, model_mod.push_latent, m)
            buf_window.push(rollout[i])
            out = guarded("train-model", i, model_mod.train_model,
                          m, buf_window, hp, rng)
            rec.model_loss.append(out["model_loss"])
            if cfg.algo == "mdpo" and len(m.psis) == hp.l:
                out = guarded("train-predictor", i, model_mod.train_predictor,
                              m, rollout[i], hp,
                              stream(cfg.seed, "agent", i, "round", n, "pred"))
                rec.pred_loss.append(out["pred_loss"])

            if len(buf_window) >= 2:
                # one branch per disjoint window so the real segments cover
                # the whole rollout; the model tails then add data on top
                n_traj = rollout[i].n_episodes * (rollout[i].episode_len // hp.h)
                use_pred = (cfg.algo == "mdpo" and m.predictor_trained
                            and len(m.psis) == hp.l)
                segs = guarded("branched-rollout", i, model_mod.branched_rollout,
                               m, rollout[i], state.policies[i], hp, n_traj,
                               stream(cfg.seed, "agent", i, "round", n, "branch"),
                               use_pred)
            else:
                segs = _segments_from_buffer(rollout[i])
        else:
            segs = _segments_from_buffer(rollout[i])
        train_batches.append(segs)

    for i in range(state.n_agents):
        batch = batch_from_segments(train_batches[i], cfg.ppo)
        out = guarded("ppo-update", i, ppo_update, state.policies[i], batch,
                      cfg.ppo, stream(cfg.seed, "agent", i, "round", n, "ppo"))
        rec.actor_loss.append(out["actor_loss"])
        rec.critic_loss.append(out["critic_loss"])

    if cfg.model_based:
        for i in range(state.n_agents):
            guarded("shift", i, model_mod.shift_latents,
                    state.models[i], state.buffers[i])

    _stage(state, "metrics")
    if tabular:
        if not state.prev_visit:
            state.prev_visit = [None] * state.n_agents
        l1s = []
        for i in range(state.n_agents):
            visit = empirical_visitation(train_batches[i]["obs_idx"],
                                         state.env.obs_dim)
            if state.prev_visit[i] is not None:
                l1s.append(visitation_l1(visit, state.prev_visit[i]))
            state.prev_visit[i] = visit
        if l1s:
            rec.visitation_l1 = float(np.mean(l1s))
    if rec.xent is not None:
        rec.xent /= state.n_agents
        rec.reward_l1 /= state.n_agents

    state.records.append(rec)
    state.round += 1
    return rec


# ---------------------------------------------------------------------------
# artifacts


CSV_BASE = ["round", "mean_return", "visitation_l1", "xent", "reward_l1"]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def metrics_csv_lines(records, n_agents: int) -> list:
    cols = list(CSV_BASE)
    for name in ("actor_loss", "critic_loss", "model_loss", "pred_loss"):
        cols += [f"{name}_{i}" for i in range(n_agents)]
    lines = [",".join(cols)]
    for r in records:
        row = [_fmt(r.round), _fmt(r.mean_return), _fmt(r.visitation_l1),
               _fmt(r.xent), _fmt(r.reward_l1)]
        for vals in (r.actor_loss, r.critic_loss, r.model_loss, r.pred_loss):
            row += [_fmt(vals[i]) if i < len(vals) else ""
                    for i in range(n_agents)]
        lines.append(",".join(row))
    return lines


def write_metrics_csv(path: str, records, n_agents: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(metrics_csv_lines(records, n_agents)) + "\n")


def save_run_checkpoints(state: RunState, ckpt_dir: str) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    for i, pol in enumerate(state.policies):
        payload = {"actor": pol.actor, "critic": pol.critic,
                   "action_kind": pol.action_kind}
        if pol.log_std is not None:
            payload["log_std"] = pol.log_std
        nn.save_checkpoint(os.path.join(ckpt_dir, f"agent_{i}.json"), payload)
    if state.models:
        for i, m in enumerate(state.models):
            payload = {
                "trans_trunk": m.trans.trunk, "rew_trunk": m.rew.trunk,
                "trans_heads_w": m.trans.heads_w, "trans_heads_b": m.trans.heads_b,
                "rew_heads_w": m.rew.heads_w, "rew_heads_b": m.rew.heads_b,
                "psis": m.psis, "predictor": m.predictor,
                "latent_kind": m.hp.latent_kind, "z_dim": m.hp.z_dim,
            }
            nn.save_checkpoint(os.path.join(ckpt_dir, f"model_{i}.json"), payload)


def train(cfg: RunConfig, progress=None) -> RunState:
    """Run the configured number of rounds and write all artifacts to
    cfg.out_dir: config snapshot, pinned environment, metrics.csv,
    checkpoints/, stages.log."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    probe = os.path.join(cfg.out_dir, ".write-probe")
    try:
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {cfg.out_dir!r} not writable: {exc}")

    state = init_run(cfg)
    with open(os.path.join(cfg.out_dir, "config.json"), "w",
              encoding="utf-8") as f:
        json.dump(dataclasses.asdict(cfg), f, sort_keys=True, indent=2)
    with open(os.path.join(cfg.out_dir, "env.json"), "w", encoding="utf-8") as f:
        f.write(state.env_spec_json)

    for _ in range(cfg.rounds):
        rec = run_round(state, cfg)
        if progress is not None:
            progress(rec)

    write_metrics_csv(os.path.join(cfg.out_dir, "metrics.csv"),
                      state.records, state.n_agents)
    with open(os.path.join(cfg.out_dir, "stages.log"), "w",
              encoding="utf-8") as f:
        f.write("\n".join(state.stage_log) + ("\n" if state.stage_log else ""))
    save_run_checkpoints(state, os.path.join(cfg.out_dir, "checkpoints"))
    return state
