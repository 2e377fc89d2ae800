"""Run configuration parsing: a flat ``key = value`` text format (JSON with
the same keys is accepted too), strict schema validation, and flag overrides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .trainer import ALGOS, ENVS, RunConfig, default_config


class ValidationError(ValueError):
    pass


# key -> (target, attribute, type)
_SCHEMA = {
    "algorithm": ("cfg", "algo", str),
    "env": ("cfg", "env", str),
    "seed": ("cfg", "seed", int),
    "env_seed": ("cfg", "env_seed", int),
    "rounds": ("cfg", "rounds", int),
    "steps_per_round": ("cfg", "steps_per_round", int),
    "out_dir": ("cfg", "out_dir", str),
    "beta": ("cfg", "beta", float),
    "ppo.gamma": ("ppo", "gamma", float),
    "ppo.lam": ("ppo", "lam", float),
    "ppo.clip": ("ppo", "clip", float),
    "ppo.value_clip": ("ppo", "value_clip", float),
    "ppo.c_entropy": ("ppo", "c_entropy", float),
    "ppo.c_value": ("ppo", "c_value", float),
    "ppo.max_grad_norm": ("ppo", "max_grad_norm", float),
    "ppo.minibatch": ("ppo", "minibatch", int),
    "ppo.epochs": ("ppo", "epochs", int),
    "ppo.actor_lr": ("ppo", "actor_lr", float),
    "ppo.critic_lr": ("ppo", "critic_lr", float),
    "model.l": ("model", "l", int),
    "model.h": ("model", "h", int),
    "model.k": ("model", "k", int),
    "model.c_trans": ("model", "c_trans", float),
    "model.model_batch": ("model", "model_batch", int),
    "model.pred_batch": ("model", "pred_batch", int),
    "model.psi_lr": ("model", "psi_lr", float),
    "model.pred_lr": ("model", "pred_lr", float),
    "model.trans_lr": ("model", "trans_lr", float),
    "model.rew_lr": ("model", "rew_lr", float),
    "model.z_dim": ("model", "z_dim", int),
    "model.latent_kind": ("model", "latent_kind", str),
    "model.n_ensemble": ("model", "n_ensemble", int),
    "model.l2_coef": ("model", "l2_coef", float),
    "model.model_steps": ("model", "model_steps", int),
    "model.pred_steps": ("model", "pred_steps", int),
}


@dataclass
class CliConfig:
    command: str
    run: RunConfig
    config_path: str | None = None
    overrides: dict = field(default_factory=dict)


def _read_flat(text: str) -> dict:
    """``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def read_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValidationError("JSON config must be an object")
        return {str(k): v for k, v in raw.items()}
    return _read_flat(text)


def _coerce(key: str, value, typ):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    try:
        if typ is int:
            return int(str(value), 10)
        if typ is float:
            return float(str(value))
        return str(value)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {value!r} as {typ.__name__}")


def build_run_config(raw: dict) -> RunConfig:
    """Validate a raw key->value mapping against the schema and produce a
    RunConfig with per-environment defaults filled in."""
    for key in raw:
        if key not in _SCHEMA:
            raise ValidationError(f"unknown key {key!r}")
    for required in ("algorithm", "env"):
        if required not in raw:
            raise ValidationError(f"missing required key {required!r}")
    algo = _coerce("algorithm", raw["algorithm"], str)
    env = _coerce("env", raw["env"], str)
    if algo not in ALGOS:
        raise ValidationError(f"algorithm: {algo!r} not in {ALGOS}")
    if env not in ENVS:
        raise ValidationError(f"env: {env!r} not in {ENVS}")
    cfg = default_config(algo, env)
    for key, value in raw.items():
        if key in ("algorithm", "env"):
            continue
        target, attr, typ = _SCHEMA[key]
        obj = {"cfg": cfg, "ppo": cfg.ppo, "model": cfg.model}[target]
        setattr(obj, attr, _coerce(key, value, typ))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ValidationError(str(exc))
    return cfg


def parse_config(path: str | None, overrides: dict,
                 command: str = "train") -> CliConfig:
    """File values overridden by flags; everything validated."""
    raw = read_config_file(path) if path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = build_run_config(raw)
    return CliConfig(command, cfg, path, dict(overrides))


def dump_config(cfg: RunConfig) -> str:
    """Emit the flat text form; re-parsing it reproduces the config."""
    lines = [f"algorithm = {cfg.algo}", f"env = {cfg.env}"]
    for key, (target, attr, _typ) in _SCHEMA.items():
        if key in ("algorithm", "env"):
            continue
        obj = {"cfg": cfg, "ppo": cfg.ppo, "model": cfg.model}[target]
        lines.append(f"{key} = {getattr(obj, attr)}")
    return "\n".join(lines) + "\n"
