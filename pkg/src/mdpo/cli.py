"""Command-line entry point.

Commands:
  gen-env     write a pinned environment spec as JSON
  train       run one training run and write its artifacts
  batch       run several seeds and write a per-round mean/std summary
  correspond  latent/other-action correspondence matrices for a finished run
  verify      the preset 3-state correspondence experiment

Exit codes: 0 success, 1 validation error, 2 runtime/numeric error, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import nn, trainer
from .config import ValidationError, dump_config, parse_config
from .envs import (DomainError, gamespec_to_json, gen_nonstationary_variant,
                   gen_stochastic_game, nsgamespec_to_json)
from .metrics import correspondence_counts, kmeans
from .streams import stream

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

DEFAULT_OUT_ROOT = os.environ.get("MDPO_OUT_ROOT", "runs")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mdpo",
        description="Decentralized model-based policy optimization lab")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="config file (flat key=value or JSON)")
        sp.add_argument("--algo", choices=trainer.ALGOS,
                        help="algorithm (overrides config)")
        sp.add_argument("--env", choices=trainer.ENVS,
                        help="environment (overrides config)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--rounds", type=int, help="training rounds")
        sp.add_argument("--out", help="output directory "
                        f"(default under {DEFAULT_OUT_ROOT!r})")
        sp.add_argument("--no-prediction", action="store_true",
                        help="disable the latent predictor (mdpo -> mdpo-nopred)")

    sp = sub.add_parser("gen-env", help="write a pinned environment JSON")
    sp.add_argument("--env", choices=("stochastic-game", "ns-game"),
                    required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--out", required=True, help="output file path")

    sp = sub.add_parser("train", help="run one training run")
    add_common(sp)
    sp.add_argument("--env-seed", type=int, help="environment generation seed")

    sp = sub.add_parser("batch", help="run a batch of seeds")
    add_common(sp)
    sp.add_argument("--env-seed", type=int)
    sp.add_argument("--seeds", required=True,
                    help="comma-separated master seeds, e.g. 0,1,2,3,4")
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel runs (default 1)")

    sp = sub.add_parser("correspond",
                        help="correspondence matrices for a finished run")
    sp.add_argument("--run", required=True, help="run directory")
    sp.add_argument("--agent", type=int, default=0)
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output CSV (default inside the run dir)")

    sp = sub.add_parser("verify",
                        help="preset 3-state latent correspondence experiment")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _overrides_from_args(args) -> dict:
    algo = args.algo
    if args.no_prediction:
        if algo == "ippo":
            raise ValidationError("--no-prediction does not apply to ippo")
        algo = "mdpo-nopred" if algo in (None, "mdpo") else algo
    return {
        "algorithm": algo,
        "env": args.env,
        "seed": args.seed,
        "env_seed": getattr(args, "env_seed", None),
        "rounds": args.rounds,
        "out_dir": args.out,
    }


def cmd_gen_env(args) -> int:
    if args.env == "stochastic-game":
        text = gamespec_to_json(gen_stochastic_game(args.seed))
    else:
        text = nsgamespec_to_json(gen_nonstationary_variant(args.seed, args.beta))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cli = parse_config(args.config, _overrides_from_args(args))
    cfg = cli.run
    if cfg.out_dir == trainer.RunConfig.out_dir:  # not set anywhere
        cfg.out_dir = os.path.join(DEFAULT_OUT_ROOT,
                                   f"{cfg.algo}-{cfg.env}-seed{cfg.seed}")
    state = trainer.train(cfg)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w",
              encoding="utf-8") as f:
        f.write(dump_config(cfg))
    last = state.records[-1].mean_return if state.records else float("nan")
    print(f"run complete: {cfg.rounds} rounds, final mean return {last:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return EXIT_OK


def _run_one_seed(cfg_dict: dict) -> tuple:
    """Worker for batch mode; returns (seed, error-or-None)."""
    from .trainer import RunConfig
    import dataclasses
    cfg = RunConfig(**{k: v for k, v in cfg_dict.items()
                       if k not in ("ppo", "model")})
    cfg.ppo = dataclasses.replace(cfg.ppo, **cfg_dict["ppo"])
    cfg.model = dataclasses.replace(cfg.model, **cfg_dict["model"])
    try:
        trainer.train(cfg)
        return cfg.seed, None
    except Exception as exc:
        return cfg.seed, f"{type(exc).__name__}: {exc}"


def cmd_batch(args) -> int:
    import dataclasses
    cli = parse_config(args.config, _overrides_from_args(args))
    base = cli.run
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ValidationError("empty seed list")
    root = args.out or os.path.join(DEFAULT_OUT_ROOT,
                                    f"{base.algo}-{base.env}-batch")
    jobs = []
    for s in seeds:
        d = dataclasses.asdict(base)
        d["seed"] = s
        d["out_dir"] = os.path.join(root, f"seed_{s}")
        jobs.append(d)

    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one_seed, jobs))
    else:
        results = [_run_one_seed(j) for j in jobs]

    failures = [(s, e) for s, e in results if e is not None]
    for s, e in failures:
        print(f"seed {s} failed: {e}", file=sys.stderr)
    ok_dirs = [os.path.join(root, f"seed_{s}") for s, e in results if e is None]
    if ok_dirs:
        write_batch_summary(ok_dirs, os.path.join(root, "summary.csv"))
        print(f"summary in {os.path.join(root, 'summary.csv')}")
    return EXIT_RUNTIME if failures else EXIT_OK


SUMMARY_FIELDS = ("mean_return", "visitation_l1", "xent", "reward_l1")


def write_batch_summary(run_dirs: list, out_path: str) -> None:
    """Per-round mean/std across the per-seed metrics.csv files."""
    tables = []
    for d in run_dirs:
        with open(os.path.join(d, "metrics.csv"), encoding="utf-8") as f:
            tables.append(list(csv.DictReader(f)))
    n_rounds = min(len(t) for t in tables)
    cols = ["round"]
    for name in SUMMARY_FIELDS:
        cols += [f"{name}_mean", f"{name}_std"]
    lines = [",".join(cols)]
    for r in range(n_rounds):
        row = [tables[0][r]["round"]]
        for name in SUMMARY_FIELDS:
            vals = [float(t[r][name]) for t in tables if t[r][name] != ""]
            if vals:
                row += [repr(float(np.mean(vals))), repr(float(np.std(vals)))]
            else:
                row += ["", ""]
        lines.append(",".join(row))
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _load_mlp(entry) -> "nn.Mlp":
    return nn.mlp_from_dict(entry)


def cmd_correspond(args) -> int:
    """Estimate P(z | a_other) / P(a_other | z) for a finished tabular run by
    replaying the saved policies and reading agent i's newest latent."""
    run = args.run
    with open(os.path.join(run, "env.json"), encoding="utf-8") as f:
        env_text = f.read()
    env_info = json.loads(env_text)
    if env_info.get("kind") != "stochastic-game":
        raise ValidationError("correspond requires a stochastic-game run")
    from .envs import TabularVecEnv, gamespec_from_json
    spec = gamespec_from_json(env_text)

    ckpt_dir = os.path.join(run, "checkpoints")
    with open(os.path.join(ckpt_dir, f"model_{args.agent}.json"),
              encoding="utf-8") as f:
        model_ckpt = json.load(f)
    psi = _load_mlp(model_ckpt["psis"][-1])
    latent_kind = model_ckpt["latent_kind"]
    z_dim = int(model_ckpt["z_dim"])
    actors = []
    for i in range(spec.n_agents):
        with open(os.path.join(ckpt_dir, f"agent_{i}.json"),
                  encoding="utf-8") as f:
            actors.append(_load_mlp(json.load(f)["actor"]))

    rng = stream(args.seed, "correspond")
    n_envs = max(1, args.steps // spec.horizon)
    env = TabularVecEnv(spec, n_envs, rng)
    obs = env.reset()
    eye = np.eye(spec.n_obs)
    obs_all, joint_all = [], []
    for _ in range(spec.horizon):
        enc = eye[obs]
        acts = [nn.categorical_sample_batch(nn.mlp_forward(a, enc), rng)
                for a in actors]
        others = [acts[i] for i in range(spec.n_agents) if i != args.agent]
        joint = others[0]
        for extra in others[1:]:
            joint = joint * spec.n_actions + extra
        obs_all.append(obs)
        joint_all.append(joint)
        obs, _, _ = env.step(np.stack(acts))
    obs_flat = np.concatenate(obs_all)
    joint_flat = np.concatenate(joint_all)
    n_joint = spec.n_actions ** (spec.n_agents - 1)

    enc = eye[obs_flat]
    out = nn.mlp_forward(psi, enc)
    if latent_kind == "cat":
        z_idx = nn.categorical_sample_batch(out, rng)
        n_z = z_dim
    else:
        if latent_kind == "gauss":
            out = out[:, :z_dim]
        z_idx = kmeans(out, n_joint, rng)
        n_z = n_joint
    matrices = correspondence_counts(z_idx, joint_flat, n_z, n_joint)
    out_path = args.out or os.path.join(run, f"correspond_{args.agent}.csv")
    _write_matrices(out_path, matrices)
    print(f"wrote {out_path}")
    return EXIT_OK


def _write_matrices(path: str, matrices) -> None:
    lines = ["matrix,row," + ",".join(
        f"c{i}" for i in range(matrices.z_given_a.shape[1]))]
    for name, m in (("z_given_a", matrices.z_given_a),
                    ("a_given_z", matrices.a_given_z)):
        for r in range(m.shape[0]):
            lines.append(f"{name},{r}," + ",".join(repr(float(x))
                                                   for x in m[r]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def cmd_verify(args) -> int:
    from .verify import run_correspondence_experiment
    result = run_correspondence_experiment(args.seed)
    if not np.isfinite(result.final_loss):
        print(f"training diverged: final loss {result.final_loss}",
              file=sys.stderr)
        return EXIT_RUNTIME
    os.makedirs(args.out, exist_ok=True)
    _write_matrices(os.path.join(args.out, "correspondence.csv"),
                    result.matrices)
    verdict = "pass" if result.injective else "fail"
    mapping = " ".join(str(int(z)) for z in result.argmax_map)
    print(f"argmax map (joint action -> latent): {mapping}")
    print(f"injectivity verdict: {verdict}")
    with open(os.path.join(args.out, "verdict.txt"), "w",
              encoding="utf-8") as f:
        f.write(verdict + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else 0
    handlers = {
        "gen-env": cmd_gen_env,
        "train": cmd_train,
        "batch": cmd_batch,
        "correspond": cmd_correspond,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (ValidationError, DomainError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
