"""Command-line entry point: preprocess, fit-env, train, evaluate, synth."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import ALGORITHMS
from .datasets import (
    BINARIZE_RULES,
    SynthConfig,
    generate_synthetic,
    kcore_filter,
    load_event_stream,
    load_session_log,
    save_session_log,
    segment_sessions,
    temporal_split,
)
from .environment import (
    EnvConfig,
    ResponseFitConfig,
    ResponseModel,
    ResponseModelConfig,
    SimulatedEnvironment,
    UserPool,
    fit_response_model,
)
from .harness import ExperimentConfig, evaluate, run_experiment
from .policy import Policy


def _cmd_synth(args) -> int:
    config = SynthConfig(n_users=args.users, n_items=args.items, k=args.k,
                         n_records=args.records, latent_dim=args.latent_dim,
                         noise_scale=args.noise, seed=args.seed)
    log = generate_synthetic(config)
    save_session_log(log, args.out)
    print(f"wrote {len(log)} records (catalog {log.catalog_size}, k {log.list_size}) "
          f"to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    events = load_event_stream(args.input, rule=args.rule)
    log = segment_sessions(events, args.list_size, max_history=args.max_history)
    if args.kcore > 0:
        log = kcore_filter(log, args.kcore)
    if args.split:
        train, eval_ = temporal_split(log, args.split)
        out = Path(args.out)
        save_session_log(train, out.with_suffix(".train.tsv"))
        save_session_log(eval_, out.with_suffix(".eval.tsv"))
        print(f"wrote {len(train)}/{len(eval_)} train/eval records")
    save_session_log(log, args.out)
    print(f"wrote {len(log)} records to {args.out}")
    return 0


def _cmd_fit_env(args) -> int:
    log = load_session_log(args.data)
    config = ResponseModelConfig(catalog_size=log.catalog_size,
                                 user_feature_cards=log.feature_cards,
                                 dim=args.dim, max_history=args.max_history)
    model, losses = fit_response_model(
        log, config, ResponseFitConfig(epochs=args.epochs, batch_size=args.batch,
                                       lr=args.lr, seed=args.seed))
    model.save(args.out, sidecar={"slate_size": log.list_size,
                                  "catalog_size": log.catalog_size,
                                  "seed": args.seed})
    print(f"fit response model on {len(log)} records; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; saved to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig()
    if args.algo:
        config = replace(config, algorithm=args.algo)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.iters is not None:
        config = replace(config, iterations=args.iters)
    if args.out:
        config = replace(config, out_dir=args.out)
    result = run_experiment(config)
    final = result.final_metrics()
    print(f"{config.algorithm} seed {config.seed}: "
          f"mean total reward {final.get('mean_total_reward')} "
          f"depth {final.get('mean_depth')} (results in {result.out_dir})")
    return 0


def _cmd_evaluate(args) -> int:
    policy = Policy.load(args.policy)
    model = ResponseModel.load(args.env)
    sidecar = json.loads(Path(args.env).with_suffix(".json").read_text())
    log = load_session_log(args.data)
    env_settings = sidecar.get("env", {})
    env = SimulatedEnvironment(model, UserPool(log), EnvConfig(
        slate_size=sidecar.get("slate_size", log.list_size),
        temper_budget=env_settings.get("temper_budget", 10.0),
        temper_alpha=env_settings.get("temper_alpha", 2.0),
        max_depth=env_settings.get("max_depth", 20),
        seed=args.seed))
    agg = evaluate(policy, env, args.sessions, seed=args.seed)
    print(json.dumps({"mean_total_reward": agg.mean_total_reward,
                      "mean_depth": agg.mean_depth,
                      "reward_variance": agg.reward_variance}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slaterl",
        description="latent-action reinforcement learning for slate recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic interaction log")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--records", type=int, default=2000)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="events TSV -> unified session log")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rule", choices=BINARIZE_RULES, default="identity")
    p.add_argument("--list-size", type=int, default=10)
    p.add_argument("--kcore", type=int, default=0)
    p.add_argument("--max-history", type=int, default=50)
    p.add_argument("--split", type=float, default=None,
                   help="also write a temporal train/eval split at this fraction")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("fit-env", help="train a user response model on a log")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--max-history", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_fit_env)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved policy in a saved environment")
    p.add_argument("--policy", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--data", required=True, help="log providing the user pool")
    p.add_argument("--sessions", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
