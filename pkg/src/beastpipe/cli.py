"""Command-line entry point: serve-env, train (poly), train-mono, test.

Exit codes: 0 success, 2 usage/config errors, 3 connectivity failures.
"""
from __future__ import annotations

import argparse
import os
import sys
import threading

import numpy as np

from .envs import ENV_FACTORIES, make_env
from .pipeline import (
    CheckpointError,
    ConfigError,
    ConnectError,
    PipelineConfig,
    evaluate_greedy,
    mono_run,
    parse_address,
    poly_run,
    restore,
)


def _default_logdir() -> str:
    return os.environ.get("BEASTPIPE_LOGDIR", "runs")


def _add_training_flags(p: argparse.ArgumentParser, *, batch_size, unroll, total):
    p.add_argument("--batch_size", type=int, default=batch_size)
    p.add_argument("--unroll_length", type=int, default=unroll)
    p.add_argument("--total_steps", type=int, default=total,
                   help="environment frames to consume before stopping")
    p.add_argument("--learning_rate", type=float, default=0.005)
    p.add_argument("--discounting", type=float, default=0.99)
    p.add_argument("--entropy_cost", type=float, default=0.01)
    p.add_argument("--baseline_cost", type=float, default=0.5)
    p.add_argument("--rho_bar", type=float, default=1.0)
    p.add_argument("--c_bar", type=float, default=1.0)
    p.add_argument("--rmsprop_decay", type=float, default=0.99)
    p.add_argument("--rmsprop_epsilon", type=float, default=0.01)
    p.add_argument("--grad_norm_clip", type=float, default=40.0)
    p.add_argument("--hidden_size", type=int, default=128)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--logdir", type=str, default=_default_logdir())
    p.add_argument("--checkpoint_every", type=int, default=0,
                   help="write a checkpoint every N learner steps (0 = off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beastpipe", description="Actor-learner RL training platform"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve-env", help="run an environment server")
    serve.add_argument("--env", type=str, default="bandit",
                       help=f"one of: {', '.join(sorted(ENV_FACTORIES))}")
    serve.add_argument("--address", type=str, default="127.0.0.1:4431")
    serve.add_argument("--max_connections", type=int, default=4)

    train = sub.add_parser("train", help="networked (poly) training")
    train.add_argument("--server_addresses", type=str, default="127.0.0.1:4431",
                       help="comma-separated host:port list")
    train.add_argument("--num_actors", type=int, default=2)
    train.add_argument("--connect_retries", type=int, default=40)
    _add_training_flags(train, batch_size=4, unroll=4, total=20_000)

    mono = sub.add_parser("train-mono", help="single-process training")
    mono.add_argument("--env", type=str, default="grid5")
    mono.add_argument("--num_actors", type=int, default=4)
    mono.add_argument("--num_buffers", type=int, default=16)
    mono.add_argument("--num_learner_threads", type=int, default=2)
    _add_training_flags(mono, batch_size=8, unroll=20, total=500_000)

    test = sub.add_parser("test", help="greedy evaluation of a checkpoint")
    test.add_argument("--checkpoint", type=str, required=True)
    test.add_argument("--env", type=str, default="grid5")
    test.add_argument("--episodes", type=int, default=100)
    return parser


def _config_from_args(args: argparse.Namespace, **overrides) -> PipelineConfig:
    return PipelineConfig(
        unroll_length=args.unroll_length,
        batch_size=args.batch_size,
        total_steps=args.total_steps,
        num_actors=args.num_actors,
        discounting=args.discounting,
        rho_bar=args.rho_bar,
        c_bar=args.c_bar,
        baseline_cost=args.baseline_cost,
        entropy_cost=args.entropy_cost,
        learning_rate=args.learning_rate,
        rmsprop_decay=args.rmsprop_decay,
        rmsprop_epsilon=args.rmsprop_epsilon,
        grad_norm_clip=args.grad_norm_clip,
        hidden_size=args.hidden_size,
        seed=args.seed,
        logdir=args.logdir,
        checkpoint_every=args.checkpoint_every,
        **overrides,
    )


def cmd_serve_env(args: argparse.Namespace) -> int:
    try:
        env_factory = ENV_FACTORIES[args.env]
    except KeyError:
        print(
            f"unknown env '{args.env}'; valid names: {', '.join(sorted(ENV_FACTORIES))}",
            file=sys.stderr,
        )
        return 2
    try:
        address = parse_address(args.address)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    from .envs import EnvServer

    # concurrent sessions are tiny request-reply loops; keep handoffs snappy
    sys.setswitchinterval(0.0005)
    server = EnvServer(address, env_factory, max_connections=args.max_connections)
    try:
        server.start()
    except OSError as exc:
        print(f"could not bind {args.address}: {exc}", file=sys.stderr)
        return 2
    host, port = server.bound_address
    print(f"serving {args.env} on {host}:{port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    addresses = tuple(a.strip() for a in args.server_addresses.split(",") if a.strip())
    try:
        cfg = _config_from_args(
            args, server_addresses=addresses, connect_retries=args.connect_retries
        )
        cfg.validate_poly()
        record = poly_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConnectError as exc:
        print(f"connect error: {exc}", file=sys.stderr)
        return 3
    print(
        f"done: step={record.step} frames={record.frames} "
        f"mean_episode_return={record.mean_episode_return:.4f} fps={record.fps:.0f}"
    )
    return 0


def cmd_train_mono(args: argparse.Namespace) -> int:
    try:
        cfg = _config_from_args(
            args,
            env_name=args.env,
            num_buffers=args.num_buffers,
            num_learner_threads=args.num_learner_threads,
        )
        cfg.validate_mono()
        make_env(args.env)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    record = mono_run(cfg)
    print(
        f"done: step={record.step} frames={record.frames} "
        f"mean_episode_return={record.mean_episode_return:.4f} fps={record.fps:.0f}"
    )
    return 0


def cmd_test(args: argparse.Namespace) -> int:
    if args.episodes < 1:
        print("episodes must be >= 1", file=sys.stderr)
        return 2
    try:
        make_env(args.env)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        params = restore(args.checkpoint)
        returns = evaluate_greedy(params, args.env, args.episodes)
    except (OSError, CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    print(
        f"episodes={args.episodes} mean={np.mean(returns):.4f} "
        f"min={np.min(returns):.4f} max={np.max(returns):.4f}"
    )
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "serve-env": cmd_serve_env,
        "train": cmd_train,
        "train-mono": cmd_train_mono,
        "test": cmd_test,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
