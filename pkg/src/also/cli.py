"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (including
incomplete episodes).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .environment import ENV_KINDS, EnvConfig, Environment
from .errors import AlsoError, InvalidConfig, UnknownMethod
from .evaluation import (
    EpisodeLog,
    budget_report,
    count_budget_calls,
    drift_stats,
    episode_summary,
)
from .harness import (
    ABLATION_MATRIX,
    ABLATIONS,
    METHODS,
    RunConfig,
    canonical_json,
    load_checkpoint,
    load_config,
    output_dir,
    run_episode,
    run_experiment,
    train_across,
    write_experiment,
)
from .presets import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# CLI flag -> RunConfig field
_FIELD_FLAGS = {
    "method": "method",
    "eta": "eta",
    "lam": "lam",
    "gamma": "gamma",
    "epsilon": "epsilon",
    "nu": "nu",
    "lambda_reg": "lambda_reg",
    "architecture": "architecture",
    "hidden": "hidden",
    "activation": "activation",
    "buffer_capacity": "buffer_capacity",
    "context_window": "context_window",
    "embedding_dim": "embedding_dim",
    "pool": "pool_path",
    "init_checkpoint": "init_checkpoint",
}


def _config_from_args(args) -> RunConfig:
    preset = getattr(args, "preset", None)
    if preset and args.config:
        raise InvalidConfig("use either --config or --preset, not both")
    if preset:
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[preset]()
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    for flag, name in _FIELD_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    if args.seeds:
        changes["seeds"] = tuple(args.seeds)
    if args.ablation:
        changes["ablation_flags"] = tuple(args.ablation)
    if args.bilateral:
        changes["bilateral"] = True
    if args.freeze_surrogate:
        changes["freeze_surrogate"] = True
    if args.lr is not None:
        changes["train"] = {**cfg.train.__dict__, "lr": args.lr}
    if args.round_granularity == "episode":
        changes["round_length"] = args.round_length or 20
    elif args.round_length:
        changes["round_length"] = args.round_length
    env = {}
    if args.turns:
        env["turns_per_episode"] = args.turns
    if args.env_kind:
        env["kind"] = args.env_kind
    if args.env_seed is not None:
        env["seed"] = args.env_seed
    if env:
        changes["env"] = env
    return cfg.replace(**changes) if changes else cfg


def _add_common(p):
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--preset", help=f"named configuration: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds (run uses the first)")
    p.add_argument("--turns", type=int, help="turns per episode")
    p.add_argument("--env-kind", choices=ENV_KINDS)
    p.add_argument("--env-seed", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--ablation", nargs="+", choices=ABLATIONS)
    p.add_argument("--bilateral", action="store_true", help="both agents run independent optimizers")
    p.add_argument("--eta", type=float)
    p.add_argument("--lam", type=float, help="score decay lambda")
    p.add_argument("--gamma", type=float, help="uniform-mixing floor")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--nu", type=float)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--architecture", choices=("linear", "mlp1", "mlp2_preln"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--activation", choices=("gelu", "relu"))
    p.add_argument("--lr", type=float)
    p.add_argument("--buffer-capacity", type=int)
    p.add_argument("--context-window", type=int)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--pool", help="strategy pool file (JSONL)")
    p.add_argument("--init-checkpoint", help="start the surrogate from this checkpoint")
    p.add_argument("--freeze-surrogate", action="store_true", help="never train the surrogate")
    p.add_argument("--round-granularity", choices=("turn", "episode"), default="turn")
    p.add_argument("--round-length", type=int, help="turns per round in episode granularity")
    p.add_argument("--output-dir", help="output directory (else $ALSO_OUTPUT_DIR, else ./runs)")


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    log = run_episode(cfg.replace(variants=()), cfg.seeds[0])
    out = output_dir(cfg, args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "episode.json").write_text(canonical_json(log.to_dict()) + "\n")
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    print(json.dumps(episode_summary(log), sort_keys=True, indent=2))
    if log.incomplete:
        print(f"episode incomplete: {log.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _sweep(cfg, args) -> int:
    report = run_experiment(cfg)
    paths = write_experiment(report, cfg, output_dir(cfg, args.output_dir))
    for name in report.win_rates["variants"]:
        m = report.aggregates[name]["mean_reward"]
        print(f"{name}: mean reward {m['mean']:.4f} +/- {m['se']:.4f} (n={m['n']})")
    print(f"wrote {paths['report']}")
    return EXIT_RUNTIME if report.incomplete else EXIT_OK


def cmd_experiment(args) -> int:
    return _sweep(_config_from_args(args), args)


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    variants = tuple({"name": name, "ablation": name} for name in ABLATION_MATRIX)
    return _sweep(cfg.replace(method="also", ablation_flags=(), variants=variants), args)


def cmd_calibrate(args) -> int:
    rows, ok = [], True
    for seed in args.seeds or range(5):
        env = Environment(EnvConfig(kind="drifting", turns_per_episode=args.turns, seed=seed,
                                    drift_variance_range=(args.target_low, args.target_high)))
        records = [env.step(t % env.K) for t in range(args.turns)]
        stats = drift_stats(EpisodeLog("calibration", "p1", "round_robin", seed, records=records))
        var = [stats[k]["variance"] for k in sorted(stats)]
        inside = all(args.low <= v <= args.high for v in var)
        ok &= inside
        rows.append({"seed": seed, "variances": var, "within_band": inside})
    print(json.dumps({"band": [args.low, args.high], "seeds": rows, "all_within": ok}, indent=2))
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_budget(args) -> int:
    rows = []
    for method in args.methods:
        for T in args.T:
            formula = budget_report(method, T)
            counted = count_budget_calls(method, T)
            rows.append({
                "method": method, "T": T,
                "agent_calls": formula.agent_calls,
                "evaluator_calls": formula.evaluator_calls,
                "optimizer_calls": formula.optimizer_calls,
                "counters_match": formula.as_tuple() == counted.as_tuple(),
            })
    print(json.dumps(rows, indent=2))
    return EXIT_OK if all(r["counters_match"] for r in rows) else EXIT_RUNTIME


def cmd_checkpoint_export(args) -> int:
    cfg = _config_from_args(args)
    logs = train_across(cfg.replace(variants=()), cfg.seeds, args.dest)
    means = [float(np.mean(log.rewards)) for log in logs]
    print(json.dumps({"checkpoint": args.dest, "episodes": len(logs), "mean_rewards": means}))
    return EXIT_OK


def cmd_checkpoint_import(args) -> int:
    state = load_checkpoint(args.source)
    print(json.dumps({
        "config": state.net.config.__dict__,
        "step_count": state.net.step_count,
        "n_params": state.net.n_params,
        "buffer_size": len(state.buffer),
    }, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="also", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode and print its summary")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("experiment", help="run every variant x seed and write reports")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", help="run the component ablation matrix")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("calibrate-drift", help="per-arm reward variance of the drifting env")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--turns", type=int, default=2000)
    p.add_argument("--target-low", type=float, default=0.004)
    p.add_argument("--target-high", type=float, default=0.015)
    p.add_argument("--low", type=float, default=0.0032, help="acceptance band low")
    p.add_argument("--high", type=float, default=0.018, help="acceptance band high")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("budget", help="per-episode call budgets")
    p.add_argument("--methods", nargs="+", default=["vanilla", "instinct", "also", "opro", "evoprompt"])
    p.add_argument("-T", type=int, nargs="+", default=[20])
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("checkpoint", help="export or import surrogate checkpoints")
    csub = p.add_subparsers(dest="action", required=True)
    e = csub.add_parser("export", help="train across the given seeds and save the surrogate")
    _add_common(e)
    e.add_argument("--out", dest="dest", required=True, help="checkpoint path")
    e.set_defaults(func=cmd_checkpoint_export)
    i = csub.add_parser("import", help="validate a checkpoint and print its summary")
    i.add_argument("source")
    i.set_defaults(func=cmd_checkpoint_import)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, UnknownMethod) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AlsoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
