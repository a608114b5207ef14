"""Command-line surface: train, eval, shd-eval, sweep, export-metrics.

Exit codes: 0 on success, 2 for usage errors (bad flags, unknown env or
config key), 1 for runtime failures (with a diagnostic line on stderr).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import shutil
import sys

import numpy as np

from .config import ConfigError, RunConfig, apply_mode, build_run_config, load_run_config
from .envs import make_env
from .metrics import evaluate
from .models import Model, ModelConfig
from .training import run_training

METRIC_COLUMNS = [
    "step", "seed", "env", "episodic_return_mean", "episodic_return_ci",
    "shd_mean", "reduction_pct", "loss_total", "loss_policy", "loss_value",
    "loss_reward", "loss_recon", "loss_sparsity",
]


class MetricsWriter:
    def __init__(self, path: str):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_COLUMNS)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row.get(c, "") for c in METRIC_COLUMNS])


def format_ci(ci: tuple[float, float]) -> str:
    return f"{ci[0]:.6g}:{ci[1]:.6g}"


def parse_ci(text: str) -> tuple[float, float]:
    lo, hi = text.split(":")
    return float(lo), float(hi)


def run_experiment(cfg: RunConfig, out_dir: str, quiet: bool = False) -> list[dict]:
    """Train every seed in the config, writing metrics and checkpoints."""
    cfg = apply_mode(cfg)
    os.makedirs(out_dir, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["out_dir"] = out_dir
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2)
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))

    all_rows = []
    first_ckpt = None
    for seed in cfg.seeds:
        env = make_env(cfg.env, seed)
        model_cfg = ModelConfig(observation_width=env.observation_width,
                                cardinalities=env.space.cardinalities,
                                **cfg.model)
        model = Model(model_cfg, np.random.default_rng(seed))

        def eval_fn(m, step, _seed=seed):
            report = evaluate(m, cfg.env, cfg.search,
                              episodes=cfg.eval_episodes, seed=_seed)
            return {
                "env": cfg.env,
                "episodic_return_mean": report.return_mean,
                "episodic_return_ci": format_ci(report.return_ci),
                "shd_mean": report.shd_mean if report.shd_mean is not None else float("nan"),
                "reduction_pct": 100.0 * report.reduction_mean,
            }

        def log(row):
            if not quiet:
                print(f"[seed {row['seed']}] step {row['step']}: "
                      f"return {row.get('episodic_return_mean', float('nan')):.2f} "
                      f"loss {row['loss_total']:.4f}", flush=True)

        rows = run_training(
            env_factory=lambda s: make_env(cfg.env, s),
            model=model,
            search_cfg=cfg.search,
            train_cfg=cfg.train,
            seed=seed,
            eval_interval=cfg.eval_interval,
            eval_episodes=cfg.eval_episodes,
            eval_fn=eval_fn,
            on_metrics=writer.append,
            log=log,
        )
        all_rows.extend(rows)
        ckpt = os.path.join(out_dir, f"final_seed{seed}.ckpt")
        model.save(ckpt, extra_meta={"env": cfg.env, "mode": cfg.mode, "seed": seed})
        if first_ckpt is None:
            first_ckpt = ckpt
    if first_ckpt is not None:
        shutil.copyfile(first_ckpt, os.path.join(out_dir, "final.ckpt"))
    return all_rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.vanilla and args.no_abstraction:
        raise ConfigError("--vanilla and --no-abstraction are mutually exclusive")
    if args.vanilla:
        cfg.mode = "vanilla"
    elif args.no_abstraction:
        cfg.mode = "no-abstraction"
    if args.unfrozen_h:
        cfg.train = dataclasses.replace(cfg.train, unfrozen_structure=True)
    if args.no_recon:
        cfg.train = dataclasses.replace(cfg.train, recon_coef=0.0)
    out_dir = args.out or cfg.out_dir
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    run_experiment(cfg, out_dir, quiet=args.quiet)
    print(f"run complete: {out_dir}")
    return 0


def _load_model(path: str) -> tuple[Model, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Model.load(path)


def _search_cfg_for(env_id: str, vanilla: bool):
    cfg = build_run_config({"env": env_id})
    search = cfg.search
    if vanilla:
        search = dataclasses.replace(search, vanilla_mode=True)
    return search


def _cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    search = _search_cfg_for(args.env, args.vanilla)
    out_rows = []
    for seed in args.seeds:
        report = evaluate(model, args.env, search, episodes=args.episodes, seed=seed)
        shd_text = f"{report.shd_mean:.3f}" if report.shd_mean is not None else "n/a"
        print(f"seed {seed}: return {report.return_mean:.3f} "
              f"ci [{report.return_ci[0]:.3f}, {report.return_ci[1]:.3f}] "
              f"shd {shd_text} reduction {100 * report.reduction_mean:.1f}% "
              f"normalized {report.normalized_score:.3f}")
        out_rows.append({
            "seed": seed,
            "env": args.env,
            "episodic_return_mean": report.return_mean,
            "episodic_return_ci": format_ci(report.return_ci),
            "shd_mean": report.shd_mean if report.shd_mean is not None else float("nan"),
            "reduction_pct": 100.0 * report.reduction_mean,
            "normalized_score": report.normalized_score,
        })
    out_path = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.env}.csv")
    with open(out_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(out_rows[0].keys()))
        w.writeheader()
        w.writerows(out_rows)
    print(f"report written to {out_path}")
    return 0


def _cmd_shd_eval(args) -> int:
    if args.env != "cmab":
        raise ConfigError("shd-eval needs an environment with ground-truth masks (cmab)")
    model, meta = _load_model(args.checkpoint)
    search = _search_cfg_for(args.env, vanilla=False)
    report = evaluate(model, args.env, search, episodes=args.episodes, seed=args.seed)
    counts = np.bincount(report.shd_values, minlength=4)
    print(f"states visited: {len(report.shd_values)}")
    print(f"mean shd: {report.shd_mean:.4f}")
    for d, c in enumerate(counts):
        print(f"  shd={d}: {c}")
    print(f"mean root reduction: {100 * report.reduction_mean:.2f}%")
    return 0


PARAM_ALIASES = {"sparsity_lambda": "train.sparsity_coef"}


def _set_param(raw: dict, name: str, value) -> dict:
    name = PARAM_ALIASES.get(name, name)
    raw = json.loads(json.dumps(raw))  # deep copy
    if "." in name:
        section, key = name.split(".", 1)
        raw.setdefault(section, {})[key] = value
        return raw
    for section in ("train", "search", "model"):
        section_cls_keys = build_run_config({}).to_dict()[section].keys()
        if name in section_cls_keys:
            raw.setdefault(section, {})[name] = value
            return raw
    if name in ("env", "seeds", "eval_interval", "eval_episodes", "mode"):
        raw[name] = value
        return raw
    raise ConfigError(f"unknown sweep parameter {name!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _cmd_sweep(args) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    values = [_parse_value(v) for v in args.values.split(",")]
    for value in values:
        modified = _set_param(raw, args.param, value)
        cfg = build_run_config(modified)
        run_dir = os.path.join(args.out, f"{args.param.replace('.', '_')}_{value}")
        print(f"=== sweep {args.param}={value} -> {run_dir}")
        run_experiment(cfg, run_dir, quiet=args.quiet)
    return 0


def _cmd_export_metrics(args) -> int:
    path = os.path.join(args.run, "metrics.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no metrics found at {path}")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if args.format == "csv":
        writer = csv.DictWriter(sys.stdout, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    else:
        typed = []
        for row in rows:
            out = {}
            for key, val in row.items():
                if key in ("env", "episodic_return_ci"):
                    out[key] = val
                elif key in ("step", "seed"):
                    out[key] = int(val)
                else:
                    out[key] = float(val) if val else None
            typed.append(out)
        json.dump(typed, sys.stdout, indent=2)
        print()
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factored-mcts",
        description="Tree-search agent with learned action abstraction over factored action spaces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--vanilla", action="store_true",
                   help="force all-ones masks everywhere (plain MuZero-style baseline)")
    p.add_argument("--no-abstraction", action="store_true",
                   help="train the masked model but search without abstraction")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--frozen-h", dest="unfrozen_h", action="store_false",
                   help="structure net trained only by the reconstruction loss (default)")
    g.add_argument("--unfrozen-h", dest="unfrozen_h", action="store_true",
                   help="structure net also receives policy/value/reward gradients")
    p.set_defaults(unfrozen_h=False)
    p.add_argument("--no-recon", action="store_true",
                   help="zero the reconstruction loss coefficient")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--vanilla", action="store_true")
    p.add_argument("--out", help="CSV report path (default: next to the checkpoint)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("shd-eval", help="mask accuracy against ground-truth relevance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", default="cmab")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_shd_eval)

    p = sub.add_parser("sweep", help="train once per value of one config parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-metrics", help="re-emit a run's metrics stream")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=_cmd_export_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - diagnostic surface for the CLI
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
