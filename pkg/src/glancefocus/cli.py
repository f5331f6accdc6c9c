"""Command-line entry point: ``glancefocus <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import runner
from .errors import ConfigError, ContractError, FormatError, TrainingError

EXIT_CODES = {ConfigError: 3, ContractError: 4, TrainingError: 5, FormatError: 6}
EXIT_VERIFY_FAILED = 1
COMMANDS = ("gen-data", "pretrain", "stage1", "stage2", "stage3", "calibrate", "eval", "ablate", "sweep", "plot",
            "verify")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--run-dir", help="run directory (default: runs/<config hash>-seed<seed>)")
    common.add_argument("--runs-root", default="runs", help="parent of the default run directory")
    common.add_argument("--overwrite", action="store_true", help="replace outputs that already exist")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="glancefocus", description="Glance/focus adaptive patch selection on "
                                     "synthetic moving-glyph videos.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate train/calibration/test splits",
        "pretrain": "train f_G and f_L with throwaway linear heads",
        "stage1": "warm up f_L and f_C on random crops",
        "stage2": "train the patch policy (and skip gate) with PPO",
        "stage3": "fine-tune the classifier under the learned policy",
        "calibrate": "solve skip thresholds for each keep fraction",
        "eval": "accuracy and multiply-adds on the test split",
        "ablate": "policy, reward or feature-reuse ablation",
        "sweep": "accuracy vs multiply-adds over patch sizes and keep fractions",
        "plot": "render plots from sweep/eval metrics",
        "verify": "gradient, reward zero-mean and online/offline checks",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "ablate":
            p.add_argument("--kind", choices=("policies", "rewards", "reuse"), default="policies")
    return parser


def resolve(args) -> tuple[config_mod.RunConfig, Path]:
    """Config from --config/--set, or the one stored in --run-dir when neither is given."""
    run_dir = Path(args.run_dir) if args.run_dir else None
    explicit = args.config is not None or bool(args.overrides)
    if run_dir is not None and (run_dir / "config.ini").exists() and not explicit:
        cfg = config_mod.load(run_dir / "config.ini")
    else:
        cfg = config_mod.load(args.config, args.overrides)
    return cfg, run_dir or runner.default_run_dir(cfg, args.runs_root)


def dispatch(args) -> int:
    cfg, run_dir = resolve(args)
    if args.command == "verify":
        checks = runner.cmd_verify(cfg, run_dir)
        for c in checks:
            print(c.line())
        return 0 if all(c.passed for c in checks) else EXIT_VERIFY_FAILED
    run = runner.RunDir.open(run_dir, cfg)
    if args.command == "gen-data":
        splits = runner.gen_data(run, args.overwrite)
        print(f"wrote {', '.join(f'{r}={len(s)}' for r, s in splits.items())} to {run.path / 'data'}")
    elif args.command in ("pretrain", "stage1", "stage2", "stage3"):
        fn = {"pretrain": runner.cmd_pretrain, "stage1": runner.cmd_stage1, "stage2": runner.cmd_stage2,
              "stage3": runner.cmd_stage3}[args.command]
        fn(run, args.overwrite)
        print(f"wrote {run.checkpoint(args.command)}")
    elif args.command == "calibrate":
        out = runner.cmd_calibrate(run, args.overwrite)
        for eta, c in out["thresholds"].items():
            print(f"eta={eta} rho={c['rho']:.6f} kept={c['kept_fraction']:.4f}")
    elif args.command == "eval":
        for r in runner.cmd_eval(run, args.overwrite):
            print(f"{r.mode:7s} {r.label:10s} top1={r.top1:.4f} flops={r.mean_flops:.4g} keep={r.keep_rate:.3f}")
    elif args.command == "ablate":
        out = runner.cmd_ablate(run, args.kind, args.overwrite)
        recs = out["records"]
        for r in (recs.values() if isinstance(recs, dict) else recs):
            print(f"{r.label:18s} top1={r.top1:.4f} flops={r.mean_flops:.4g}")
        for v, rate in out.get("overlap", {}).items():
            print(f"overlap {v:10s} {rate:.4f}")
    elif args.command == "sweep":
        for p in runner.cmd_sweep(run, args.overwrite):
            print(f"P={p['patch_size']} eta={p['eta']} top1={p['top1']:.4f} flops={p['mean_flops']:.4g}")
    elif args.command == "plot":
        for p in runner.cmd_plot(run, args.overwrite):
            print(f"wrote {p}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        return dispatch(args)
    except tuple(EXIT_CODES) as exc:
        code = next(c for t, c in EXIT_CODES.items() if isinstance(exc, t))
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
