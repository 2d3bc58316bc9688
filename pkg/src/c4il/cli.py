"""Command-line experiment runner.

Subcommands: run, gradcheck, gen-data, sweep, report. The C4IL_OUT
environment variable overrides the output root. Exit codes: 0 ok,
1 config error, 2 check failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import (ConfigError, config_hash, load_config, parse_grid_file, save_config,
                     sweep_grid)
from .data import DataFormatError, gen_gaussian_mixture, save_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2
EXIT_IO = 3


def _resolve_out(cfg, config_path: Path, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get("C4IL_OUT")
    name = f"{config_path.stem}-{cfg.method_preset}-s{cfg.seed}"
    if root:
        return Path(root) / name
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("c4il-out") / name


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "preset", None) is not None:
        cfg = replace(cfg, method_preset=args.preset)
        cfg.validate()
    return cfg


def cmd_run(args) -> int:
    from .engine import run_experiment

    cfg = _apply_overrides(load_config(args.config), args)
    out = _resolve_out(cfg, Path(args.config), args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(cfg, out)
    print(f"run complete: preset={report['preset']} seed={report['seed']} "
          f"hash={report['config_hash']}")
    print(f"  final_acc={report['final_acc']:.4f} "
          f"avg_acc_except_first={report['avg_acc_except_first']:.4f}")
    print(f"  confusion_delta={report['confusion_delta']:.2f}pt "
          f"deviation_gap={report['deviation_gap']:.2f}pt "
          f"audit_violations={report['audit_violations']}")
    print(f"  artifacts in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    t0 = time.perf_counter()
    results = run_gradcheck(seed=args.seed, instances=args.instances, scale=args.scale)
    failed = [name for name, err in results.items() if not err < TOLERANCE]
    for name, err in sorted(results.items()):
        status = "FAIL" if name in failed else "ok"
        print(f"  {name:<24s} max_rel_err={err:.3e}  {status}")
    print(f"gradcheck: {len(results)} components in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.spec)
    if cfg.dataset_kind != "gaussian":
        raise ConfigError("gen-data requires dataset.kind = gaussian")
    per_class = cfg.dataset_train_per_class + cfg.dataset_eval_per_class
    samples = gen_gaussian_mixture(cfg.dataset_classes, cfg.dataset_dim, per_class,
                                   cfg.dataset_separation, cfg.seed)
    out = Path(args.out) if args.out else Path(args.spec).with_suffix(".csv")
    save_csv(samples, out)
    print(f"wrote {len(samples)} samples ({cfg.dataset_classes} classes x "
          f"{per_class} x {cfg.dataset_dim} dims) to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .engine import run_experiment

    base = _apply_overrides(load_config(args.config), args)
    grid = parse_grid_file(args.grid)
    configs = sweep_grid(base, grid)
    out_root = _resolve_out(base, Path(args.config), args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, cfg in enumerate(configs):
        sub = out_root / f"point_{i:03d}"
        sub.mkdir(parents=True, exist_ok=True)
        report = run_experiment(cfg, sub)
        rows.append((i, config_hash(cfg), cfg.loss_beta1, cfg.loss_lambda, cfg.loss_kappa1,
                     cfg.loss_eta1, report["final_acc"], report["avg_acc_except_first"]))
        print(f"point {i:03d}: hash={rows[-1][1]} avg_acc_except_first={rows[-1][7]:.4f}")
    rows.sort(key=lambda r: -r[7])
    summary = out_root / "summary.csv"
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("point,config_hash,beta1,lambda,kappa1,eta1,final_acc,avg_acc_except_first\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    print(f"sweep summary ({len(rows)} points) in {summary}")
    return EXIT_OK


def cmd_report(args) -> int:
    import json

    from .evaluation import write_report_csv

    run_dir = Path(args.dir)
    with open(run_dir / "report.json", "r", encoding="utf-8") as fh:
        report = json.load(fh)
    write_report_csv(report, run_dir / "report.csv")
    print(f"re-rendered {run_dir / 'report.csv'} (config hash {report['config_hash']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c4il", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run one experiment from a config file")
    runp.add_argument("config")
    runp.add_argument("--seed", type=int, default=None, help="override the config seed")
    runp.add_argument("--preset", default=None, help="override method.preset")
    runp.add_argument("--out", default=None, help="output directory")
    runp.set_defaults(fn=cmd_run)

    gc = sub.add_parser("gradcheck", help="finite-difference verification of every op and loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=100)
    gc.add_argument("--scale", type=int, default=1, help="multiply instance sizes")
    gc.set_defaults(fn=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="write a synthetic CSV dataset from a spec")
    gd.add_argument("spec")
    gd.add_argument("--out", default=None)
    gd.set_defaults(fn=cmd_gen_data)

    sw = sub.add_parser("sweep", help="grid-search loss weights")
    sw.add_argument("config")
    sw.add_argument("grid")
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--preset", default=None)
    sw.add_argument("--out", default=None)
    sw.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("report", help="re-render the CSV report from report.json")
    rp.add_argument("dir")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
