"""Command line entry point: ``codaf {gen-data,train,eval,ablate,check,plot}``.

Exit codes: 0 success, 1 invalid input (config, files, compatibility),
2 numerical failure (non-finite loss, broken identity, failed check suite).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml
from pydantic import ValidationError

from .checkpoint import CheckpointError
from .config import OUTPUT_ROOT_ENV, RunConfig, load_config
from .synthgen import DatasetError

log = logging.getLogger("codaf")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _config(args) -> RunConfig:
    return load_config(args.config, seed=getattr(args, "seed", None), epochs=getattr(args, "epochs", None))


def cmd_gen_data(args) -> int:
    from .synthgen import write_dataset

    cfg = _config(args)
    for path, scene, count in ((cfg.train_path, cfg.scene, cfg.train_count),
                               (cfg.eval_path, cfg.eval_scene(), cfg.eval_count)):
        write_dataset(scene, count, path, workers=args.workers)
        print(f"wrote {count} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    res = train(cfg)
    print(f"final AP@.5={res['final_ap50']:.4f} AP@.5:.95={res['final_ap50_95']:.4f} "
          f"best AP@.5={res['best_ap50']:.4f} -> {cfg.out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    data = Path(args.data)
    report = evaluate_checkpoint(args.checkpoint, data)
    text = json.dumps(report, indent=2, default=str)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation, summarize

    cfg = _config(args)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out) if args.out else cfg.out_path / "ablation.csv"
    rows = run_ablation(cfg, axes, seeds, out_csv=out)
    print(format_table(summarize(rows)))
    print(f"rows -> {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .check import run_all

    ok, results = run_all(seeds=args.seeds, trials=args.trials, mutate=args.mutate)
    for r in results:
        print(r.line())
    print("ALL PASS" if ok else "FAILURES")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plot(args) -> int:
    from .plots import plot_files

    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / "plots"
    for p in plot_files(args.files, out):
        print(p)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse's own usage errors exit 2, which is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codaf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config; omitted keys take their defaults")
        sp.add_argument("--seed", type=int)
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate the train/eval synthetic splits"))
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="train one configuration"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    a = with_config(sub.add_parser("ablate", help="train ablation variants and tabulate AP"))
    a.add_argument("--axes", required=True, help="comma separated, e.g. osa,magn,lambda-sweep")
    a.add_argument("--seeds", default="0", help="comma separated seeds")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", help="CSV path (default: <output_dir>/ablation.csv)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("check", help="gradient and oracle-equivalence suites")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--mutate", help="flip the gradient sign of this op (self-test of the checker)")
    c.set_defaults(func=cmd_check)

    pl = sub.add_parser("plot", help="PNG plots from metrics.csv or ablation CSV files")
    pl.add_argument("files", nargs="+")
    pl.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/plots)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .train import CompatibilityError, NumericalError

    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"invalid config:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, OSError, yaml.YAMLError, CheckpointError, DatasetError,
            CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
