"""``uavpeft`` command line: synth, train, kfold, params, report.

Configuration is a flat ``key = value`` file. Any key may be overridden with
``--set key=value`` or ``--key value``; later overrides win.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import DataError, synth_generate
from .dsp import AudioFormatError
from .experiment import consolidate, params_table, render_params_table, run_kfold, run_single
from .peft import StrategyError
from .tensor import NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; 2 is reserved for data errors
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", help="shorthand for --set seed=N")
    common.add_argument("--parallel-folds", dest="parallel_folds", help="worker processes for kfold")

    p = _Parser(prog="uavpeft", description="UAV audio classification with parameter-efficient fine-tuning.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="write the synthetic dataset and manifest")
    s.add_argument("out", nargs="?", help="output directory (or config key 'out')")
    t = sub.add_parser("train", parents=[common], help="single split training run")
    t.add_argument("out", nargs="?", help="run directory (or config key 'out')")
    k = sub.add_parser("kfold", parents=[common], help="k-fold cross validation")
    k.add_argument("out", nargs="?", help="run directory (or config key 'out')")
    sub.add_parser("params", parents=[common], help="trainable-parameter table over models and strategies")
    r = sub.add_parser("report", parents=[common], help="consolidate completed run directories")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("-o", "--output", default="report.csv", help="consolidated CSV path")
    return p


def _split_generic(argv: list[str]) -> tuple[list[str], list[tuple[str, str]]]:
    """Pull ``--<config key> value`` / ``--<config key>=value`` pairs out of argv."""
    keys = set(RunConfig.keys()) - {"seed", "parallel_folds"}
    rest, pairs = [], []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and len(arg) > 2:
            name, eq, value = arg[2:].partition("=")
            key = name.replace("-", "_")
            if key in keys:
                if not eq:
                    if i + 1 >= len(argv):
                        raise UsageError(f"--{name} expects a value")
                    value = argv[i + 1]
                    i += 1
                pairs.append((key, value))
                i += 1
                continue
        rest.append(arg)
        i += 1
    return rest, pairs


def _resolve(ns, pairs) -> RunConfig:
    overrides = []
    for item in ns.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append((key.strip(), value))
    overrides += pairs
    if ns.seed is not None:
        overrides.append(("seed", ns.seed))
    if ns.parallel_folds is not None:
        overrides.append(("parallel_folds", ns.parallel_folds))
    if getattr(ns, "out", None):
        overrides.append(("out", ns.out))
    cfg = load_config(ns.config, overrides)
    cfg.validate()
    return cfg


def _require_out(cfg: RunConfig, command: str) -> Path:
    if not cfg.out:
        raise UsageError(f"{command}: missing output path (positional argument or 'out' key)")
    return Path(cfg.out)


def _require_manifest(cfg: RunConfig) -> None:
    if not cfg.manifest:
        raise UsageError("missing 'manifest' key")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, pairs = _split_generic(argv)
        ns = _parser().parse_args(rest)
        if ns.command is None:
            raise UsageError("a command is required: synth, train, kfold, params, report")
        cfg = _resolve(ns, pairs)
        if ns.command == "synth":
            manifest = synth_generate(cfg.synth_config(), _require_out(cfg, "synth"))
            print(manifest)
        elif ns.command == "train":
            _require_manifest(cfg)
            summary = run_single(cfg, _require_out(cfg, "train"))
            v, inf = summary["validation"], summary["inference"]
            print(
                f"{cfg.model}/{cfg.strategy}: validation acc {100 * v['accuracy']:.2f}% f1 {100 * v['f1']:.2f}% | "
                f"inference acc {100 * inf['accuracy']:.2f}% | trainable {summary['trainable_pct']:.2f}%"
            )
        elif ns.command == "kfold":
            _require_manifest(cfg)
            summary = run_kfold(cfg, _require_out(cfg, "kfold"))
            print(f"{cfg.model}/{cfg.strategy} augs={cfg.augs}: {summary.row()}")
        elif ns.command == "params":
            print(render_params_table(params_table(cfg)), end="")
        elif ns.command == "report":
            rows = consolidate(ns.runs, ns.output)
            print(f"wrote {ns.output} ({len(rows)} rows)")
        return EXIT_OK
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AudioFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, StrategyError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
