#!/usr/bin/env python3
"""k-fold benchmark of every applicable (model, strategy) pair on the synthetic set.

Generates the dataset if needed, runs one k-fold experiment per cell and
writes a consolidated ``report.csv``. Extra arguments are forwarded to each
``kfold`` call, e.g. ``--max_epochs 10 --augs 0``.

    python scripts/synthetic_benchmark.py runs/bench --models cnn --strategies full,ssf
"""

import argparse
import sys
import time
from pathlib import Path

from uavpeft.cli import main

APPLICABLE = {
    "cnn": ("full", "classifier_only", "batchnorm", "ssf"),
    "transformer": ("full", "classifier_only", "ssf", "ia3", "oft"),
}


def run(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", type=Path)
    ap.add_argument("--models", default="cnn,transformer")
    ap.add_argument("--strategies", default="", help="comma list; default: all applicable")
    ap.add_argument("--synth-classes", default="8")
    args, passthrough = ap.parse_known_args(argv)

    data = args.root / "data"
    manifest = data / "manifest.csv"
    if not manifest.is_file():
        code = main(["synth", str(data), "--synth_classes", args.synth_classes, *passthrough])
        if code:
            return code

    runs = []
    for model in args.models.split(","):
        wanted = args.strategies.split(",") if args.strategies else APPLICABLE[model]
        for strategy in wanted:
            if strategy not in APPLICABLE[model]:
                print(f"skip {model}/{strategy}: not applicable")
                continue
            out = args.root / f"{model}_{strategy}"
            start = time.perf_counter()
            code = main([
                "kfold", str(out), "--manifest", str(manifest), "--model", model, "--strategy", strategy,
                "--n_classes", args.synth_classes, "--feature_cache", str(args.root / "features"), *passthrough,
            ])
            if code:
                return code
            print(f"  ({time.perf_counter() - start:.0f}s)")
            runs.append(str(out))
    return main(["report", *runs, "-o", str(args.root / "report.csv")])


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
