#!/usr/bin/env python3
"""Run one training command twice and diff metrics.jsonl with timing removed.

    python scripts/determinism_check.py runs/det --manifest data/manifest.csv --max_epochs 3
"""

import json
import sys
from pathlib import Path

from uavpeft.cli import main


def _strip(path: Path) -> list[dict]:
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        r.pop("seconds", None)
    return rows


def run(argv: list[str]) -> int:
    if not argv:
        print(__doc__.strip(), file=sys.stderr)
        return 1
    root, rest = Path(argv[0]), argv[1:]
    for name in ("a", "b"):
        code = main(["train", str(root / name), *rest])
        if code:
            return code
    same = _strip(root / "a" / "metrics.jsonl") == _strip(root / "b" / "metrics.jsonl")
    print("identical" if same else "DIFFERENT")
    return 0 if same else 4


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
