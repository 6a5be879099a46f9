#!/usr/bin/env python3
"""Print trainable-parameter counts for every (model, strategy) pair.

    python scripts/param_table.py [--n_classes 31] [--oft_blocks 4] [--ia3_query true]
"""

import sys

from uavpeft.cli import main

if __name__ == "__main__":
    sys.exit(main(["params", *sys.argv[1:]]))
