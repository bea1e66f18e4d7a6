#!/usr/bin/env python3
"""Run the impact experiment over benchmarks/ and save the table under results/.

Extra arguments are passed through to `staleguard experiment impact`.
"""

import sys
from pathlib import Path

from staleguard.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    out = ROOT / "results"
    out.mkdir(exist_ok=True)
    sys.exit(main(["experiment", "impact", "--suite", str(ROOT / "benchmarks"),
                   "--csv", str(out / "impact.csv"), *sys.argv[1:]]))
