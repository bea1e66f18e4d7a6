#!/usr/bin/env python3
"""Run the improve experiment over benchmarks/ and save the table under results/.

Extra arguments are passed through to `staleguard experiment improve`.
"""

import sys
from pathlib import Path

from staleguard.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    out = ROOT / "results"
    out.mkdir(exist_ok=True)
    sys.exit(main(["experiment", "improve", "--suite", str(ROOT / "benchmarks"),
                   "--csv", str(out / "improve.csv"), *sys.argv[1:]]))
