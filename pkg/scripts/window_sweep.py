#!/usr/bin/env python3
"""Sweep evidence-buffer capacity against branch density.

For each bundled density probe and each capacity, measure the longest
stretch of app execution that runs before its evidence is audited.
Emits one row per (program, capacity) pair; --csv writes the same rows
for plotting elsewhere.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cfaudit.scenario import measure_attack_window

PROGRAM_DIR = Path(__file__).resolve().parent.parent / "scenarios" / "programs"
PROBES = ("window_dense", "window_mid", "window_sparse")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--capacities", default="1024 2048 4096 8192",
                        help="log capacities in bytes")
    parser.add_argument("--delta", type=int, default=500_000,
                        help="instruction budget per authorization")
    parser.add_argument("--csv", type=Path, default=None,
                        help="write rows to this file as CSV")
    args = parser.parse_args()
    capacities = [int(tok, 0) for tok in args.capacities.replace(",", " ").split()]

    rows = []
    print(f"{'program':16} {'log_max':>8} {'max_window':>11} {'slices':>7}")
    for name in PROBES:
        text = (PROGRAM_DIR / f"{name}.asm").read_text()
        for cap in capacities:
            wm = measure_attack_window(text, log_max=cap, delta=args.delta)
            rows.append({"program": name, "log_max": cap,
                         "max_window": wm.max_window, "slices": wm.slices})
            print(f"{name:16} {cap:>8} {wm.max_window:>11} {wm.slices:>7}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
