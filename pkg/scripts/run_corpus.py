#!/usr/bin/env python3
"""Run every bundled scenario and report one line per run.

Exit code 0 means every scenario settled and met its declared
expectations; 1 means at least one did not.  With --jsonl the full
result records are written out for external analysis.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cfaudit.scenario import run_scenario

DEFAULT_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dir", type=Path, default=DEFAULT_DIR,
                        help="directory holding .scn files")
    parser.add_argument("--jsonl", type=Path, default=None,
                        help="write one JSON record per scenario to this file")
    args = parser.parse_args()

    paths = sorted(args.dir.glob("*.scn"))
    if not paths:
        print(f"no scenarios under {args.dir}", file=sys.stderr)
        return 1

    records = []
    failed = 0
    for path in paths:
        res = run_scenario(path)
        records.append(res)
        status = "ok" if res.ok else "FAILED"
        print(f"{res.name:20} {status:7} ticks={res.ticks:<7} "
              f"verdicts={','.join(res.verdicts) or 'none':12} "
              f"violation={res.violation}")
        for failure in res.failures:
            print(f"{'':20} - {failure}")
        failed += 0 if res.ok else 1

    if args.jsonl:
        args.jsonl.write_text("".join(r.to_json() + "\n" for r in records))
        print(f"wrote {len(records)} records to {args.jsonl}")

    print(f"{len(paths) - failed}/{len(paths)} scenarios ok")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
