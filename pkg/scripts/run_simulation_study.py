#!/usr/bin/env python3
"""Run the simulation-study grid and write raw + aggregated CSVs.

Usage:
    python3 scripts/run_simulation_study.py [--config docs/config_example.kv]
                                            [--out out/study] [--jobs 1] [--seed 0]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from unlinked import bench, serialize  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("out/study"))
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    kv = serialize.read_kv(args.config) if args.config else {}
    config = bench.config_from_kv(kv)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    raw, metrics = bench.run_simulation_study(config, args.out, jobs=args.jobs)
    print(f"raw replicates: {raw}")
    print(f"metrics: {metrics}")
    for line in Path(metrics).read_text().splitlines():
        print(line)


if __name__ == "__main__":
    main()
