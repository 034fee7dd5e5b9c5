"""Solve the desk-scale OCP grid and write artifacts/desk.mpds.

Usage: python scripts/gen_desk_dataset.py [--jobs N] [--out PATH]

The acceptance suite reuses the file when its grid and solver settings match
configs/desk.json. A fresh build takes about three hours on one core.
"""

import argparse
import sys
import time
from pathlib import Path

from mprbfn import cli, dataset

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    ap.add_argument("--out", default=str(ROOT / "artifacts" / "desk.mpds"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = cli.load_config(args.config)
    grid, params, oc = cli.grid_from(cfg), cli.vehicle_from(cfg), cli.ocp_from(cfg)
    t0 = time.perf_counter()

    def progress(i, n):
        if i % 1000 == 0 or i == n:
            print(f"{i}/{n} solved, {time.perf_counter() - t0:.0f} s", file=sys.stderr, flush=True)

    ds = dataset.build_dataset(grid, params, oc, jobs=args.jobs, seed=cfg["seed"], progress=progress)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataset.save(ds, args.out)
    m = ds.metadata
    print(f"wrote {args.out}: {m['accepted']} accepted of {m['candidates']} candidates "
          f"({m['pruned']} pruned by the envelope), {time.perf_counter() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
