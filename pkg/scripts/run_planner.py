"""Closed-loop overtake and empty-road runs with the trained MP-RBFN.

Usage: python scripts/run_planner.py [checkpoint]

The default checkpoint is runs/desk/mp_rbfn.mpnet; pass ``analytic`` to use
the quintic baseline instead. Logs and SVG traces go to runs/desk.
"""

import sys
from pathlib import Path

from mprbfn import cli

ROOT = Path(__file__).resolve().parents[1]


def main(argv) -> int:
    model = argv[0] if argv else str(ROOT / "runs" / "desk" / "mp_rbfn.mpnet")
    worst = 0
    for scenario in ("overtake.json", "empty_road.json"):
        print(f"== {scenario}")
        code = cli.main(["--config", str(ROOT / "configs" / "desk.json"), "plan", model,
                         "--scenario", str(ROOT / "configs" / scenario)])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
