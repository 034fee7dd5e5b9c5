"""Train the desk-scale models on artifacts/desk.mpds.

Usage: python scripts/train_models.py [kind ...]

Default kinds are mp_rbfn and basic_rbfn; add mp_rbfn_no_interp, mlp_tanh or
mlp_sigmoid for the architecture comparison. Checkpoints and loss curves land
in the output directory of configs/desk.json (runs/desk).
"""

import sys
from pathlib import Path

from mprbfn import cli

ROOT = Path(__file__).resolve().parents[1]


def main(argv) -> int:
    kinds = argv or ["mp_rbfn", "basic_rbfn"]
    data = str(ROOT / "artifacts" / "desk.mpds")
    for kind in kinds:
        print(f"== {kind}")
        code = cli.main(["--config", str(ROOT / "configs" / "desk.json"), "train", data, "--kind", kind])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
