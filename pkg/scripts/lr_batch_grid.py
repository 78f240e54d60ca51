"""3x3 learning-rate / batch grid on generated families, via the CLI.

    python3 scripts/lr_batch_grid.py --out grid_run [--families 0,3] [--per-class 40]
"""

import argparse
import sys
from pathlib import Path

from dynlora.cli import main as cli


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="grid_run")
    p.add_argument("--families", default="0")
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--lr", default="1e-3,3e-3,1e-2")
    p.add_argument("--batch", default="8,16,32")
    p.add_argument("--epochs", type=int, default=8)
    args = p.parse_args()

    out = Path(args.out)
    dirs = []
    for fam in args.families.split(","):
        d = out / "data" / f"family{fam}"
        code = cli(["generate-data", "--family", fam, "--per-class", str(args.per_class), "--out", str(d)])
        if code:
            return code
        dirs.append(str(d.resolve()))
    cfg = out / "grid.cfg"
    cfg.write_text(f"max_epochs = {args.epochs}\npatience = 3\nlambda = 1e-3\nseed = 0\n"
                   f"tasks = {', '.join(dirs)}\n")
    return cli(["ablate", "--config", str(cfg), "--out", str(out / "grid"), "--no-augment",
                "--grid", f"lr={args.lr}", f"batch={args.batch}"])


if __name__ == "__main__":
    sys.exit(main())
