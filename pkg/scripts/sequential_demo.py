"""Four-family sequential run at desk scale, printing R, forgetting and ranks.

    python3 scripts/sequential_demo.py [--per-class 30] [--epochs 8] [--mode dynamic]
"""

import argparse
import logging
import tempfile

import numpy as np

from dynlora.config import TrainConfig
from dynlora.glyphgen import generate_dataset
from dynlora.trainer import TaskSpec, train_sequential


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--mode", default="dynamic", choices=("dynamic", "fixed_rank", "full_ft"))
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    tasks = [TaskSpec(f"family{f}", generate_dataset(f, args.per_class, args.seed, "train"),
                      generate_dataset(f, max(2, args.per_class // 4), args.seed, "test")) for f in range(4)]
    cfg = TrainConfig(mode=args.mode, lr=3e-3 if args.mode != "full_ft" else 1e-3, micro_batch=32,
                      accumulation_steps=1, max_epochs=args.epochs, early_stop_patience=5, augment=False,
                      lambda_sparsity=args.lam, seed=args.seed)
    with tempfile.TemporaryDirectory() as ckpt_dir:
        res = train_sequential(tasks, cfg, checkpoint_dir=ckpt_dir)
    np.set_printoptions(precision=3, suppress=True)
    print("accuracy matrix R[task, after stage]:")
    print(res.R)
    print("forgetting:", [round(f, 3) for f in res.forgetting])
    for t, ranks in enumerate(res.active_ranks):
        print(f"stage {t}: total active rank {sum(ranks.values())}, checkpoint {res.checkpoint_sizes[t]} bytes")


if __name__ == "__main__":
    main()
