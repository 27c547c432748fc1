"""Train every ablation row on one synthetic dataset and seed, then write the table.

    python scripts/ablation_sweep.py --out runs/ablation --epochs 10 --duration 900
"""

import argparse
import logging
from pathlib import Path

from samba.evaluation import run_ablations, write_ablation_table
from samba.synth import SynthConfig, generate
from samba.training import TrainConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--duration", type=float, default=1800.0, help="seconds per subject")
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    ds = generate(SynthConfig(duration_s=args.duration, n_subjects=args.subjects, seed=args.seed))
    rows = run_ablations(ds, train_cfg=TrainConfig(epochs=args.epochs, seed=args.seed))
    path = write_ablation_table(rows, Path(args.out) / "ablation.csv")
    print(f"{'row':32s} {'dir':4s} {'status':8s} {'conv':5s} {'rho60':>7s} {'rho15':>7s}")
    for r in rows:
        print(f"{r.name:32s} {r.direction:4s} {r.status:8s} {str(r.converged):5s} "
              f"{r.spearman_60:7.3f} {r.spearman_15:7.3f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
