"""Desk-scale training run: synthesize a small light-stage dataset, fit geometry,
train the texel perceptron and compare held-out Si-MSE with the Lambert baseline.

    python3 scripts/desk_training.py --epochs 30 --lr 0.5 --out /tmp/desk
    python3 scripts/desk_training.py --lr 0.05 --out /tmp/desk_slow   # default step size
"""

import argparse
import logging
import time
from pathlib import Path

from refield.dataset import Dataset, SynthConfig, synthesize_dataset
from refield.training import TrainConfig, TrainingData, train, write_log


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="desk_run")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=0.5)
    ap.add_argument("--identities", type=int, default=4)
    ap.add_argument("--cameras", type=int, default=2)
    ap.add_argument("--lights", type=int, default=30)
    ap.add_argument("--uv-size", type=int, default=64)
    ap.add_argument("--geometry", choices=["fit", "truth"], default="fit")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.out)
    if not (root / "data" / "manifest.json").exists():
        synthesize_dataset(SynthConfig(identities=args.identities, cameras=args.cameras, lights=args.lights,
                                       envs=1, uv_size=args.uv_size, seed=args.seed), root / "data")
    data = Dataset(root / "data")
    tc = TrainConfig(epochs=args.epochs, lr=args.lr, geometry=args.geometry, seed=args.seed)
    t0 = time.time()
    res = train(data, tc, TrainingData(data, tc))
    write_log(root / "log.csv", res.log)
    best = min(res.log[1:] or res.log, key=lambda r: r["val_si_mse"])
    last = res.log[-1]
    print(f"Lambert baseline si-mse {res.baseline_si_mse:.5f}")
    print(f"final   si-mse {last['val_si_mse']:.5f} ({last['val_si_mse'] / res.baseline_si_mse:.2f}x baseline)")
    print(f"best    si-mse {best['val_si_mse']:.5f} at epoch {best['epoch']}")
    print(f"{time.time() - t0:.0f} s, log in {root / 'log.csv'}")


if __name__ == "__main__":
    main()
