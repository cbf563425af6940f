"""Train on OLATs rendered by the Lambert predictor itself and report how far
the validation photometric loss falls.

    python3 scripts/realizable_check.py --epochs 40 --out /tmp/realizable
"""

import argparse
import logging
import time
from pathlib import Path

from refield.dataset import Dataset, SynthConfig, synthesize_dataset
from refield.training import TrainConfig, TrainingData, train, write_log


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="realizable_run")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=0.5)
    ap.add_argument("--lights", type=int, default=20)
    ap.add_argument("--identities", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.out)
    cfg = SynthConfig(identities=args.identities, cameras=1, lights=args.lights, envs=1,
                      image_size=64, uv_size=32, ground_truth="analytic")
    if not (root / "data" / "manifest.json").exists():
        synthesize_dataset(cfg, root / "data")
    data = Dataset(root / "data")
    tc = TrainConfig(epochs=args.epochs, lr=args.lr, geometry="truth")
    t0 = time.time()
    res = train(data, tc, TrainingData(data, tc))
    write_log(root / "log.csv", res.log)
    last = res.log[-1]
    print(f"val loss {res.log[0]['val_loss']:.5f} -> {last['val_loss']:.5f}, "
          f"val si-mse {last['val_si_mse']:.6f} (Lambert baseline {res.baseline_si_mse:.2e}), "
          f"{time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
