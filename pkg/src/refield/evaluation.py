"""Si-MSE evaluation reports split by same-pose and different-pose targets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .losses import si_mse

# Real light-stage numbers reported for the full method (same pose, different
# pose). Kept for reference only; the synthetic pipeline does not reproduce them.
REFERENCE_SI_MSE = {"same_pose": 0.00070, "different_pose": 0.00084}

SPLITS = ("same_pose", "different_pose")


@dataclass
class EvalRecord:
    sample: str
    same_pose: bool
    prediction: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None = None


def eval_report(records, path=None) -> dict:
    """Per-sample Si-MSE plus mean/std per split; optionally written as CSV.

    Returns ``{split: (mean, std, count)}`` for the splits that have samples.
    """
    rows = []
    for r in records:
        if r.prediction is None or r.target is None:
            raise ValueError(f"sample {r.sample} is not paired with ground truth")
        rows.append((r.sample, SPLITS[0] if r.same_pose else SPLITS[1],
                     si_mse(r.prediction, r.target, r.mask)))
    summary = {}
    for split in SPLITS:
        vals = np.array([v for _, s, v in rows if s == split])
        if len(vals):
            summary[split] = (float(vals.mean()), float(vals.std()), len(vals))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "split", "sample", "si_mse"])
            for sample, split, v in rows:
                w.writerow(["sample", split, sample, f"{v:.9g}"])
            for split, (mean, std, n) in summary.items():
                w.writerow(["mean", split, n, f"{mean:.9g}"])
                w.writerow(["std", split, n, f"{std:.9g}"])
    return summary
