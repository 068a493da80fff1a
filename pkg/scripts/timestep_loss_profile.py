"""Validation loss of a trained toy model, binned by timestep.

Under the velocity objective the irreducible loss grows as the timestep shrinks,
which is why a schedule biased towards small timesteps reports a *higher*
training loss even when it learns just as fast. This script measures that
profile so the warmup comparison can be read correctly.

    python scripts/timestep_loss_profile.py --steps 2000 --bins 10
"""

import argparse
from dataclasses import replace

import numpy as np

from ditlab.flow import Batch, batch_loss
from ditlab.model import as_tensors
from ditlab.presets import TOY_MODEL, TOY_TRAIN, toy_dataset
from ditlab.train import train


def profile(model, samples, bins: int, seed: int, t_max: float = 1000.0):
    rng = np.random.default_rng(seed)
    params = as_tensors(model.params)
    centres = (np.arange(bins) + 0.5) / bins * t_max
    frames = np.stack([s.frames for s in samples])
    out = []
    for t in centres:
        batch = Batch(frames, np.stack([s.poses for s in samples]), np.stack([s.reference for s in samples]),
                      np.full(len(samples), t), rng.standard_normal(frames.shape), np.zeros(len(samples), bool))
        out.append(float(batch_loss(params, model.config, batch).data))
    return centres, out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--mode", default="uniform", choices=("uniform", "low_noise", "high_noise"))
    parser.add_argument("--bins", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    data = toy_dataset()
    config = replace(TOY_TRAIN, total_iterations=args.steps, warmup_mode=args.mode, seed=args.seed)
    result = train(config, TOY_MODEL, data, log_every=max(1, args.steps // 10))
    centres, losses = profile(result.model, data.val, args.bins, args.seed)
    print("timestep  val_loss")
    for t, v in zip(centres, losses):
        print(f"{t:8.1f}  {v:.5f}")


if __name__ == "__main__":
    main()
