"""Train the toy model for 5k steps and score pose following at several guidance scales.

    python scripts/controllability.py --steps 5000 --scales 0,1,2 --out runs/control
"""

import argparse
from dataclasses import replace
from pathlib import Path

from ditlab.checkpoint import save_checkpoint
from ditlab.evaluation import evaluate
from ditlab.flow import FlowSchedule
from ditlab.presets import TOY_MODEL, TOY_TRAIN, toy_dataset
from ditlab.train import train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--scales", default="0,1,2")
    parser.add_argument("--sample-seeds", type=int, default=1)
    parser.add_argument("--out", default="runs/control")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = toy_dataset()
    # tau = 0 means 20% of the run
    result = train(replace(TOY_TRAIN, total_iterations=args.steps, tau=0, seed=args.seed), TOY_MODEL, data,
                   log_every=500)
    result.log.write_csv(out / "runlog.csv")
    save_checkpoint(out / "checkpoint.bin", result.model)
    print(f"condition drop frequency during training: {result.log.drop_frequency:.4f}")
    for scale in (float(s) for s in args.scales.split(",")):
        report = evaluate(result.model, data.val, FlowSchedule(cfg_scale=scale), seeds=range(args.sample_seeds))
        (out / f"eval_cfg{scale:g}.txt").write_text(report.text() + "\n")
        print(f"cfg {scale:g}: hit rate {report.pose_hit_rate:.3f}, pose error {report.pose_error_px:.2f}px, "
              f"val mse {report.val_mse:.5f}")


if __name__ == "__main__":
    main()
