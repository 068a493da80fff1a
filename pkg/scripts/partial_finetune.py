"""Full versus partial fine-tuning from a pretrained stand-in backbone.

The backbone is first trained with the pose path held silent (``backbone``
mask), so it learns to render scenes from the reference alone. Both fine-tuning
variants then start from that checkpoint and add pose control under matched
streams; the report gives the relative gap in final validation loss.

    python scripts/partial_finetune.py --pretrain-steps 2000 --steps 2000 --seeds 0,1,2
"""

import argparse
from dataclasses import replace
from pathlib import Path

from ditlab.checkpoint import save_checkpoint
from ditlab.presets import TOY_MODEL, TOY_TRAIN, toy_dataset
from ditlab.train import run_ablation, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pretrain-steps", type=int, default=2000)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--out", default="runs/partial_finetune")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = toy_dataset()
    backbone = out / "backbone.bin"
    pre = train(replace(TOY_TRAIN, total_iterations=args.pretrain_steps, mask_mode="backbone", seed=1000),
                TOY_MODEL, data)
    save_checkpoint(backbone, pre.model)
    print(f"backbone pretrained for {args.pretrain_steps} steps, val loss {pre.log.final_val:.5f}")

    base = replace(TOY_TRAIN, total_iterations=args.steps, init_checkpoint=str(backbone))
    lines = []
    for seed in (int(s) for s in args.seeds.split(",")):
        report = run_ablation("mask", replace(base, seed=seed), TOY_MODEL, data)
        lines.append(f"seed {seed}: {report.verdict}")
        print(lines[-1], flush=True)
    (out / "verdict.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
