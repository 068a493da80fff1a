"""Command-line entry point: ``ditlab <command> [--flags]``.

Commands: sampler-demo, data-gen, train, ablate, sample, eval, report.
Training-style commands read a flat ``key=value`` config file (``#`` starts a
comment); see ``CONFIG_KEYS`` for the full key list. Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointVersionError, load_checkpoint, save_checkpoint, sha256
from .evaluation import evaluate
from .flow import FlowSchedule, sample_video
from .model import ModelConfig
from .scenes import Dataset, dataset_seeds, read_sample, sample_from_seed, write_sample
from .svg import line_plot
from .timesteps import WarmupSchedule, inverse_cdf, ks_statistic, pdf, cdf
from .train import ABLATIONS, RunLog, TrainConfig, TrainingDiverged, run_ablation, train

FORMAT_VERSION = 1
MODEL_KEYS = ("patch", "embed_dim", "num_blocks", "num_heads", "mlp_ratio", "rope_base")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
CONFIG_KEYS = ("dataset", "out_dir") + TRAIN_KEYS + MODEL_KEYS


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def parse_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _coerce(cls, values: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        try:
            kwargs[f.name] = {"int": int, "float": float, "str": str}[kind](raw)
        except ValueError as exc:
            raise UsageError(f"config key {f.name}: {exc}") from None
    return kwargs


def build_configs(values: dict[str, str], dataset: Dataset) -> tuple[TrainConfig, ModelConfig]:
    try:
        train_cfg = TrainConfig(**_coerce(TrainConfig, values))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    first = (dataset.train or dataset.val)[0].spec
    model_values = {k: values[k] for k in MODEL_KEYS if k in values}
    model_values.update(frames=str(first.frames), height=str(first.height), width=str(first.width))
    try:
        model_cfg = ModelConfig(**_coerce(ModelConfig, model_values))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return train_cfg, model_cfg


# ---------------------------------------------------------------------------
# manifests


def write_manifest(out_dir: Path, command: str, seed: int, files: list[Path], started: str,
                   config: str | None = None, extra: dict | None = None) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": config,
        "output_dir": str(out_dir),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": {str(p.relative_to(out_dir)): sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def verify_manifest(out_dir: Path) -> None:
    manifest = json.loads((out_dir / "manifest.json").read_text())
    for name, digest in manifest["artifacts"].items():
        if sha256(out_dir / name) != digest:
            raise OSError(f"checksum mismatch for {out_dir / name}")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    return Dataset(
        [read_sample(root / name) for name in manifest["split"]["train"]],
        [read_sample(root / name) for name in manifest["split"]["val"]],
    )


# ---------------------------------------------------------------------------
# commands


def cmd_sampler_demo(args) -> int:
    try:
        schedule = WarmupSchedule(args.t_max, args.alpha, args.tau, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iterations = [int(v) for v in args.iterations.split(",")] if args.iterations else [
        0, schedule.tau // 4, schedule.tau // 2, 3 * schedule.tau // 4, schedule.tau]
    rng = np.random.default_rng(args.seed)
    xs = np.linspace(0.0, schedule.t_max, args.grid)
    edges = np.linspace(0.0, schedule.t_max, args.bins + 1)
    started = _now()
    density_rows, hist_rows, footer, curves = [], [], [], {}
    for i in iterations:
        p = pdf(schedule, xs, i)
        curves[f"i={i}"] = (xs.tolist(), p.tolist())
        density_rows += [(i, repr(float(x)), repr(float(v))) for x, v in zip(xs, p)]
        draws = inverse_cdf(schedule, rng.random(args.samples), i)
        counts, _ = np.histogram(draws, edges)
        width = edges[1] - edges[0]
        hist_rows += [(i, repr(float(lo)), repr(float(hi)), int(c), repr(float(c / (args.samples * width))))
                      for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        ks = ks_statistic(draws, lambda x, i=i: cdf(schedule, x, i))
        footer.append(f"iteration {i}: KS(samples, cdf) = {ks:.5f} ({'< 0.01 ok' if ks < 0.01 else 'EXCEEDS 0.01'})")
    files = [out / "density.csv", out / "histogram.csv", out / "density.svg", out / "sampler_demo.txt"]
    with open(files[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "x", "pdf"))
        w.writerows(density_rows)
    with open(files[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "bin_lo", "bin_hi", "count", "density"))
        w.writerows(hist_rows)
    files[2].write_text(line_plot(curves, f"timestep density ({schedule.mode}, alpha={schedule.alpha}, "
                                          f"tau={schedule.tau})", "timestep", "density"))
    files[3].write_text("\n".join(footer) + "\n")
    print("\n".join(footer))
    write_manifest(out, "sampler-demo", args.seed, files, started)
    verify_manifest(out)
    return 0


def cmd_data_gen(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        train_seeds, val_seeds = dataset_seeds(args.count, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    started = _now()
    files, split = [], {"train": [], "val": []}
    for part, seeds in (("train", train_seeds), ("val", val_seeds)):
        for s in seeds:
            idx = len(files)
            path = out / f"sample_{idx:05d}.bin"
            write_sample(path, sample_from_seed(s, args.frames, args.height, args.width, args.radius))
            files.append(path)
            split[part].append(path.name)
    write_manifest(out, "data-gen", args.seed, files, started, extra={"split": split})
    verify_manifest(out)
    print(f"wrote {len(files)} samples ({len(split['train'])} train / {len(split['val'])} val) to {out}")
    return 0


def _prepare(args):
    values = parse_config(args.config)
    if "dataset" not in values:
        raise UsageError(f"{args.config}: missing required key 'dataset'")
    dataset = load_dataset(values["dataset"])
    train_cfg, model_cfg = build_configs(values, dataset)
    out = Path(values.get("out_dir", "runs/default"))
    out.mkdir(parents=True, exist_ok=True)
    return values, dataset, train_cfg, model_cfg, out


def _write_run(out: Path, log: RunLog) -> list[Path]:
    files = [out / "runlog.csv", out / "config.txt"]
    log.write_csv(files[0])
    log.write_config(files[1])
    return files


def cmd_train(args) -> int:
    started = _now()
    values, dataset, train_cfg, model_cfg, out = _prepare(args)
    result = train(train_cfg, model_cfg, dataset, log_every=args.log_every)
    files = _write_run(out, result.log)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.model)
    files.append(ckpt)
    write_manifest(out, "train", train_cfg.seed, files, started, config=str(args.config),
                   extra={"final_val_loss": result.log.final_val})
    verify_manifest(out)
    print(f"finished {train_cfg.total_iterations} steps; final val loss {result.log.final_val:.6f}")
    return 0


def _curves_svg(runs: dict[str, list[float]], title: str) -> str:
    return line_plot({n: (list(range(len(v))), v) for n, v in runs.items()}, title,
                     "optimizer step", "smoothed training loss")


def cmd_ablate(args) -> int:
    started = _now()
    values, dataset, train_cfg, model_cfg, out = _prepare(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [train_cfg.seed]
    out = out / f"ablate_{args.kind}"
    out.mkdir(parents=True, exist_ok=True)
    files, verdicts, rows = [], [], []
    held = 0
    for seed in seeds:
        report = run_ablation(args.kind, replace(train_cfg, seed=seed), model_cfg, dataset)
        held += report.holds
        verdicts.append(f"seed {seed}: {report.verdict}")
        for run in report.runs:
            run_dir = out / f"seed{seed}" / run.name
            run_dir.mkdir(parents=True, exist_ok=True)
            files += [p for p in _write_run(run_dir, run.log)]
            rows.append((seed, run.name, run.parameter_count, run.trainable_count,
                         repr(run.log.smoothed[-1]), repr(run.log.final_val)))
        svg = out / f"curves_seed{seed}.svg"
        svg.write_text(_curves_svg({r.name: r.log.smoothed for r in report.runs},
                                   f"{args.kind} ablation, seed {seed}"))
        files.append(svg)
        print(verdicts[-1], flush=True)
    comparison = out / "comparison.csv"
    with open(comparison, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "run", "parameters", "trainable", "final_smoothed_loss", "final_val_loss"))
        w.writerows(rows)
    summary = f"VERDICT {args.kind}: expected ordering held for {held} of {len(seeds)} seeds"
    verdict = out / "verdict.txt"
    verdict.write_text("\n".join(verdicts + [summary]) + "\n")
    files += [comparison, verdict]
    print(summary)
    write_manifest(out, f"ablate {args.kind}", seeds[0], files, started, config=str(args.config))
    verify_manifest(out)
    return 0


def _load_for_sampling(args):
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(2) from None
    dataset = load_dataset(args.dataset)
    samples = dataset.val if args.split == "val" else dataset.train
    if args.limit:
        samples = samples[: args.limit]
    schedule = FlowSchedule(model.config.t_max, args.steps, args.cfg_scale)
    seeds = [args.seed + k for k in range(args.seeds)]
    return model, samples, schedule, seeds


def cmd_sample(args) -> int:
    started = _now()
    model, samples, schedule, seeds = _load_for_sampling(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for seed in seeds:
        video = sample_video(model, np.stack([s.poses for s in samples]),
                             np.stack([s.reference for s in samples]), schedule,
                             np.random.default_rng(seed))
        for k, (sample, frames) in enumerate(zip(samples, video)):
            path = out / f"seed{seed}_sample{k:04d}.bin"
            write_sample(path, replace(sample, frames=frames))
            files.append(path)
    write_manifest(out, "sample", args.seed, files, started,
                   extra={"cfg_scale": schedule.cfg_scale, "steps": schedule.num_inference_steps})
    verify_manifest(out)
    print(f"wrote {len(files)} generated clips to {out}")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    model, samples, schedule, seeds = _load_for_sampling(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, samples, schedule, seeds)
    files = [out / "eval_report.csv", out / "eval_report.txt"]
    files[0].write_text(report.csv_row())
    text = (f"cfg_scale {schedule.cfg_scale}, steps {schedule.num_inference_steps}, "
            f"seeds {len(seeds)}, clips {len(samples)}\n" + report.text() + "\n")
    files[1].write_text(text)
    print(text, end="")
    write_manifest(out, "eval", args.seed, files, started)
    verify_manifest(out)
    return 0


def cmd_report(args) -> int:
    root = Path(args.dir)
    logs = sorted(root.rglob("runlog.csv"))
    if not logs:
        raise FileNotFoundError(f"no runlog.csv under {root}")
    curves, lines = {}, []
    for path in logs:
        name = str(path.parent.relative_to(root)) or "."
        data = RunLog.read_csv(path)
        curves[name] = (data["step"], data["smoothed_loss"])
        lines.append(f"{name}: {len(data['step'])} steps, final smoothed loss {data['smoothed_loss'][-1]:.6f}")
    (root / "report.svg").write_text(line_plot(curves, "smoothed training loss", "optimizer step", "loss"))
    (root / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sampler-demo", help="dump warmup densities and sampled histograms")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tau", type=int, default=1000)
    p.add_argument("--t-max", type=float, default=1000.0)
    p.add_argument("--mode", default="low_noise", choices=("uniform", "low_noise", "high_noise"))
    p.add_argument("--iterations", default="", help="comma-separated iterations (default: 0..tau)")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sampler_demo)

    p = sub.add_parser("data-gen", help="write a synthetic sprite dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--radius", type=float, default=3.0)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run a matched ablation set")
    p.add_argument("--kind", required=True, choices=ABLATIONS)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="", help="comma-separated seeds (default: config seed)")
    p.set_defaults(func=cmd_ablate)

    for name, func, help_ in (("sample", cmd_sample, "generate clips from a checkpoint"),
                              ("eval", cmd_eval, "generate and score clips")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="val", choices=("train", "val"))
        p.add_argument("--cfg-scale", type=float, default=2.0)
        p.add_argument("--steps", type=int, default=20)
        p.add_argument("--seeds", type=int, default=1, help="number of sampling seeds")
        p.add_argument("--seed", type=int, default=0, help="first sampling seed")
        p.add_argument("--limit", type=int, default=0, help="only the first N clips")
        p.add_argument("--precision", default="float32", choices=("float32", "float64"))
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="plot and summarise every runlog.csv under a directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with T.precision(getattr(args, "precision", T.get_precision())):
            return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
