"""Training loop with gradient accumulation, group masking and ablation drivers."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .flow import Batch, batch_loss, draw_batch
from .model import DiT, ModelConfig, as_tensors, count_parameters, group_of, trainable_mask
from .scenes import Dataset, VideoSample
from .tensor import Tape
from .timesteps import WarmupSchedule

WORKERS_ENV = "DITLAB_WORKERS"
RUNLOG_COLUMNS = ("step", "raw_loss", "smoothed_loss", "lr", "timestep_mean_in_window")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    micro_batch: int = 4
    accumulation_steps: int = 1
    learning_rate: float = 1e-3
    total_iterations: int = 1000
    warmup_mode: str = "low_noise"
    alpha: float = 1.0
    tau: int = 0  # 0: 20% of total_iterations
    t_max: float = 1000.0
    mask_mode: str = "full"
    arch_mode: str = "simple"
    ref_net_k: int = 3
    seed: int = 0
    eval_every: int = 0  # 0: validate only after the last step
    drop_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    ema_beta: float = 0.98
    precision: str = "float32"
    val_timesteps: int = 4
    init_checkpoint: str = ""  # warm start: matching parameters are copied from this checkpoint

    def __post_init__(self):
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch and accumulation_steps must be >= 1")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.mask_mode not in ("full", "partial", "backbone"):
            raise ValueError(f"mask_mode must be full, partial or backbone, got {self.mask_mode!r}")
        if self.arch_mode not in ("simple", "ref_net"):
            raise ValueError(f"arch_mode must be simple or ref_net, got {self.arch_mode!r}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    @property
    def warmup_tau(self) -> int:
        return self.tau or max(1, round(0.2 * self.total_iterations))

    def schedule(self) -> WarmupSchedule:
        return WarmupSchedule(self.t_max, self.alpha, self.warmup_tau, self.warmup_mode)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        k = self.ref_net_k if self.arch_mode == "ref_net" else 0
        return replace(base, ref_net_k=k, t_max=self.t_max)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    mask: frozenset[str],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Decoupled-weight-decay Adam update, in place, for parameters whose group is in ``mask``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if group_of(name) not in mask:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# ---------------------------------------------------------------------------
# logging


def smooth(losses: Sequence[float], ema_beta: float = 0.98) -> list[float]:
    """Bias-corrected exponential moving average."""
    if not 0.0 <= ema_beta < 1.0:
        raise ValueError(f"ema_beta must lie in [0, 1), got {ema_beta}")
    out, m = [], 0.0
    for k, x in enumerate(losses, start=1):
        m = ema_beta * m + (1.0 - ema_beta) * x
        out.append(m / (1.0 - ema_beta**k))
    return out


@dataclass
class RunLog:
    config: dict
    raw_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    timestep_mean: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    drops: int = 0
    draws: int = 0
    ema_beta: float = 0.98

    @property
    def smoothed(self) -> list[float]:
        return smooth(self.raw_loss, self.ema_beta)

    @property
    def final_val(self) -> float:
        return self.val[-1][1] if self.val else float("nan")

    @property
    def drop_frequency(self) -> float:
        return self.drops / self.draws if self.draws else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for k, (raw, sm, lr, tm) in enumerate(zip(self.raw_loss, self.smoothed, self.lr, self.timestep_mean)):
                w.writerow([k, repr(raw), repr(sm), repr(lr), repr(tm)])

    def write_config(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.config.items()))

    @staticmethod
    def read_csv(path: str | Path) -> dict[str, list[float]]:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return {c: [float(r[c]) for r in rows] for c in RUNLOG_COLUMNS}


@dataclass
class TrainResult:
    log: RunLog
    model: DiT
    state: AdamState
    initial_params: dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# loop


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("data", "timestep", "noise", "drop", "val", "init")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def validation_batches(samples: Sequence[VideoSample], seed: int, num_t: int, t_max: float,
                       chunk: int = 16) -> list[Batch]:
    """Fixed noise and an evenly spaced timestep grid, derived from ``seed`` only."""
    rng = _streams(seed)["val"]
    ts = (np.arange(num_t) + 0.5) / num_t * t_max
    out = []
    items = [(i, t) for i in range(len(samples)) for t in ts]
    for lo in range(0, len(items), chunk):
        part = items[lo:lo + chunk]
        frames = np.stack([samples[i].frames for i, _ in part])
        out.append(Batch(
            frames=frames,
            poses=np.stack([samples[i].poses for i, _ in part]),
            reference=np.stack([samples[i].reference for i, _ in part]),
            t=np.array([t for _, t in part]),
            eps=rng.standard_normal(frames.shape),
            drop=np.zeros(len(part), dtype=bool),
        ))
    return out


def validation_loss(model: DiT, batches: Sequence[Batch]) -> float:
    params = as_tensors(model.params)
    total, count = 0.0, 0
    for b in batches:
        total += float(batch_loss(params, model.config, b).data) * len(b)
        count += len(b)
    return total / count


def gradient_step(model: DiT, batch: Batch, micro_batch: int, trainable: frozenset[str]):
    """Mean loss and mean gradients over ``batch``, accumulated micro-batch by micro-batch."""
    n = len(batch)
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for lo in range(0, n, micro_batch):
        sub = batch.split(lo, min(lo + micro_batch, n))
        weight = len(sub) / n
        tape = Tape()
        params = {
            k: (tape.watch(v) if group_of(k) in trainable else T.Tensor(v))
            for k, v in model.params.items()
        }
        loss = batch_loss(params, model.config, sub)
        g = tape.backward(loss)
        total += weight * float(loss.data)
        for k, v in params.items():
            if v.tape is None:
                continue
            gk = weight * g[v]
            grads[k] = gk if k not in grads else grads[k] + gk
    return total, grads


def warm_start(model: DiT, source: DiT) -> list[str]:
    """Copy every parameter whose name and shape match; returns the copied names."""
    copied = []
    for name, value in source.params.items():
        if name in model.params and model.params[name].shape == value.shape:
            model.params[name] = value.astype(np.float64)
            copied.append(name)
    if not copied:
        raise ValueError("warm start copied no parameters: checkpoint does not match the model")
    return copied


def train(config: TrainConfig, base_model: ModelConfig, dataset: Dataset, log_every: int = 0) -> TrainResult:
    """Deterministic given ``config.seed``: every random draw comes from seeded child streams."""
    if not dataset.train:
        raise ValueError("training set is empty")
    with T.precision(config.precision):
        dtype = T.get_dtype()
        cfg = config.model_config(base_model)
        model = DiT.initialize(cfg, config.seed)
        if config.init_checkpoint:
            warm_start(model, load_checkpoint(config.init_checkpoint))
        model.params = {k: v.astype(dtype) for k, v in model.params.items()}
        initial = {k: v.copy() for k, v in model.params.items()}
        mask = trainable_mask(config.mask_mode, model.params)
        state = AdamState.zeros(model.params)
        streams = _streams(config.seed)
        schedule = config.schedule()
        val_batches = validation_batches(dataset.val, config.seed, config.val_timesteps, config.t_max) if dataset.val else []
        log = RunLog(config=_snapshot(config, cfg), ema_beta=config.ema_beta)
        n, eff = len(dataset.train), config.effective_batch

        for step in range(config.total_iterations):
            start = time.perf_counter()
            indices = streams["data"].integers(n, size=eff)
            u = streams["timestep"].random(eff)
            batch = draw_batch(dataset.train, indices, u, streams["noise"], streams["drop"],
                               schedule, step, config.drop_rate)
            loss, grads = gradient_step(model, batch, config.micro_batch, mask)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at optimizer step {step}")
            adamw_step(model.params, grads, state, mask, config.learning_rate,
                       (config.beta1, config.beta2), config.weight_decay, config.adam_eps)
            log.raw_loss.append(loss)
            log.lr.append(config.learning_rate)
            log.timestep_mean.append(float(batch.t.mean()))
            log.drops += int(batch.drop.sum())
            log.draws += eff
            log.wall_clock.append(time.perf_counter() - start)
            last = step == config.total_iterations - 1
            if val_batches and (last or (config.eval_every and (step + 1) % config.eval_every == 0)):
                log.val.append((step, validation_loss(model, val_batches)))
            if log_every and (step % log_every == 0 or last):
                print(f"step {step:6d}  loss {loss:.5f}  smoothed {log.smoothed[-1]:.5f}", flush=True)
    return TrainResult(log, model, state, initial)


def _snapshot(config: TrainConfig, cfg: ModelConfig) -> dict:
    snap = {f"train.{k}": v for k, v in asdict(config).items()}
    snap.update({f"model.{k}": v for k, v in cfg.to_dict().items()})
    return snap


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = ("warmup", "batch", "arch", "mask")


@dataclass
class RunSummary:
    name: str
    config: TrainConfig
    log: RunLog
    parameter_count: int
    trainable_count: int


@dataclass
class AblationReport:
    kind: str
    runs: list[RunSummary]
    holds: bool
    verdict: str
    metrics: dict[str, float]


def ablation_configs(kind: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    if kind == "warmup":
        return [(m, replace(base, warmup_mode=m)) for m in ("low_noise", "uniform", "high_noise")]
    if kind == "batch":
        out = []
        for eff in (2, 16):
            micro = min(base.micro_batch, eff)
            while eff % micro:
                micro -= 1
            out.append((f"batch{eff}", replace(base, micro_batch=micro, accumulation_steps=eff // micro)))
        return out
    if kind == "arch":
        return [(a, replace(base, arch_mode=a)) for a in ("simple", "ref_net")]
    if kind == "mask":
        return [(m, replace(base, mask_mode=m)) for m in ("full", "partial")]
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATIONS}")


def _run_one(args) -> RunSummary:
    name, config, base_model, dataset = args
    result = train(config, base_model, dataset)
    mask = trainable_mask(config.mask_mode, result.model.params)
    trainable = sum(v.size for k, v in result.model.params.items() if group_of(k) in mask)
    return RunSummary(name, config, result.log, count_parameters(result.model.params), int(trainable))


def warmup_window(config: TrainConfig) -> tuple[int, int]:
    """Comparison window ``[tau/2, 5 tau/2]`` clipped to the run; [200, 1000] for tau = 400."""
    tau = config.warmup_tau
    return tau // 2, min(config.total_iterations - 1, 5 * tau // 2)


def steps_to_threshold(smoothed: Sequence[float], threshold: float) -> int | None:
    for k, v in enumerate(smoothed):
        if v <= threshold:
            return k
    return None


def judge(kind: str, runs: Sequence[RunSummary]) -> tuple[bool, str, dict[str, float]]:
    by = {r.name: r for r in runs}
    if kind == "warmup":
        lo, hi = warmup_window(runs[0].config)
        means = {n: float(np.mean(r.log.smoothed[lo:hi + 1])) for n, r in by.items()}
        holds = means["low_noise"] < means["uniform"] < means["high_noise"]
        text = (
            f"mean smoothed loss over steps [{lo}, {hi}]: low_noise {means['low_noise']:.5f}, "
            f"uniform {means['uniform']:.5f}, high_noise {means['high_noise']:.5f}; "
            f"expected ordering low_noise < uniform < high_noise {'HOLDS' if holds else 'FAILS'}"
        )
        return holds, text, means
    if kind == "batch":
        finals = {n: r.log.smoothed[-1] for n, r in by.items()}
        holds = finals["batch16"] < finals["batch2"]
        lr = {r.config.learning_rate for r in runs}
        text = (
            f"final smoothed loss at equal steps and lr {sorted(lr)}: batch16 {finals['batch16']:.5f}, "
            f"batch2 {finals['batch2']:.5f}; larger batch converges faster {'HOLDS' if holds else 'FAILS'}"
        )
        return holds, text, finals
    if kind == "mask":
        full, part = by["full"].log.final_val, by["partial"].log.final_val
        gap = abs(part - full) / full
        holds = gap <= 0.15
        text = (
            f"final val loss full {full:.5f}, partial {part:.5f}; relative gap {gap:.2%} "
            f"(threshold 15%) {'HOLDS' if holds else 'FAILS'}"
        )
        return holds, text, {"full": full, "partial": part, "gap": gap}
    if kind == "arch":
        simple, ref = by["simple"].log.smoothed, by["ref_net"].log.smoothed
        threshold = simple[-1]
        s_steps = steps_to_threshold(simple, threshold)
        r_steps = steps_to_threshold(ref, threshold)
        holds = r_steps is None or r_steps > s_steps
        r_text = "never" if r_steps is None else str(r_steps)
        text = (
            f"steps to reach simple final smoothed loss {threshold:.5f}: simple {s_steps}, "
            f"ref_net {r_text} (params simple {by['simple'].parameter_count}, "
            f"ref_net {by['ref_net'].parameter_count}); Reference-Net converges slower "
            f"{'HOLDS' if holds else 'FAILS'}"
        )
        total = len(ref)
        return holds, text, {"simple_steps": float(s_steps),
                             "ref_net_steps": float(total if r_steps is None else r_steps)}
    raise ValueError(f"unknown ablation kind {kind!r}")


def run_ablation(kind: str, base: TrainConfig, base_model: ModelConfig, dataset: Dataset,
                 workers: int | None = None) -> AblationReport:
    """Matched runs: every variant shares the seed, hence the data, timestep-uniform,
    noise and drop streams; only the ablated factor differs."""
    configs = ablation_configs(kind, base)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    jobs = [(n, c, base_model, dataset) for n, c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    holds, verdict, metrics = judge(kind, runs)
    return AblationReport(kind, runs, holds, verdict, metrics)
