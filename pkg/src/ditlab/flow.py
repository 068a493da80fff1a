"""Rectified-flow noising, velocity objective and guided Euler sampling.

Timesteps live on ``[0, T_max]`` and map to the interpolation fraction
``s = t / T_max``: ``x_t = (1 - s) x0 + s eps`` so small timesteps mean little
added noise. Frames are moved to ``[-1, 1]`` before entering the flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensor as T
from .model import DiT, as_tensors, forward, patch_tokens
from .tensor import Tape
from .timesteps import WarmupSchedule, inverse_cdf


@dataclass(frozen=True)
class FlowSchedule:
    t_max: float = 1000.0
    num_inference_steps: int = 20
    cfg_scale: float = 2.0
    drop_rate: float = 0.05

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")


class VelocityModel(Protocol):
    def velocity(self, noisy, poses, reference, t, drop_reference=False) -> np.ndarray: ...


def to_model_space(x: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x) - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def _fraction(t, t_max: float, ndim: int) -> np.ndarray:
    s = np.asarray(t, dtype=np.float64) / t_max
    return s.reshape(s.shape + (1,) * (ndim - s.ndim)) if s.ndim else s


def add_noise(x0: np.ndarray, eps: np.ndarray, t, t_max: float = 1000.0) -> np.ndarray:
    """``(1 - t/T) x0 + (t/T) eps``; ``t`` is a scalar or one value per leading index."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"add_noise shape mismatch: {x0.shape} vs {eps.shape}")
    s = _fraction(t, t_max, x0.ndim)
    return ((1.0 - s) * x0 + s * eps).astype(x0.dtype, copy=False)


def velocity_target(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.asarray(eps) - np.asarray(x0)


@dataclass
class Batch:
    """One effective batch worth of model inputs and matched random draws."""

    frames: np.ndarray  # [B,3,F,H,W] in [0,1]
    poses: np.ndarray  # [B,3,F,H,W] binary
    reference: np.ndarray  # [B,3,H,W] in [0,1]
    t: np.ndarray  # [B]
    eps: np.ndarray  # [B,3,F,H,W]
    drop: np.ndarray  # [B] bool

    def __len__(self) -> int:
        return self.frames.shape[0]

    def split(self, start: int, stop: int) -> Batch:
        return Batch(*(getattr(self, k)[start:stop] for k in
                       ("frames", "poses", "reference", "t", "eps", "drop")))


def batch_loss(params, cfg, batch: Batch) -> T.Tensor:
    """Velocity-matching MSE over noise tokens for a prepared batch."""
    dtype = T.get_dtype()
    x0 = to_model_space(batch.frames).astype(dtype)
    eps = batch.eps.astype(dtype)
    noisy = add_noise(x0, eps, batch.t, cfg.t_max)
    pred = forward(
        params, cfg, noisy, to_model_space(batch.poses).astype(dtype),
        to_model_space(batch.reference).astype(dtype), batch.t, batch.drop,
    )
    target = patch_tokens(velocity_target(x0, eps), cfg.patch)
    return T.mse_loss(pred, target)


def draw_batch(samples, indices, u, eps_rng, drop_rng, schedule: WarmupSchedule,
               iteration: int, drop_rate: float) -> Batch:
    frames = np.stack([samples[i].frames for i in indices])
    return Batch(
        frames=frames,
        poses=np.stack([samples[i].poses for i in indices]),
        reference=np.stack([samples[i].reference for i in indices]),
        t=inverse_cdf(schedule, u, iteration),
        eps=eps_rng.standard_normal(frames.shape),
        drop=drop_rng.random(len(indices)) < drop_rate,
    )


def training_step_loss(model: DiT, sample, warmup: WarmupSchedule, iteration: int,
                       rng: np.random.Generator, drop_rate: float = 0.05):
    """Loss and gradients for one sample with freshly drawn timestep, noise and drop.

    Returns ``(loss, gradients, batch)``; gradients are keyed by parameter name.
    """
    batch = draw_batch([sample], [0], rng.random(1), rng, rng, warmup, iteration, drop_rate)
    tape = Tape()
    params = as_tensors(model.params, tape)
    loss = batch_loss(params, model.config, batch)
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[v] for k, v in params.items()}, batch


def guided_velocity(model: VelocityModel, x, poses, reference, t, cfg_scale: float) -> np.ndarray:
    """``v_uncond + w (v_cond - v_uncond)``, skipping the branch a scale of 0 or 1 ignores."""
    if cfg_scale == 1.0:
        return model.velocity(x, poses, reference, t, False)
    v_uncond = model.velocity(x, poses, reference, t, True)
    if cfg_scale == 0.0:
        return v_uncond
    v_cond = model.velocity(x, poses, reference, t, False)
    return v_uncond + cfg_scale * (v_cond - v_uncond)


def sample_video(model: VelocityModel, poses, reference, schedule: FlowSchedule,
                 rng: np.random.Generator, shape=None, model_space: bool = False) -> np.ndarray:
    """Euler-integrate from pure noise (``s = 1``) to data (``s = 0``).

    Inputs are batched ``poses [B,3,F,H,W]`` and ``reference [B,3,H,W]`` in
    pixel range; the result is ``[B,3,F,H,W]`` in ``[0, 1]`` (or raw model
    space with ``model_space=True``).
    """
    poses = np.asarray(poses)
    reference = np.asarray(reference)
    if shape is None:
        b, _, f, h, w = poses.shape
        shape = (b, reference.shape[1], f, h, w)
    dtype = T.get_dtype()
    x = rng.standard_normal(shape).astype(dtype)
    pm = to_model_space(poses).astype(dtype)
    rm = to_model_space(reference).astype(dtype)
    n = schedule.num_inference_steps
    for k in range(n):
        s = 1.0 - k / n
        t = np.full(shape[0], s * schedule.t_max)
        v = guided_velocity(model, x, pm, rm, t, schedule.cfg_scale)
        x = (x - (1.0 / n) * v).astype(dtype)
    return x if model_space else from_model_space(x)
