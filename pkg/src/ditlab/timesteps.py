"""Timestep distributions: uniform baseline and the dynamic low-noise warmup.

During warmup the density over ``[0, T_max]`` is a line tilted towards small
timesteps (less added noise). Its slope shrinks linearly with the iteration
and reaches zero at ``tau``, after which sampling is uniform. ``high_noise``
is the mirror image, tilted towards large timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

MODES = ("uniform", "low_noise", "high_noise")

# Below this slope the quadratic inverse degenerates to the uniform inverse.
_FLAT_SLOPE = 1e-18


@dataclass(frozen=True)
class WarmupSchedule:
    t_max: float = 1000.0
    alpha: float = 1.0
    tau: int = 1000
    mode: str = "low_noise"

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def for_run(cls, total_iterations: int, mode: str = "low_noise", alpha: float = 1.0,
                t_max: float = 1000.0) -> WarmupSchedule:
        """Default warmup length: 20% of the planned iterations."""
        return cls(t_max=t_max, alpha=alpha, tau=max(1, round(0.2 * total_iterations)), mode=mode)


def slope(schedule: WarmupSchedule, i: float) -> float:
    """Magnitude of the density tilt at iteration ``i``; zero once ``i >= tau``."""
    if schedule.mode == "uniform" or i >= schedule.tau:
        return 0.0
    i = max(i, 0)
    return schedule.alpha * 2.0 * (schedule.tau - i) / (schedule.tau * schedule.t_max**2)


def _low_pdf(x, t_max: float, k: float):
    x = np.asarray(x, dtype=np.float64)
    inside = (x >= 0) & (x <= t_max)
    return np.where(inside, -k * x + 0.5 * t_max * k + 1.0 / t_max, 0.0)


def _low_cdf(x, t_max: float, k: float):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, t_max)
    b = 0.5 * t_max * k + 1.0 / t_max
    return np.clip(-0.5 * k * x * x + b * x, 0.0, 1.0)


def _low_inverse(u, t_max: float, k: float):
    u = np.asarray(u, dtype=np.float64)
    if k < _FLAT_SLOPE:
        return u * t_max
    b = 0.5 * t_max * k + 1.0 / t_max
    disc = np.maximum(b * b - 2.0 * k * u, 0.0)
    # (b - sqrt(disc)) / k, rationalised so nothing cancels as k -> 0.
    return np.clip(2.0 * u / (b + np.sqrt(disc)), 0.0, t_max)


def pdf(schedule: WarmupSchedule, x, i: float):
    k = slope(schedule, i)
    t = schedule.t_max
    if schedule.mode == "high_noise":
        x = np.asarray(x, dtype=np.float64)
        return _low_pdf(t - x, t, k)
    return _low_pdf(x, t, k)


def cdf(schedule: WarmupSchedule, x, i: float):
    k = slope(schedule, i)
    t = schedule.t_max
    if schedule.mode == "high_noise":
        x = np.asarray(x, dtype=np.float64)
        out = 1.0 - _low_cdf(t - x, t, k)
        return np.where(x < 0, 0.0, out)
    return _low_cdf(x, t, k)


def inverse_cdf(schedule: WarmupSchedule, u, i: float):
    """Map uniforms ``u`` in [0, 1) to timesteps; vectorised."""
    k = slope(schedule, i)
    t = schedule.t_max
    if schedule.mode == "high_noise":
        return t - _low_inverse(1.0 - np.asarray(u, dtype=np.float64), t, k)
    return _low_inverse(u, t, k)


def sample(schedule: WarmupSchedule, rng: np.random.Generator, i: float, size=None):
    """Exact inverse-CDF draw(s) at iteration ``i``."""
    u = rng.random(size)
    x = inverse_cdf(schedule, u, i)
    return float(x) if size is None else x


def oracle_sample(schedule: WarmupSchedule, rng: np.random.Generator, i: float, size=None):
    """Rejection sampler under the flat envelope ``2 / T_max``.

    Independent of :func:`inverse_cdf`; used only to cross-check it.
    """
    n = 1 if size is None else int(np.prod(size))
    t = schedule.t_max
    out = np.empty(n)
    filled = 0
    while filled < n:
        want = max(2 * (n - filled), 16)
        x = rng.random(want) * t
        v = rng.random(want) * (2.0 / t)
        accepted = x[v < pdf(schedule, x, i)]
        take = min(accepted.size, n - filled)
        out[filled:filled + take] = accepted[:take]
        filled += take
    return float(out[0]) if size is None else out.reshape(size)


def acceptance_rate(schedule: WarmupSchedule, rng: np.random.Generator, i: float, trials: int) -> float:
    x = rng.random(trials) * schedule.t_max
    v = rng.random(trials) * (2.0 / schedule.t_max)
    return float(np.mean(v < pdf(schedule, x, i)))


def expected_timestep(schedule: WarmupSchedule, i: float) -> float:
    m = 0.5 * schedule.t_max - slope(schedule, i) * schedule.t_max**3 / 12.0
    return schedule.t_max - m if schedule.mode == "high_noise" else m


def ks_statistic(samples, reference_cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic against a callable CDF."""
    return float(stats.kstest(np.asarray(samples, dtype=np.float64), reference_cdf).statistic)
