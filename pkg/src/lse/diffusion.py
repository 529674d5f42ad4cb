"""Gaussian diffusion arithmetic: schedules, forward corruption, the
reverse ancestral step, step respacing, and the training loss.

This module knows nothing about neural networks or audio. All functions
take the state tensor as-is (numpy array or torch tensor); schedule
coefficients are Python floats, so the same code serves both. Timesteps
are 1-based: t ranges over [1, T], and index 0 of the coefficient arrays
holds the t=1 entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, InputError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule: beta, alpha = 1 - beta, and the running product
    alpha_bar. ``timestep_map`` is present on respaced schedules and maps
    the local step index k (1-based) to the original timestep."""

    beta: np.ndarray
    timestep_map: np.ndarray | None = None
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ConfigError("beta must be a non-empty 1-D array")
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ConfigError("all beta values must lie in (0, 1)")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "alpha", 1.0 - b)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - b))
        if self.timestep_map is not None:
            tm = np.asarray(self.timestep_map, dtype=np.int64)
            if tm.shape != b.shape:
                raise ConfigError("timestep_map length must match beta length")
            object.__setattr__(self, "timestep_map", tm)

    @property
    def n_steps(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.n_steps:
            raise DomainError(f"timestep {t} outside [1, {self.n_steps}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar(t) with the convention alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])

    def model_timestep(self, t: int) -> int:
        """The timestep to condition the denoiser on: the original-schedule
        step for respaced schedules, t itself otherwise."""
        self.check_t(t)
        if self.timestep_map is None:
            return int(t)
        return int(self.timestep_map[t - 1])


def make_schedule(kind: str = "linear", n_steps: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Build a schedule. Only ``linear`` (evenly spaced beta) is defined."""
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, n_steps))


def respace(schedule: DiffusionSchedule, n_keep: int) -> DiffusionSchedule:
    """Subsample to n_keep timesteps, uniformly spaced over [1, T] and
    always including T.

    The respaced beta at local step k is 1 - alpha_bar(tau_k)/alpha_bar(tau_{k-1}),
    so the respaced schedule's alpha_bar matches the original exactly at
    the kept steps. Respacing a respaced schedule is rejected.
    """
    if schedule.timestep_map is not None:
        raise ConfigError("schedule is already respaced")
    T = schedule.n_steps
    if not 1 <= n_keep <= T:
        raise DomainError(f"n_keep {n_keep} outside [1, {T}]")
    if n_keep == 1:
        taus = np.array([T], dtype=np.int64)
    else:
        # integer floor of linspace(1, T, n_keep); spacing >= 1 keeps it strict
        taus = 1 + (np.arange(n_keep, dtype=np.int64) * (T - 1)) // (n_keep - 1)
    betas = np.empty(n_keep)
    prev_bar = 1.0
    for k, tau in enumerate(taus):
        bar = schedule.alpha_bar_at(int(tau))
        betas[k] = 1.0 - bar / prev_bar
        prev_bar = bar
    return DiffusionSchedule(betas, timestep_map=taus)


# ---------------------------------------------------------------------------
# forward / reverse


def _check_state(z, name: str):
    if hasattr(z, "numel"):
        if z.numel() == 0:
            raise InputError(f"{name} is empty")
        finite = bool(z.isfinite().all())
    else:
        z = np.asarray(z)
        if z.size == 0:
            raise InputError(f"{name} is empty")
        finite = bool(np.all(np.isfinite(z)))
    if not finite:
        raise InputError(f"{name} contains non-finite values")
    return z


def forward_sample(z0, t: int, eps, schedule: DiffusionSchedule):
    """q(z_t | z_0): sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    z0 = _check_state(z0, "z0")
    eps = _check_state(eps, "eps")
    if tuple(z0.shape) != tuple(eps.shape):
        raise InputError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    bar = schedule.alpha_bar_at(schedule.check_t(t))
    return math.sqrt(bar) * z0 + math.sqrt(1.0 - bar) * eps


def posterior_params(z_t, eps_hat, t: int, schedule: DiffusionSchedule):
    """Mean and variance of the reverse step at t given predicted noise.

    mu = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
    var = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t , zero at t=1.
    """
    z_t = _check_state(z_t, "z_t")
    eps_hat = _check_state(eps_hat, "eps_hat")
    if tuple(z_t.shape) != tuple(eps_hat.shape):
        raise InputError("z_t and eps_hat shapes differ")
    t = schedule.check_t(t)
    beta_t = float(schedule.beta[t - 1])
    alpha_t = float(schedule.alpha[t - 1])
    bar_t = schedule.alpha_bar_at(t)
    bar_prev = schedule.alpha_bar_at(t - 1)
    mean = (z_t - (beta_t / math.sqrt(1.0 - bar_t)) * eps_hat) / math.sqrt(alpha_t)
    var = 0.0 if t == 1 else (1.0 - bar_prev) / (1.0 - bar_t) * beta_t
    return mean, var


def _noise_like(z, rng):
    """Standard normal noise shaped like z, from a numpy Generator or a
    torch Generator (dispatch on the state's type)."""
    if hasattr(z, "numel"):  # torch tensor
        import torch

        return torch.randn(z.shape, generator=rng, dtype=z.dtype, device=z.device)
    if not isinstance(rng, np.random.Generator):
        raise InputError("numpy state requires a numpy Generator rng")
    return rng.standard_normal(size=z.shape).astype(np.asarray(z).dtype, copy=False)


def reverse_step(z_t, eps_hat, t: int, schedule: DiffusionSchedule, rng):
    """One ancestral sampling step: z_{t-1} = mu + sqrt(var) * noise.

    At t=1 the step is deterministic (no noise is drawn, so the rng
    stream is untouched).
    """
    mean, var = posterior_params(z_t, eps_hat, t, schedule)
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * _noise_like(mean, rng)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    """Per-timestep loss weights gamma_t (1-based like everything else).
    Default is uniform weighting."""

    gamma: np.ndarray | None = None

    def at(self, t: int) -> float:
        if self.gamma is None:
            return 1.0
        g = np.asarray(self.gamma, dtype=np.float64)
        if not 1 <= t <= g.size:
            raise DomainError(f"timestep {t} outside weight table [1, {g.size}]")
        return float(g[t - 1])


def diffusion_loss(eps, eps_hat, t: int, weights: LossWeights = LossWeights(),
                   squared: bool = True):
    """Noise prediction objective for one item.

    Default: gamma_t * mean((eps - eps_hat)^2). With squared=False the
    per-element root is taken instead (gamma_t * sqrt(mean(...))), the
    literal distance objective kept as an ablation.
    """
    if tuple(eps.shape) != tuple(eps_hat.shape):
        raise InputError("eps and eps_hat shapes differ")
    diff = eps - eps_hat
    if hasattr(diff, "numel"):
        mse = (diff * diff).mean()
        loss = mse if squared else mse.sqrt()
    else:
        mse = float(np.mean(np.square(diff)))
        loss = mse if squared else math.sqrt(mse)
    return weights.at(t) * loss


def serialize_schedule(schedule: DiffusionSchedule) -> dict:
    d = {"beta": [float(b) for b in schedule.beta]}
    if schedule.timestep_map is not None:
        d["timestep_map"] = [int(t) for t in schedule.timestep_map]
    return d


def schedule_from_dict(d: dict) -> DiffusionSchedule:
    tm = d.get("timestep_map")
    return DiffusionSchedule(np.asarray(d["beta"], dtype=np.float64),
                             timestep_map=None if tm is None else np.asarray(tm))
