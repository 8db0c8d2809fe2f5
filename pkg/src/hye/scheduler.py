"""Diffusion noise schedules, forward corruption, offset noise and Min-SNR weights.

The forward process corrupts x0 with the closed form
``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` where ``abar`` is the
cumulative product of per-step retention factors. SNR and the Min-SNR
clamp are defined on the cumulative ``abar_t`` (the per-step reading would
make the clamp a no-op). Offset noise adds a spatially constant Gaussian
component per (sample, channel), scaled by ``gamma``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

TERMINAL_ALPHA_BAR = 0.01  # above this, x_T is visibly far from pure noise


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products; immutable, shareable."""

    kind: str
    beta: np.ndarray          # (T,) per-step variance, in (0, 1)
    beta_min: float = 0.0
    beta_max: float = 0.0
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConfigurationError("schedule needs at least 2 steps")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigurationError("beta values must lie strictly in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if alpha_bar[-1] >= TERMINAL_ALPHA_BAR:
            warnings.warn(
                f"terminal alpha_bar {alpha_bar[-1]:.4g} >= {TERMINAL_ALPHA_BAR}; "
                "x_T will not be close to pure noise",
                stacklevel=3,
            )

    @property
    def T(self) -> int:
        return int(self.beta.size)


@dataclass(frozen=True)
class OffsetNoiseConfig:
    """Sample-wise constant noise component of strength gamma."""

    gamma: float = 0.2
    enabled: bool = True
    per_channel: bool = True  # one offset per (sample, channel); else per sample

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigurationError("offset-noise gamma must be >= 0")


def build_schedule(kind: str, T: int, beta_min: float = 1e-4,
                   beta_max: float = 0.02) -> NoiseSchedule:
    """Linear or cosine variance schedule over T steps."""
    if T < 2:
        raise ConfigurationError("schedule needs T >= 2")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError("need 0 < beta_min <= beta_max < 1")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        # squared-cosine alpha_bar with the usual small-offset stabilizer
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, beta=beta, beta_min=float(beta_min),
                         beta_max=float(beta_max))


def _gather(arr: np.ndarray, t: Union[int, np.ndarray], T: int) -> np.ndarray:
    t_idx = np.asarray(t)
    if np.any(t_idx < 0) or np.any(t_idx >= T):
        raise IndexError(f"timestep {t} outside [0, {T})")
    return arr[t_idx]


def _per_sample(vals: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape per-sample scalars for broadcasting over (N, C, H, W)."""
    if vals.ndim == 0:
        return vals
    return vals.reshape((-1,) + (1,) * (ndim - 1))


def forward_diffuse(x0: Tensor, t: Union[int, np.ndarray], noise: Tensor,
                    schedule: NoiseSchedule) -> Tensor:
    """Closed-form corruption to step t; t may be scalar or per-sample."""
    if noise.shape != x0.shape:
        raise DimensionError("noise must have the shape of x0")
    abar = _gather(schedule.alpha_bar, t, schedule.T)
    a = _per_sample(np.sqrt(abar), x0.ndim).astype(x0.dtype)
    b = _per_sample(np.sqrt(1.0 - abar), x0.ndim).astype(x0.dtype)
    return x0 * Tensor(a) + noise * Tensor(b)


def sample_offset_noise(shape, config: OffsetNoiseConfig,
                        rng: np.random.Generator) -> Tensor:
    """i.i.d. Gaussian noise plus a spatially constant per-(sample, channel) offset."""
    if len(shape) < 3:
        raise DimensionError("offset noise expects (batch, channel, spatial...) shape")
    eps = rng.standard_normal(shape).astype(np.float32)
    if not config.enabled or config.gamma == 0.0:
        return Tensor(eps)
    if config.per_channel:
        nu_shape = shape[:2] + (1,) * (len(shape) - 2)
    else:
        nu_shape = (shape[0],) + (1,) * (len(shape) - 1)
    nu = rng.standard_normal(nu_shape).astype(np.float32)
    return Tensor(eps + config.gamma * nu)


def snr(t: Union[int, np.ndarray], schedule: NoiseSchedule):
    """Signal-to-noise ratio abar_t / (1 - abar_t); saturates to inf, never NaN."""
    abar = _gather(schedule.alpha_bar, t, schedule.T)
    denom = 1.0 - abar
    with np.errstate(divide="ignore"):
        out = np.where(denom > 0.0, abar / np.maximum(denom, 1e-300), np.inf)
    return float(out) if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def min_snr_weight(t: Union[int, np.ndarray], gamma_snr: float,
                   schedule: NoiseSchedule):
    """min(SNR(t), gamma_snr) / SNR(t): clamps easy high-SNR steps to weight <= 1."""
    if gamma_snr <= 0:
        raise ConfigurationError("gamma_snr must be > 0")
    s = np.asarray(snr(t, schedule), dtype=np.float64)
    out = np.where(s <= gamma_snr, 1.0, gamma_snr / s)
    return float(out) if out.ndim == 0 else out


def reverse_step(x_t: Tensor, eps_pred: Tensor, t: int, schedule: NoiseSchedule,
                 sampler: str = "ddpm", eta: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """One reverse transition x_t -> x_{t-1} under the eps-parameterization.

    ddpm: posterior mean plus sigma_t * z with the small-variance choice
    sigma_t^2 = beta_tilde_t; no noise is added at t == 0.
    ddim: deterministic at eta = 0; eta in (0, 1] interpolates toward the
    ddpm variance.
    """
    if not (0 <= t < schedule.T):
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    if not (0.0 <= eta <= 1.0):
        raise ConfigurationError("eta must lie in [0, 1]")
    if sampler not in ("ddpm", "ddim"):
        raise ConfigurationError(f"unknown sampler {sampler!r}")
    if eps_pred.shape != x_t.shape:
        raise DimensionError("eps_pred must have the shape of x_t")

    x = x_t.data
    eps = eps_pred.data
    abar_t = schedule.alpha_bar[t]
    abar_prev = schedule.alpha_bar[t - 1] if t > 0 else 1.0

    if sampler == "ddpm":
        alpha_t = schedule.alpha[t]
        beta_t = schedule.beta[t]
        mean = (x - beta_t / math.sqrt(1.0 - abar_t) * eps) / math.sqrt(alpha_t)
        if t == 0:
            return Tensor(mean.astype(x.dtype))
        var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t
        z = rng.standard_normal(x.shape)
        return Tensor((mean + math.sqrt(var) * z).astype(x.dtype))

    # ddim
    x0_hat = (x - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
    sigma = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) \
        * math.sqrt(max(1.0 - abar_t / abar_prev, 0.0))
    dir_coef = math.sqrt(max(1.0 - abar_prev - sigma * sigma, 0.0))
    out = math.sqrt(abar_prev) * x0_hat + dir_coef * eps
    if sigma > 0.0:
        out = out + sigma * rng.standard_normal(x.shape)
    return Tensor(out.astype(x.dtype))
