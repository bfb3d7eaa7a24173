"""Gaussian diffusion numerics for the target-item representation.

Every function here is pure: state lives in the :class:`NoiseSchedule` and in
the random generator handed in by the caller.  Latent vectors may be numpy
arrays or torch tensors; the leading dimensions are treated as a batch and the
step index may be a scalar or one index per batch row.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

BETA_CAP = 0.999

POSTERIOR_VARIANTS = ("standard", "sqrt_abar")
NOISE_SCALE_VARIANTS = ("std", "variance")


class ConfigError(ValueError):
    """Raised for invalid hyperparameter combinations."""


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 32
    schedule_kind: str = "truncated-linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    offset_scale: float = 0.1
    delta_c: float = 1.0
    use_offset_noise: bool = False
    posterior_variant: str = "standard"
    noise_scale_variant: str = "std"

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.schedule_kind != "truncated-linear":
            raise ConfigError(f"unknown schedule_kind {self.schedule_kind!r}")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise ConfigError(
                f"need 0 < beta_min <= beta_max < 1, got {self.beta_min}, {self.beta_max}"
            )
        if self.offset_scale < 0:
            raise ConfigError("offset_scale must be nonnegative")
        if self.posterior_variant not in POSTERIOR_VARIANTS:
            raise ConfigError(f"posterior_variant must be one of {POSTERIOR_VARIANTS}")
        if self.noise_scale_variant not in NOISE_SCALE_VARIANTS:
            raise ConfigError(f"noise_scale_variant must be one of {NOISE_SCALE_VARIANTS}")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step schedule arrays for steps 1..T.

    The arrays are 0-based: ``betas[t - 1]`` is beta_t.
    ``alpha_bar_prev[t - 1]`` is alpha_bar_{t-1}, with alpha_bar_0 = 1.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    config: DiffusionConfig | None = None
    alpha_bar_prev: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha_bar_prev", np.concatenate([[1.0], self.alpha_bars[:-1]]))

    @classmethod
    def from_betas(cls, betas, config: DiffusionConfig | None = None) -> "NoiseSchedule":
        """Build a schedule from raw betas without clamping (used for tests and dumps)."""
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a nonempty 1-D array")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), config=config)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "betas": self.betas.tolist(),
            "alphas": self.alphas.tolist(),
            "alpha_bars": self.alpha_bars.tolist(),
            "config": asdict(self.config) if self.config is not None else None,
        }

    def digest(self) -> str:
        """Content hash of the schedule arrays (hex sha256)."""
        h = hashlib.sha256()
        for arr in (self.betas, self.alphas, self.alpha_bars):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def build_schedule(config: DiffusionConfig) -> NoiseSchedule:
    """Linear beta interpolation between the endpoints, clamped to [beta_min, BETA_CAP]."""
    config.validate()
    T = config.T
    if T == 1:
        betas = np.array([config.beta_min], dtype=np.float64)
    else:
        frac = np.arange(T, dtype=np.float64) / (T - 1)
        betas = config.beta_min + frac * (config.beta_max - config.beta_min)
    betas = np.clip(betas, config.beta_min, BETA_CAP)
    return NoiseSchedule.from_betas(betas, config=config)


# -- helpers -----------------------------------------------------------------


def _check_step(step, T: int) -> None:
    lo = int(step.min()) if hasattr(step, "min") else int(step)
    hi = int(step.max()) if hasattr(step, "max") else int(step)
    if lo < 1 or hi > T:
        raise IndexError(f"diffusion step out of range 1..{T}: got {lo}..{hi}")


def _coef(values: np.ndarray, step, like):
    """Gather ``values[step - 1]`` and shape it to broadcast against ``like``."""
    if isinstance(step, torch.Tensor):
        idx = step.to(torch.long) - 1
        out = torch.as_tensor(values, dtype=like.dtype, device=like.device)[idx]
    elif isinstance(step, np.ndarray):
        out = values[step.astype(np.int64) - 1]
    else:
        c = float(values[int(step) - 1])
        return c
    if isinstance(like, torch.Tensor) and not isinstance(out, torch.Tensor):
        out = torch.as_tensor(out, dtype=like.dtype, device=like.device)
    extra = like.ndim - out.ndim
    return out.reshape(out.shape + (1,) * extra)


def _sqrt(v):
    if isinstance(v, torch.Tensor):
        return torch.sqrt(v)
    if isinstance(v, float):
        return math.sqrt(v)
    return np.sqrt(v)


def _standard_normal(shape, rng, dtype=None):
    if isinstance(rng, torch.Generator):
        return torch.randn(shape, generator=rng, dtype=dtype or torch.float64)
    return rng.standard_normal(shape)


# -- sampling ----------------------------------------------------------------


def noise_mean(config: DiffusionConfig) -> float:
    return config.offset_scale * config.delta_c if config.use_offset_noise else 0.0


def sample_offset_noise(shape, config: DiffusionConfig, rng, dtype=None):
    """Gaussian noise with unit variance and mean ``offset_scale * delta_c``.

    The mean is zero when ``config.use_offset_noise`` is off.  ``shape`` may be
    an int (one latent of that width) or a tuple.  ``rng`` is either a numpy
    ``Generator`` (numpy output) or a ``torch.Generator`` (tensor output).
    """
    if isinstance(shape, int):
        if shape < 1:
            raise ValueError("latent width must be >= 1")
        shape = (shape,)
    eps = _standard_normal(tuple(shape), rng, dtype)
    mean = noise_mean(config)
    return eps + mean if mean else eps


def sample_step_index(T: int, rng, size=None):
    """Uniform draw from {1, ..., T}."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(rng, torch.Generator):
        shape = () if size is None else ((size,) if isinstance(size, int) else tuple(size))
        return torch.randint(1, T + 1, shape, generator=rng)
    out = rng.integers(1, T + 1, size=size)
    return int(out) if size is None else out


# -- forward process ---------------------------------------------------------


def embed_to_x0(e_target, schedule: NoiseSchedule, rng, noise=None):
    """One-step corruption of the target embedding using beta_1 of the schedule.

    x_0 = sqrt(alpha_1) * e + sqrt(beta_1) * eps with standard normal eps.
    """
    if noise is None:
        dtype = e_target.dtype if isinstance(e_target, torch.Tensor) else None
        noise = _standard_normal(tuple(e_target.shape), rng, dtype)
        if isinstance(e_target, torch.Tensor):
            noise = noise.to(e_target.device)
    a1 = float(schedule.alphas[0])
    b1 = float(schedule.betas[0])
    return math.sqrt(a1) * e_target + math.sqrt(b1) * noise


def forward_diffuse(x0, s, schedule: NoiseSchedule, noise):
    """Closed-form sample of x_s: sqrt(abar_s) x_0 + sqrt(1 - abar_s) noise."""
    _check_step(s, schedule.T)
    abar = _coef(schedule.alpha_bars, s, x0)
    return _sqrt(abar) * x0 + _sqrt(1.0 - abar) * noise


# -- reverse process ---------------------------------------------------------


@dataclass
class PosteriorParams:
    mean: object
    variance: object


def _posterior_tables(schedule: NoiseSchedule, variant: str):
    """Per-step posterior coefficients; step 1 is pinned to (1, 0, 0) exactly."""
    abar, abar_prev, beta = schedule.alpha_bars, schedule.alpha_bar_prev, schedule.betas
    if variant == "standard":
        xt_scale = np.sqrt(schedule.alphas)
    elif variant == "sqrt_abar":
        xt_scale = np.sqrt(abar)
    else:
        raise ConfigError(f"unknown posterior variant {variant!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        c_x0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
        c_xt = xt_scale * (1.0 - abar_prev) / (1.0 - abar)
        var = (1.0 - abar_prev) / (1.0 - abar) * beta
    c_x0[0], c_xt[0], var[0] = 1.0, 0.0, 0.0
    return c_x0, c_xt, var


def posterior_params(x_t, x0_hat, t, schedule: NoiseSchedule, variant: str | None = None):
    """Mean and variance of q(x_{t-1} | x_t, x_0 = x0_hat)."""
    _check_step(t, schedule.T)
    if variant is None:
        variant = schedule.config.posterior_variant if schedule.config else "standard"
    c_x0, c_xt, var = _posterior_tables(schedule, variant)
    mean = _coef(c_x0, t, x_t) * x0_hat + _coef(c_xt, t, x_t) * x_t
    variance = _coef(var, t, x_t)
    return PosteriorParams(mean=mean, variance=variance)


def reverse_step(x_t, x0_hat, t, schedule: NoiseSchedule, rng, noise=None, noise_scale_variant=None):
    """Draw x_{t-1} from the posterior; deterministic at t = 1."""
    post = posterior_params(x_t, x0_hat, t, schedule)
    if noise_scale_variant is None:
        cfg = schedule.config
        noise_scale_variant = cfg.noise_scale_variant if cfg else "std"
    if noise is None:
        dtype = x_t.dtype if isinstance(x_t, torch.Tensor) else None
        noise = _standard_normal(tuple(x_t.shape), rng, dtype)
    if noise_scale_variant == "std":
        scale = _sqrt(post.variance)
    elif noise_scale_variant == "variance":
        scale = post.variance
    else:
        raise ConfigError(f"unknown noise scale variant {noise_scale_variant!r}")
    return post.mean + scale * noise
