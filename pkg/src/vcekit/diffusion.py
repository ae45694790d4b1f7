"""Denoising diffusion: noise schedule, forward process, reverse steps.

Indexing convention: schedule arrays are 0-based with ``t`` in ``[0, T)``;
``q_sample(x0, t)`` produces the marginal with ``alpha_bar[t]``, and the
reverse chain runs ``t = T-1, ..., 0`` with no noise injected at ``t = 0``.

Per-sample RNG streams are derived with :func:`derive_seed`, and both the
unconditional sampler and guided generation draw noise in the same order
(one initial draw, then one per step), so matched seeds give matched bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, scalar_mul, sub, clamp_unit

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 3.5e-2


class ScheduleError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule and derived coefficient arrays (float64)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        t = self.beta.shape[0]
        if any(getattr(self, n).shape != (t,) for n in ("alpha", "alpha_bar", "posterior_var")):
            raise ScheduleError("schedule arrays must share one length")
        if not (self.beta > 0).all() or not (self.beta < 1).all():
            raise ScheduleError("beta must lie in (0, 1)")
        if (np.diff(self.beta) < 0).any():
            raise ScheduleError("beta must be non-decreasing")
        if (np.diff(self.alpha_bar) >= 0).any():
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if (self.posterior_var > self.beta + 1e-15).any():
            raise ScheduleError("posterior variance exceeds beta")

    @property
    def t_steps(self) -> int:
        return int(self.beta.shape[0])


def make_schedule(t_steps: int = DEFAULT_T,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta schedule with the standard posterior variance.

    ``posterior_var[t] = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)``
    with the ``t = 0`` entry set to ``beta_0`` by convention.
    """
    if t_steps < 1:
        raise ScheduleError(f"need at least one step, got {t_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    posterior_var[0] = beta[0]
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def _check_t(sched: NoiseSchedule, t: int) -> int:
    t = int(t)
    if not 0 <= t < sched.t_steps:
        raise ScheduleError(f"t={t} outside [0, {sched.t_steps})")
    return t


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------


def q_sample(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward marginal: sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps."""
    t = _check_t(sched, t)
    if x0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch x0 {x0.shape} vs eps {eps.shape}")
    ab = float(sched.alpha_bar[t])
    return add(scalar_mul(x0, np.sqrt(ab)), scalar_mul(eps, np.sqrt(1.0 - ab)))


def q_sample_batched(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                     sched: NoiseSchedule) -> np.ndarray:
    """Array-level q_sample with a per-sample ``t`` vector (training path)."""
    t = np.asarray(t)
    ab = sched.alpha_bar[t].reshape(-1, 1, 1, 1)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype)


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: int, sched: NoiseSchedule,
               clamp: bool = True) -> Tensor:
    """Invert the forward marginal around a noise estimate.

    Differentiable; with ``clamp`` the output is clipped to [-1, 1] and the
    gradient passes through inside the interval and is zero outside.
    """
    t = _check_t(sched, t)
    ab = float(sched.alpha_bar[t])
    if ab < 1e-8:
        raise ScheduleError(f"alpha_bar[{t}]={ab:.3e} too small to invert")
    x0 = scalar_mul(sub(x_t, scalar_mul(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
    return clamp_unit(x0) if clamp else x0


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------


def posterior_mean(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                   sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean (1/sqrt(a_t)) (x_t - beta_t/sqrt(1-a_bar_t) eps_hat)."""
    t = _check_t(sched, t)
    coef = float(sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]))
    scale = float(1.0 / np.sqrt(sched.alpha[t]))
    return (x_t - coef * eps_hat) * scale


def derive_seed(base_seed: int, index: int) -> int:
    """Stable per-record seed: low 63 bits of sha256(base_seed, index)."""
    digest = hashlib.sha256(f"{int(base_seed)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def record_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def per_sample_rngs(base_seed: int, n: int) -> list:
    return [record_rng(derive_seed(base_seed, i)) for i in range(n)]


def draw_noise(rngs, shape_per_sample, dtype=np.float32) -> np.ndarray:
    """One normal draw per stream, stacked along the batch axis."""
    return np.stack([r.standard_normal(size=shape_per_sample, dtype=dtype) for r in rngs])


def ddpm_step(model, x_t: np.ndarray, t: int, sched: NoiseSchedule, rngs) -> np.ndarray:
    """One unguided reverse step; no noise is added at ``t = 0``."""
    t = _check_t(sched, t)
    eps_hat = model.forward(Tensor(x_t), np.full(x_t.shape[0], t, dtype=np.int64)).data
    return finish_step(x_t, eps_hat, t, sched, rngs)


def finish_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                rngs, mean_shift: np.ndarray | None = None) -> np.ndarray:
    """Shared tail of guided and unguided steps: mean, optional shift, noise."""
    if not np.isfinite(eps_hat).all():
        raise SamplingError(f"non-finite noise estimate at t={t}")
    mu = posterior_mean(x_t, eps_hat, t, sched)
    if mean_shift is not None:
        mu = mu + mean_shift
    if t == 0:
        return mu
    if len(rngs) != x_t.shape[0]:
        raise SamplingError(f"need {x_t.shape[0]} rng streams, got {len(rngs)}")
    z = draw_noise(rngs, x_t.shape[1:], dtype=x_t.dtype)
    return mu + float(np.sqrt(sched.posterior_var[t])) * z


def sample_unconditional(model, sched: NoiseSchedule, n: int, seed: int,
                         resolution: int = 16) -> np.ndarray:
    """Run the full reverse chain from pure noise, deterministic given seed."""
    if n < 1:
        raise SamplingError("need at least one sample")
    rngs = per_sample_rngs(seed, n)
    shape = (1, resolution, resolution)
    x = draw_noise(rngs, shape, dtype=np.float32)
    for t in range(sched.t_steps - 1, -1, -1):
        x = ddpm_step(model, x, t, sched, rngs)
    return x
