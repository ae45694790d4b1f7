"""Classifier-guided counterfactual generation on the reverse diffusion chain.

The reverse-step mean is shifted by ``s * var_t * g`` where ``g`` is the
gradient of the subject classifier's target log-probability with respect to
the current state.  Three design choices from the sampling recipe live here:
evaluating the classifier on the one-shot clean estimate ``x0_hat`` instead
of the noisy state (with gradients flowing back through the denoiser), the
projection of a robust classifier's gradient onto a cone around the subject
gradient, and starting the chain from a partially-noised original so coarse
structure survives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tg
from .diffusion import (
    SamplingError,
    NoiseSchedule,
    ddpm_step,
    draw_noise,
    finish_step,
    predict_x0,
    q_sample_batched,
    record_rng,
)
from .tensor import Tensor


class GuidanceError(RuntimeError):
    """Raised when a guidance gradient cannot be used (non-finite, bad axis)."""

    def __init__(self, message: str, t: int | None = None, grad_norm: float | None = None):
        self.t = t
        self.grad_norm = grad_norm
        if t is not None:
            message = f"{message} (t={t}, |g|={grad_norm})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConeConfig:
    robust_model: object
    half_angle_deg: float = 30.0

    def __post_init__(self):
        if not 0.0 < float(self.half_angle_deg) < 90.0:
            raise ValueError(f"cone half-angle must lie in (0, 90) deg, got {self.half_angle_deg}")


@dataclass(frozen=True)
class GuidanceConfig:
    scale_s: float = 6.0
    use_x0_prediction: bool = True
    cone: ConeConfig | None = None
    start_fraction: float = 0.5
    seed: int = 0
    reject_invalid: bool = False
    clamp_x0: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.scale_s) and self.scale_s >= 0):
            raise ValueError(f"scale_s must be finite and >= 0, got {self.scale_s}")
        if not 0.0 < self.start_fraction <= 1.0:
            raise ValueError(f"start_fraction must lie in (0, 1], got {self.start_fraction}")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")

    def start_step(self, t_steps: int) -> int:
        tau = int(round(self.start_fraction * t_steps))
        if tau < 1:
            raise ValueError(f"start_fraction {self.start_fraction} gives start step {tau} < 1")
        return tau

    def snapshot(self) -> dict:
        cone = None
        if self.cone is not None:
            model = self.cone.robust_model
            cone = {"half_angle_deg": float(self.cone.half_angle_deg),
                    "robust_model": getattr(model, "variant", type(model).__name__)}
        return {
            "scale_s": float(self.scale_s),
            "use_x0_prediction": bool(self.use_x0_prediction),
            "cone": cone,
            "start_fraction": float(self.start_fraction),
            "seed": int(self.seed),
            "reject_invalid": bool(self.reject_invalid),
            "clamp_x0": bool(self.clamp_x0),
        }


@dataclass(frozen=True)
class CounterfactualRecord:
    """Write-once result of one counterfactual generation."""

    original: np.ndarray
    source_label: int
    target_label: int
    generated: np.ndarray
    predicted_label: int
    subject_log_probs: np.ndarray
    config: dict
    seed: int
    wall_time: float
    failed: bool = False
    rejected: bool = False


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _target_logprob_root(model, feed: Tensor, y_t: np.ndarray) -> Tensor:
    """Scalar sum over the batch of log p(y_t_i | feed_i)."""
    logp = tg.log_softmax(model.forward(feed))
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    onehot[np.arange(y_t.shape[0]), y_t] = 1.0
    return tg.tsum(tg.mul(logp, Tensor(onehot, dtype=logp.dtype)))


def _taped_gradients(x_t: np.ndarray, t: int, y_t: np.ndarray, models, denoiser,
                     sched: NoiseSchedule, cfg: GuidanceConfig):
    """Per-model input gradients over one shared forward graph.

    With x0-prediction the denoiser runs once on tape and every classifier
    reads the same clean estimate; each model gets its own backward pass.
    Returns (gradients list, detached noise estimate or None).
    """
    x = Tensor(np.ascontiguousarray(x_t), requires_grad=True)
    try:
        if cfg.use_x0_prediction:
            t_vec = np.full(x_t.shape[0], t, dtype=np.int64)
            eps_hat = denoiser.forward(x, t_vec)
            feed = predict_x0(x, eps_hat, t, sched, clamp=cfg.clamp_x0)
        else:
            eps_hat = None
            feed = x
        roots = [_target_logprob_root(m, feed, y_t) for m in models]
        grads = []
        for root in roots:
            tg.backward(root)
            g = x.grad
            x.grad = None
            if g is None or not np.isfinite(g).all():
                norm = float("nan") if g is None else float(np.linalg.norm(g))
                raise GuidanceError("non-finite guidance gradient", t=t, grad_norm=norm)
            grads.append(g)
    except tg.NonFiniteError as e:
        raise GuidanceError(f"non-finite forward value: {e}", t=t, grad_norm=float("nan")) from e
    return grads, (None if eps_hat is None else eps_hat.data)


def guidance_gradient(x_t: np.ndarray, t: int, y_t, subject, denoiser,
                      sched: NoiseSchedule, cfg: GuidanceConfig) -> np.ndarray:
    """Gradient of the subject's target log-probability w.r.t. ``x_t``.

    With ``use_x0_prediction`` the classifier sees the clean estimate and the
    gradient flows back through the denoiser; otherwise the classifier is
    differentiated directly on the noisy state and the denoiser is untouched.
    """
    y_vec = _as_label_vector(y_t, x_t.shape[0])
    grads, _ = _taped_gradients(x_t, t, y_vec, [subject], denoiser, sched, cfg)
    return grads[0]


def _as_label_vector(y, batch: int) -> np.ndarray:
    y_vec = np.asarray(y, dtype=np.int64)
    if y_vec.ndim == 0:
        y_vec = np.full(batch, int(y_vec), dtype=np.int64)
    if y_vec.shape != (batch,):
        raise ValueError(f"labels shape {y_vec.shape} does not match batch {batch}")
    return y_vec


def cone_project(g_robust: np.ndarray, g_subject: np.ndarray,
                 half_angle_deg: float = 30.0) -> np.ndarray:
    """Euclidean projection of one vector onto the cone around another.

    Let theta be the angle between the flattened vectors and ``a`` the
    half-angle.  Inside the cone (theta <= a) the input is returned
    unchanged; beyond a + 90 deg the nearest cone point is the apex (zero);
    between the two, the projection lands on the cone boundary at angle
    ``a`` from the axis with norm ``|g_robust| * cos(theta - a)``.
    """
    gr = np.asarray(g_robust)
    gs = np.asarray(g_subject)
    if gr.shape != gs.shape:
        raise ValueError(f"gradient shapes differ: {gr.shape} vs {gs.shape}")
    if not 0.0 < float(half_angle_deg) < 90.0:
        raise ValueError(f"cone half-angle must lie in (0, 90) deg, got {half_angle_deg}")
    r = gr.reshape(-1).astype(np.float64)
    s = gs.reshape(-1).astype(np.float64)
    norm_s = float(np.linalg.norm(s))
    if norm_s == 0.0:
        raise GuidanceError("undefined cone axis")
    norm_r = float(np.linalg.norm(r))
    if norm_r == 0.0:
        return np.zeros_like(gr)
    a = np.deg2rad(float(half_angle_deg))
    cos_theta = float(np.clip(np.dot(r, s) / (norm_r * norm_s), -1.0, 1.0))
    theta = float(np.arccos(cos_theta))
    if theta <= a:
        return gr.copy()
    if theta >= a + np.pi / 2:
        return np.zeros_like(gr)
    axis = s / norm_s
    tangential = r - float(np.dot(r, axis)) * axis
    tangential /= np.linalg.norm(tangential)
    p = norm_r * np.cos(theta - a) * (np.cos(a) * axis + np.sin(a) * tangential)
    return p.reshape(gr.shape).astype(gr.dtype)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def guided_step(x_t: np.ndarray, t: int, y_t, subject, denoiser,
                sched: NoiseSchedule, cfg: GuidanceConfig, rngs) -> np.ndarray:
    """One reverse step with the mean shifted by ``s * var_t * g``.

    ``s = 0`` delegates to the unguided step outright, so the degenerate
    case is bytewise the unconditional chain rather than merely close to it.
    """
    if cfg.scale_s == 0.0:
        return ddpm_step(denoiser, x_t, t, sched, rngs)
    y_vec = _as_label_vector(y_t, x_t.shape[0])
    models = [subject] if cfg.cone is None else [subject, cfg.cone.robust_model]
    grads, eps_hat = _taped_gradients(x_t, t, y_vec, models, denoiser, sched, cfg)
    if cfg.cone is None:
        g = grads[0]
    else:
        g_subject, g_robust = grads
        g = np.stack([cone_project(g_robust[i], g_subject[i], cfg.cone.half_angle_deg)
                      for i in range(x_t.shape[0])])
    if eps_hat is None:
        t_vec = np.full(x_t.shape[0], t, dtype=np.int64)
        eps_hat = denoiser.forward(Tensor(x_t), t_vec).data
    shift = (cfg.scale_s * float(sched.posterior_var[t])) * g
    return finish_step(x_t, eps_hat, t, sched, rngs, mean_shift=shift)


def _run_chain(originals: np.ndarray, y_ts: np.ndarray, subject, denoiser,
               sched: NoiseSchedule, cfg: GuidanceConfig, seeds) -> np.ndarray:
    """Partial-noising entry point: noise the originals to the start step,
    then run guided steps down to zero."""
    t_steps = sched.t_steps
    tau = cfg.start_step(t_steps)
    rngs = [record_rng(s) for s in seeds]
    eps = draw_noise(rngs, originals.shape[1:], dtype=originals.dtype)
    if tau >= t_steps:
        x = eps
        t_start = t_steps - 1
    else:
        x = q_sample_batched(originals, np.full(originals.shape[0], tau), eps, sched)
        t_start = tau
    for t in range(t_start, -1, -1):
        x = guided_step(x, t, y_ts, subject, denoiser, sched, cfg, rngs)
    return x


def generate_vce_batch(originals: np.ndarray, ys, y_ts, subject, denoiser,
                       sched: NoiseSchedule, cfg: GuidanceConfig, seeds) -> list:
    """Generate one counterfactual per row; failures become flagged records.

    Each record draws from its own seeded stream, so any contiguous batching
    of the same (record, seed) list consumes identical noise.  A non-finite
    blow-up in a multi-record batch triggers a per-record rerun so one bad
    chain cannot poison its batchmates.
    """
    originals = np.asarray(originals, dtype=np.float32)
    if originals.ndim != 4:
        raise ValueError(f"expected (batch, 1, H, W) originals, got {originals.shape}")
    n = originals.shape[0]
    ys = _as_label_vector(ys, n)
    y_ts = _as_label_vector(y_ts, n)
    seeds = [int(s) for s in seeds]
    if len(seeds) != n:
        raise ValueError(f"need {n} seeds, got {len(seeds)}")
    if np.any(ys == y_ts):
        raise ValueError("target label equals source label for some record")
    if np.abs(originals).max() > 1.0 + 1e-6:
        raise ValueError("originals must lie in [-1, 1]")
    started = time.perf_counter()
    failed = np.zeros(n, dtype=bool)
    try:
        generated = _run_chain(originals, y_ts, subject, denoiser, sched, cfg, seeds)
    except (GuidanceError, SamplingError):
        if n == 1:
            generated = np.zeros_like(originals)
            failed[0] = True
        else:
            out = []
            for i in range(n):
                out.extend(generate_vce_batch(originals[i:i + 1], ys[i:i + 1], y_ts[i:i + 1],
                                              subject, denoiser, sched, cfg, seeds[i:i + 1]))
            return out
    wall = (time.perf_counter() - started) / n
    log_probs = tg.log_softmax(subject.forward(Tensor(generated))).data
    preds = np.argmax(log_probs, axis=1)
    records = []
    for i in range(n):
        snap = replace(cfg, seed=seeds[i]).snapshot()
        rejected = bool(cfg.reject_invalid and not failed[i] and preds[i] != y_ts[i])
        records.append(CounterfactualRecord(
            original=originals[i].copy(), source_label=int(ys[i]), target_label=int(y_ts[i]),
            generated=generated[i].copy(), predicted_label=int(preds[i]),
            subject_log_probs=log_probs[i].copy(), config=snap, seed=seeds[i],
            wall_time=wall, failed=bool(failed[i]), rejected=rejected))
    return records


def generate_vce(original: np.ndarray, y: int, y_t: int, subject, denoiser,
                 sched: NoiseSchedule, cfg: GuidanceConfig) -> CounterfactualRecord:
    """Single-record entry point; the record's stream comes from ``cfg.seed``."""
    original = np.asarray(original, dtype=np.float32)
    if original.ndim != 3:
        raise ValueError(f"expected one (1, H, W) image, got {original.shape}")
    return generate_vce_batch(original[None], [y], [y_t], subject, denoiser,
                              sched, cfg, [cfg.seed])[0]
