"""Noise schedule and forward/reverse process tests."""

import numpy as np
import pytest

from vcekit.diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    NoiseSchedule,
    SamplingError,
    ScheduleError,
    ddpm_step,
    derive_seed,
    draw_noise,
    finish_step,
    make_schedule,
    per_sample_rngs,
    posterior_mean,
    predict_x0,
    q_sample,
    q_sample_batched,
    sample_unconditional,
)
from vcekit.tensor import Tensor


class OracleDenoiser:
    """Ideal noise predictor for a point-mass data distribution at ``m``."""

    def __init__(self, sched, m):
        self.sched = sched
        self.m = m

    def forward(self, x_t, t_arr):
        t = int(t_arr[0])
        ab = self.sched.alpha_bar[t]
        eps = (x_t.data - np.sqrt(ab) * self.m) / np.sqrt(1.0 - ab)
        return Tensor(eps.astype(np.float32))


# ---------------------------------------------------------------------------
# schedule arithmetic
# ---------------------------------------------------------------------------


def test_two_step_schedule_hand_values():
    s = make_schedule(2, 1e-4, 0.02)
    assert np.allclose(s.beta, [1e-4, 0.02])
    assert np.allclose(s.alpha, [0.9999, 0.98])
    assert np.allclose(s.alpha_bar, [0.9999, 0.9999 * 0.98])
    assert s.posterior_var[0] == s.beta[0]
    expected = 0.02 * (1 - 0.9999) / (1 - 0.9999 * 0.98)
    assert np.isclose(s.posterior_var[1], expected, rtol=1e-12)


def test_single_step_schedule():
    s = make_schedule(1, 0.01, 0.01)
    assert s.t_steps == 1
    assert np.allclose(s.alpha_bar, [0.99])
    assert s.posterior_var[0] == s.beta[0]


def test_default_schedule_endpoint_near_zero():
    s = make_schedule()
    assert s.t_steps == DEFAULT_T == 200
    assert s.beta[0] == DEFAULT_BETA_START
    assert s.beta[-1] == DEFAULT_BETA_END
    assert float(s.alpha_bar[-1]) < 0.05


def test_posterior_var_never_exceeds_beta():
    s = make_schedule(50, 1e-4, 0.03)
    assert (s.posterior_var <= s.beta + 1e-15).all()
    assert (s.posterior_var > 0).all()


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ScheduleError):
        make_schedule(0)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.02, 0.01)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.0, 0.01)
    with pytest.raises(ScheduleError):
        NoiseSchedule(
            beta=np.array([0.02, 0.01]),
            alpha=np.array([0.98, 0.99]),
            alpha_bar=np.array([0.98, 0.9702]),
            posterior_var=np.array([0.02, 0.01]),
        )


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------


def test_q_sample_formula_and_linearity():
    s = make_schedule(20, 1e-3, 0.02)
    rng = np.random.default_rng(0)
    x0 = Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64)
    eps = Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64)
    t = 7
    out = q_sample(x0, t, eps, s).data
    ab = s.alpha_bar[t]
    assert np.allclose(out, np.sqrt(ab) * x0.data + np.sqrt(1 - ab) * eps.data, rtol=1e-12)
    # linear in both arguments
    out2 = q_sample(Tensor(2 * x0.data, dtype=np.float64), t, eps, s).data
    assert np.allclose(out2 - out, np.sqrt(ab) * x0.data, rtol=1e-10)


def test_q_sample_at_t0_is_nearly_x0():
    s = make_schedule()
    x0 = Tensor(np.full((1, 1, 4, 4), 0.5, dtype=np.float64))
    eps = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float64))
    out = q_sample(x0, 0, eps, s).data
    assert np.allclose(out, np.sqrt(1 - 1e-4) * 0.5, rtol=1e-12)


def test_q_sample_rejects_bad_t():
    s = make_schedule(10, 1e-3, 0.02)
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ScheduleError):
        q_sample(x, 10, x, s)
    with pytest.raises(ScheduleError):
        q_sample(x, -1, x, s)


def test_q_sample_monte_carlo_moments():
    s = make_schedule()
    rng = np.random.default_rng(42)
    x0 = rng.uniform(-1, 1, size=(1, 4, 4)).astype(np.float64)
    n = 10000
    for t in (3, 60, 120, 199):
        ab = s.alpha_bar[t]
        draws = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * rng.standard_normal((n, 1, 4, 4))
        resid = draws - np.sqrt(ab) * x0
        npix = 16
        mean_stat = resid.mean()
        mean_se = np.sqrt((1 - ab) / (n * npix))
        assert abs(mean_stat) <= 3 * mean_se
        var_stat = resid.var()
        var_se = (1 - ab) * np.sqrt(2.0 / (n * npix - 1))
        assert abs(var_stat - (1 - ab)) <= 3 * var_se


def test_q_sample_batched_matches_scalar_t():
    s = make_schedule(30, 1e-3, 0.02)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 1, 4, 4)).astype(np.float32)
    eps = rng.standard_normal((3, 1, 4, 4)).astype(np.float32)
    t = np.array([5, 5, 5])
    batched = q_sample_batched(x0, t, eps, s)
    single = q_sample(Tensor(x0), 5, Tensor(eps), s).data
    assert np.allclose(batched, single, atol=1e-6)


# ---------------------------------------------------------------------------
# x0 prediction
# ---------------------------------------------------------------------------


def test_predict_x0_inverts_q_sample():
    s = make_schedule()
    rng = np.random.default_rng(2)
    x0 = Tensor(rng.uniform(-0.9, 0.9, size=(2, 1, 4, 4)), dtype=np.float64)
    eps = Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64)
    for t in (0, 50, 150, 199):
        x_t = q_sample(x0, t, eps, s)
        rec = predict_x0(x_t, eps, t, s, clamp=False)
        assert np.allclose(rec.data, x0.data, atol=1e-10)


def test_predict_x0_clamps_to_unit_interval():
    s = make_schedule()
    x_t = Tensor(np.full((1, 1, 2, 2), 30.0, dtype=np.float64))
    eps = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    out = predict_x0(x_t, eps, 150, s, clamp=True)
    assert np.allclose(out.data, 1.0)
    out2 = predict_x0(x_t, eps, 150, s, clamp=False)
    assert out2.data.max() > 1.0


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------


def test_posterior_mean_formula():
    s = make_schedule()
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    e = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    t = 120
    mu = posterior_mean(x, e, t, s)
    ref = (x - (s.beta[t] / np.sqrt(1 - s.alpha_bar[t])) * e) / np.sqrt(s.alpha[t])
    assert np.allclose(mu, ref, atol=1e-6)


def test_step_at_t0_adds_no_noise():
    s = make_schedule()
    model = OracleDenoiser(s, m=0.3)
    x = np.full((2, 1, 4, 4), 0.31, dtype=np.float32)
    a = ddpm_step(model, x, 0, s, per_sample_rngs(1, 2))
    b = ddpm_step(model, x, 0, s, per_sample_rngs(999, 2))
    assert np.array_equal(a, b)


def test_step_noise_scale_matches_posterior_var():
    s = make_schedule()
    t = 100
    x = np.zeros((4000, 1, 1, 1), dtype=np.float64)
    eps_hat = np.zeros_like(x)
    rngs = per_sample_rngs(7, 4000)
    out = finish_step(x, eps_hat, t, s, rngs)
    sd = out.std()
    expected = np.sqrt(s.posterior_var[t])
    assert abs(sd - expected) / expected < 0.05


def test_finish_step_rejects_non_finite():
    s = make_schedule()
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)
    bad = np.full_like(x, np.nan)
    with pytest.raises(SamplingError, match="non-finite"):
        finish_step(x, bad, 5, s, per_sample_rngs(0, 1))


def test_oracle_denoiser_chain_reaches_data_mean():
    s = make_schedule()
    m = 0.3
    model = OracleDenoiser(s, m=m)
    out = sample_unconditional(model, s, n=4, seed=5, resolution=4)
    assert out.shape == (4, 1, 4, 4)
    assert float(np.abs(out - m).max()) < 0.1


def test_sample_unconditional_deterministic():
    class Damp:
        def forward(self, x_t, t_arr):
            return Tensor(0.1 * x_t.data)

    s = make_schedule(40, 1e-3, 0.03)
    model = Damp()
    a = sample_unconditional(model, s, n=3, seed=11, resolution=4)
    b = sample_unconditional(model, s, n=3, seed=11, resolution=4)
    c = sample_unconditional(model, s, n=3, seed=12, resolution=4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


# ---------------------------------------------------------------------------
# seed discipline
# ---------------------------------------------------------------------------


def test_derive_seed_stable_and_spread():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    seen = {derive_seed(123, i) for i in range(100)}
    assert len(seen) == 100
    assert all(0 <= s < 2**63 for s in seen)


def test_draw_noise_is_per_stream():
    rngs = per_sample_rngs(3, 2)
    a = draw_noise(rngs, (1, 2, 2))
    rngs2 = per_sample_rngs(3, 2)
    b0 = rngs2[0].standard_normal(size=(1, 2, 2), dtype=np.float32)
    assert np.array_equal(a[0], b0)
