import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import high_dynamics_spec, random_samples, random_state, truth_state
from geometry import boxminus
from imu import ImuNoiseParams, ImuSample, gravity_vector, slice_window
from preintegration import (
    ImuGapError,
    ImuWindowError,
    Preintegration,
    RelinearizationRequired,
    bias_corrected,
    corrected_terms,
    imu_residual,
    imu_residual_jacobian,
    integrate_backward,
    sub_preintegration,
)
from simulator import synthesize_imu
from state import ERROR_STATE_DIM, State

ZERO_BIAS = (np.zeros(3), np.zeros(3))
G_W = gravity_vector()


def constant_samples(gyro, acc, duration=1.0, rate=400.0):
    n = int(round(duration * rate)) + 1
    return [ImuSample(i / rate, gyro, acc) for i in range(n)]


def test_constant_rotation_closed_form(noise):
    omega = np.array([0.3, -0.2, 0.5])
    cache = integrate_backward(constant_samples(omega, np.zeros(3)), ZERO_BIAS, noise)
    pre = cache.full
    assert pre.dt == pytest.approx(1.0, abs=1e-12)
    expected = Rotation.from_rotvec(-omega * 1.0)
    np.testing.assert_allclose(pre.gamma.matrix(), expected.as_matrix(), atol=1e-9)
    np.testing.assert_allclose(pre.alpha, np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(pre.beta, np.zeros(3), atol=1e-12)


def test_constant_acceleration_closed_form(noise):
    acc = np.array([0.4, -1.0, 9.81])
    cache = integrate_backward(constant_samples(np.zeros(3), acc), ZERO_BIAS, noise)
    np.testing.assert_allclose(cache.full.beta, -acc, atol=1e-9)
    np.testing.assert_allclose(cache.full.alpha, 0.5 * acc, atol=1e-9)


def test_rotation_about_the_acceleration_axis_closed_form(noise):
    # Specific force along the spin axis stays fixed in every body frame
    cache = integrate_backward(constant_samples([0.0, 0.0, 2.0], [0.0, 0.0, 9.81]), ZERO_BIAS, noise)
    np.testing.assert_allclose(cache.full.beta, [0.0, 0.0, -9.81], atol=1e-9)
    np.testing.assert_allclose(cache.full.alpha, [0.0, 0.0, 0.5 * 9.81], atol=1e-9)
    np.testing.assert_allclose(cache.full.gamma.log(), [0.0, 0.0, -2.0], atol=1e-9)


def test_checkpoints_are_newest_first(rng, noise):
    samples = random_samples(rng)
    cache = integrate_backward(samples, ZERO_BIAS, noise)
    assert cache.t_end == samples[-1].t
    assert cache.t_start == samples[0].t
    assert cache.checkpoints[0].dt == 0.0
    assert len(cache.checkpoints) == len(samples)


def test_sub_preintegration_at_sample_and_between_samples(rng, noise):
    samples = random_samples(rng)
    cache = integrate_backward(samples, ZERO_BIAS, noise)
    assert sub_preintegration(cache, samples[-1].t) is cache.checkpoints[0]
    assert sub_preintegration(cache, samples[0].t) is cache.full

    # Between samples: same as integrating a window cut at t_j
    t_j = 0.5 * (samples[10].t + samples[11].t)
    direct = integrate_backward(slice_window(samples, t_j, samples[-1].t), ZERO_BIAS, noise).full
    sub = sub_preintegration(cache, t_j)
    assert sub.dt == pytest.approx(samples[-1].t - t_j, abs=1e-12)
    np.testing.assert_allclose(sub.alpha, direct.alpha, atol=1e-12)
    np.testing.assert_allclose(sub.beta, direct.beta, atol=1e-12)
    np.testing.assert_allclose(sub.gamma.wxyz, direct.gamma.wxyz, atol=1e-12)


def test_sub_preintegration_rejects_time_outside_window(rng, noise):
    cache = integrate_backward(random_samples(rng), ZERO_BIAS, noise)
    with pytest.raises(ImuWindowError, match="outside window"):
        sub_preintegration(cache, cache.t_end + 0.01)


def test_window_errors(rng, noise):
    samples = random_samples(rng)
    with pytest.raises(ImuWindowError):
        integrate_backward(samples[:1], ZERO_BIAS, noise)
    with pytest.raises(ImuWindowError, match="not increasing"):
        integrate_backward([samples[1], samples[0]], ZERO_BIAS, noise)
    gap = [samples[0], ImuSample(samples[0].t + 0.05, samples[1].gyro, samples[1].acc)]
    with pytest.raises(ImuGapError):
        integrate_backward(gap, ZERO_BIAS, noise, max_gap=0.02)


def test_covariance_is_symmetric_positive_definite(rng, noise):
    pre = integrate_backward(random_samples(rng), ZERO_BIAS, noise).full
    np.testing.assert_allclose(pre.covariance, pre.covariance.T, atol=0.0)
    assert np.all(np.linalg.eigvalsh(pre.covariance) > 0.0)


def test_bias_jacobians_match_reintegration(rng, noise):
    samples = random_samples(rng, gyro_scale=0.2)
    pre = integrate_backward(samples, ZERO_BIAS, noise).full
    h = 1e-6
    for axis in range(3):
        delta = np.zeros(3)
        delta[axis] = h
        up = integrate_backward(samples, (delta, np.zeros(3)), noise).full
        down = integrate_backward(samples, (-delta, np.zeros(3)), noise).full
        np.testing.assert_allclose((up.alpha - down.alpha) / (2 * h), pre.dalpha_dba[:, axis], rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose((up.beta - down.beta) / (2 * h), pre.dbeta_dba[:, axis], rtol=1e-5, atol=1e-9)

        up = integrate_backward(samples, (np.zeros(3), delta), noise).full
        down = integrate_backward(samples, (np.zeros(3), -delta), noise).full
        dtheta = boxminus(up.gamma, down.gamma) / (2 * h)
        # The rotation-step Jacobian is first order in ω δt
        np.testing.assert_allclose(dtheta, pre.dtheta_dbw[:, axis], rtol=1e-2, atol=1e-4)
        np.testing.assert_allclose((up.alpha - down.alpha) / (2 * h), pre.dalpha_dbw[:, axis], rtol=1e-2, atol=1e-4)
        np.testing.assert_allclose((up.beta - down.beta) / (2 * h), pre.dbeta_dbw[:, axis], rtol=1e-2, atol=1e-4)


def test_corrected_terms_at_reference_bias_are_unchanged(rng, noise):
    pre = integrate_backward(random_samples(rng), ZERO_BIAS, noise).full
    alpha, beta, gamma, phi = corrected_terms(pre, np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(alpha, pre.alpha)
    np.testing.assert_array_equal(beta, pre.beta)
    np.testing.assert_array_equal(phi, np.zeros(3))


def test_bias_corrected_past_threshold_requires_reintegration(rng, noise):
    pre = integrate_backward(random_samples(rng), ZERO_BIAS, noise).full
    moved = bias_corrected(pre, (np.full(3, 0.01), np.zeros(3)))
    np.testing.assert_allclose(moved.acc_bias, np.full(3, 0.01))
    np.testing.assert_allclose(moved.alpha, pre.alpha + pre.dalpha_dba @ np.full(3, 0.01))
    with pytest.raises(RelinearizationRequired):
        bias_corrected(pre, (np.full(3, 0.2), np.zeros(3)), threshold=0.1)


def test_identity_window_residual_is_zero(rng):
    x = random_state(rng)
    pre = Preintegration.identity(x.acc_bias, x.gyro_bias)
    np.testing.assert_allclose(imu_residual(x, x, pre, G_W), np.zeros(ERROR_STATE_DIM), atol=1e-12)


def numeric_jacobian(fn, x, h=1e-6):
    columns = []
    for i in range(ERROR_STATE_DIM):
        dx = np.zeros(ERROR_STATE_DIM)
        dx[i] = h
        columns.append((fn(x.boxplus(dx)) - fn(x.boxplus(-dx))) / (2 * h))
    return np.column_stack(columns)


def test_residual_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    noise = ImuNoiseParams(1e-2, 1e-3, 1e-4, 1e-5)
    for _ in range(100):
        samples = random_samples(rng)
        x_prev = random_state(rng)
        cache = integrate_backward(samples, (x_prev.acc_bias, x_prev.gyro_bias), noise)
        x_k = random_state(rng, t=cache.t_end)
        # Keep the biases near the linearization point
        x_k = State(
            p=x_k.p, v=x_k.v, q=x_k.q,
            acc_bias=x_prev.acc_bias + rng.normal(0.0, 0.02, 3),
            gyro_bias=x_prev.gyro_bias + rng.normal(0.0, 0.005, 3),
            t=x_k.t,
        )

        analytic = imu_residual_jacobian(x_k, x_prev, cache.full, G_W)
        numeric = numeric_jacobian(lambda x: imu_residual(x, x_prev, cache.full, G_W), x_k)
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1.0)
        assert error < 1e-4


def test_true_states_zero_the_residual_on_noise_free_simulation(noise):
    spec = high_dynamics_spec(duration=1.0)
    samples = synthesize_imu(spec, rate=8000.0)
    for k in range(1, 10):
        t_prev, t_k = 0.1 * (k - 1), 0.1 * k
        cache = integrate_backward(slice_window(samples, t_prev, t_k), ZERO_BIAS, noise)
        r = imu_residual(truth_state(spec, t_k), truth_state(spec, t_prev), cache.full, G_W)
        assert np.linalg.norm(r) < 1e-6


def test_true_states_residual_at_default_rate_is_small(noise):
    spec = high_dynamics_spec(duration=0.5)
    samples = synthesize_imu(spec, rate=400.0)
    cache = integrate_backward(slice_window(samples, 0.2, 0.3), ZERO_BIAS, noise)
    r = imu_residual(truth_state(spec, 0.3), truth_state(spec, 0.2), cache.full, G_W)
    assert np.linalg.norm(r) < 1e-3


@pytest.mark.slow
def test_monte_carlo_covariance_matches_propagation():
    rate = 400.0
    noise = ImuNoiseParams(sigma_acc=1e-2, sigma_gyro=1e-3, sigma_acc_bias=1e-4, sigma_gyro_bias=1e-5)
    clean = [
        ImuSample(i / rate, [0.3, -0.5, 1.0], [1.0 + 0.5 * math.sin(20 * i / rate), 0.5, 9.81])
        for i in range(41)
    ]
    reference = integrate_backward(clean, ZERO_BIAS, noise).full

    rng = np.random.default_rng(2024)
    errors = []
    for _ in range(500):
        noisy = [
            ImuSample(
                s.t,
                s.gyro + rng.standard_normal(3) * noise.sigma_gyro * math.sqrt(rate),
                s.acc + rng.standard_normal(3) * noise.sigma_acc * math.sqrt(rate),
            )
            for s in clean
        ]
        pre = integrate_backward(noisy, ZERO_BIAS, noise).full
        errors.append(np.concatenate([
            pre.alpha - reference.alpha,
            pre.beta - reference.beta,
            boxminus(pre.gamma, reference.gamma),
        ]))

    empirical = np.var(np.array(errors), axis=0)
    propagated = np.diag(reference.covariance)[:9]
    ratio = empirical / propagated
    assert np.all(ratio > 0.5) and np.all(ratio < 2.0)


def test_covariance_trace_grows_with_the_window(rng, noise):
    cache = integrate_backward(random_samples(rng), ZERO_BIAS, noise)
    traces = np.array([np.trace(pre.covariance) for pre in cache.checkpoints])
    assert traces[0] == 0.0
    assert np.all(np.diff(traces) >= 0.0)
    assert traces[-1] > 0.0
