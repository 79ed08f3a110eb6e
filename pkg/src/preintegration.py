"""
Backward IMU preintegration between scan end times

Integration runs from the scan end time t_k toward older samples, so every
quantity is expressed in the body frame at t_k:

    β_{i-1} = β_i − ½ [R(γ_i)(â_i − b_a) + R(γ_{i-1})(â_{i-1} − b_a)] δt
    α_{i-1} = α_i − ½ (β_i + β_{i-1}) δt
    γ_{i-1} = γ_i ⊗ Exp(−ω̄ δt),   ω̄ = ½(ω̂_i + ω̂_{i-1}) − b_ω

A checkpoint is kept at every sample time so that the preintegration from
any point time t_j to t_k costs at most one extra mid-point step.
"""
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from geometry import UnitQuaternion, exp_map, right_jacobian, skew
from imu import TIME_TOLERANCE, ImuNoiseParams, ImuSample, ImuWindowError, interpolate_sample
from state import BA, BW, ERROR_STATE_DIM, P, THETA, V, State

logger = logging.getLogger(__name__)

# Rows of the preintegration error state [δα, δβ, δθ, δb_a, δb_ω]
ALPHA, BETA = P, V

DEFAULT_MAX_GAP = 0.02
DEFAULT_RELINEARIZE_THRESHOLD = 0.1

__all__ = [
    "ImuWindowError",
    "ImuGapError",
    "RelinearizationRequired",
    "Preintegration",
    "PreintegrationCache",
    "integrate_backward",
    "sub_preintegration",
    "bias_corrected",
    "corrected_terms",
    "imu_residual",
    "imu_residual_jacobian",
]


class ImuGapError(ImuWindowError):
    """Two consecutive samples are further apart than the allowed gap"""


class RelinearizationRequired(RuntimeError):
    """Bias moved too far from the linearization point; re-integrate"""


@dataclass(frozen=True, eq=False)
class Preintegration:
    """
    Relative motion from an older time to t_k, in the body frame at t_k

    jacobian is d(error state at the older time)/d(error state at t_k),
    accumulated through the recursion; its bias columns are the first-order
    bias Jacobians.
    """
    alpha: np.ndarray
    beta: np.ndarray
    gamma: UnitQuaternion
    dt: float
    acc_bias: np.ndarray
    gyro_bias: np.ndarray
    covariance: np.ndarray
    jacobian: np.ndarray

    @classmethod
    def identity(cls, acc_bias, gyro_bias) -> "Preintegration":
        return cls(
            alpha=np.zeros(3),
            beta=np.zeros(3),
            gamma=UnitQuaternion.identity(),
            dt=0.0,
            acc_bias=np.array(acc_bias, dtype=float),
            gyro_bias=np.array(gyro_bias, dtype=float),
            covariance=np.zeros((ERROR_STATE_DIM, ERROR_STATE_DIM)),
            jacobian=np.eye(ERROR_STATE_DIM),
        )

    @property
    def bias_ref(self) -> tuple[np.ndarray, np.ndarray]:
        return self.acc_bias, self.gyro_bias

    @property
    def dalpha_dba(self) -> np.ndarray:
        return self.jacobian[ALPHA, BA]

    @property
    def dalpha_dbw(self) -> np.ndarray:
        return self.jacobian[ALPHA, BW]

    @property
    def dbeta_dba(self) -> np.ndarray:
        return self.jacobian[BETA, BA]

    @property
    def dbeta_dbw(self) -> np.ndarray:
        return self.jacobian[BETA, BW]

    @property
    def dtheta_dbw(self) -> np.ndarray:
        return self.jacobian[THETA, BW]


@dataclass(frozen=True, eq=False)
class PreintegrationCache:
    """Checkpoints newest-first; checkpoints[0] is the identity at t_k"""
    times: np.ndarray
    checkpoints: tuple
    samples: tuple
    noise: ImuNoiseParams

    @property
    def t_start(self) -> float:
        return float(self.times[-1])

    @property
    def t_end(self) -> float:
        return float(self.times[0])

    @property
    def full(self) -> Preintegration:
        return self.checkpoints[-1]

    @property
    def bias_ref(self) -> tuple[np.ndarray, np.ndarray]:
        return self.full.bias_ref


def _propagate(
    pre: Preintegration,
    newer: ImuSample,
    older: ImuSample,
    noise: ImuNoiseParams,
) -> Preintegration:
    """One backward mid-point step from newer.t to older.t"""
    dt = newer.t - older.t
    ba, bw = pre.acc_bias, pre.gyro_bias

    rot_newer = pre.gamma.matrix()
    omega_mid = 0.5 * (newer.gyro + older.gyro) - bw
    step = exp_map(-omega_mid * dt)
    gamma = pre.gamma * step
    rot_older = gamma.matrix()

    acc_newer = newer.acc - ba
    acc_older = older.acc - ba
    beta = pre.beta - 0.5 * (rot_newer @ acc_newer + rot_older @ acc_older) * dt
    alpha = pre.alpha - 0.5 * (pre.beta + beta) * dt

    step_t = step.matrix().T
    eye = np.eye(3)

    f_beta_theta = 0.5 * dt * (rot_newer @ skew(acc_newer) + rot_older @ skew(acc_older) @ step_t)
    f_beta_ba = 0.5 * dt * (rot_newer + rot_older)
    f_beta_bw = 0.5 * dt * dt * rot_older @ skew(acc_older)

    F = np.eye(ERROR_STATE_DIM)
    F[ALPHA, BETA] = -dt * eye
    F[ALPHA, THETA] = -0.5 * dt * f_beta_theta
    F[ALPHA, BA] = -0.5 * dt * f_beta_ba
    F[ALPHA, BW] = -0.5 * dt * f_beta_bw
    F[BETA, THETA] = f_beta_theta
    F[BETA, BA] = f_beta_ba
    F[BETA, BW] = f_beta_bw
    F[THETA, THETA] = step_t
    F[THETA, BW] = dt * eye

    # Noise vector [n_a, n_ω, n_ba, n_bω]
    G = np.zeros((ERROR_STATE_DIM, 12))
    G[BETA, 0:3] = f_beta_ba
    G[BETA, 3:6] = f_beta_bw
    G[ALPHA, 0:6] = -0.5 * dt * G[BETA, 0:6]
    G[THETA, 3:6] = dt * eye
    G[BA, 6:9] = dt * eye
    G[BW, 9:12] = dt * eye

    Q = np.diag(np.repeat([
        noise.sigma_acc ** 2,
        noise.sigma_gyro ** 2,
        noise.sigma_acc_bias ** 2,
        noise.sigma_gyro_bias ** 2,
    ], 3) / dt)

    covariance = F @ pre.covariance @ F.T + G @ Q @ G.T
    covariance = 0.5 * (covariance + covariance.T)

    return replace(
        pre,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        dt=pre.dt + dt,
        covariance=covariance,
        jacobian=F @ pre.jacobian,
    )


def integrate_backward(
    samples: Sequence[ImuSample],
    bias: tuple,
    noise: ImuNoiseParams,
    max_gap: float = DEFAULT_MAX_GAP,
) -> PreintegrationCache:
    """
    Preintegrate a window, newest sample to oldest

    Args:
        samples: window in increasing time, first at t_{k-1}, last at t_k
        bias: (b_a, b_ω), held constant over the window
        noise: continuous noise densities
        max_gap: largest allowed time step (s)
    """
    if len(samples) < 2:
        raise ImuWindowError(f"Preintegration needs at least 2 samples, got {len(samples)}")

    times = np.array([s.t for s in samples])
    steps = np.diff(times)
    if np.any(steps <= 0.0):
        bad = int(np.argmin(steps))
        raise ImuWindowError(f"IMU timestamps not increasing at {times[bad]:.9f} -> {times[bad + 1]:.9f}")
    if np.any(steps > max_gap + TIME_TOLERANCE):
        bad = int(np.argmax(steps))
        raise ImuGapError(f"IMU gap of {steps[bad] * 1e3:.3f} ms at t={times[bad]:.6f} exceeds {max_gap * 1e3:.3f} ms")

    acc_bias, gyro_bias = bias
    pre = Preintegration.identity(acc_bias, gyro_bias)
    checkpoints = [pre]
    for i in range(len(samples) - 1, 0, -1):
        pre = _propagate(pre, samples[i], samples[i - 1], noise)
        checkpoints.append(pre)

    logger.debug(f"Preintegrated {len(samples)} samples over {pre.dt:.4f} s")
    return PreintegrationCache(
        times=times[::-1].copy(),
        checkpoints=tuple(checkpoints),
        samples=tuple(samples),
        noise=noise,
    )


def sub_preintegration(cache: PreintegrationCache, t_j: float) -> Preintegration:
    """Preintegration from t_j to t_k"""
    if t_j < cache.t_start - TIME_TOLERANCE or t_j > cache.t_end + TIME_TOLERANCE:
        raise ImuWindowError(
            f"Point time {t_j:.9f} outside window [{cache.t_start:.9f}, {cache.t_end:.9f}]"
        )

    n = len(cache.samples)
    ascending = cache.times[::-1]
    idx = int(np.searchsorted(ascending, t_j))
    if idx < n and ascending[idx] - t_j <= TIME_TOLERANCE:
        return cache.checkpoints[n - 1 - idx]
    if idx > 0 and t_j - ascending[idx - 1] <= TIME_TOLERANCE:
        return cache.checkpoints[n - idx]

    newer = cache.samples[idx]
    older = interpolate_sample(cache.samples[idx - 1], newer, t_j)
    return _propagate(cache.checkpoints[n - 1 - idx], newer, older, cache.noise)


def corrected_terms(
    pre: Preintegration,
    acc_bias,
    gyro_bias,
) -> tuple[np.ndarray, np.ndarray, UnitQuaternion, np.ndarray]:
    """
    First-order bias correction of (α, β, γ)

    Returns:
        (α, β, γ, φ) where φ = (∂θ/∂b_ω) δb_ω is the rotation correction
    """
    dba = np.asarray(acc_bias, dtype=float) - pre.acc_bias
    dbw = np.asarray(gyro_bias, dtype=float) - pre.gyro_bias
    alpha = pre.alpha + pre.dalpha_dba @ dba + pre.dalpha_dbw @ dbw
    beta = pre.beta + pre.dbeta_dba @ dba + pre.dbeta_dbw @ dbw
    phi = pre.dtheta_dbw @ dbw
    return alpha, beta, pre.gamma * exp_map(phi), phi


def bias_corrected(
    pre: Preintegration,
    new_bias: tuple,
    threshold: float = DEFAULT_RELINEARIZE_THRESHOLD,
) -> Preintegration:
    acc_bias, gyro_bias = (np.asarray(b, dtype=float) for b in new_bias)
    drift = max(
        float(np.linalg.norm(acc_bias - pre.acc_bias)),
        float(np.linalg.norm(gyro_bias - pre.gyro_bias)),
    )
    if drift > threshold:
        raise RelinearizationRequired(
            f"Bias moved {drift:.4f} from the linearization point (threshold {threshold})"
        )
    alpha, beta, gamma, _ = corrected_terms(pre, acc_bias, gyro_bias)
    return replace(pre, alpha=alpha, beta=beta, gamma=gamma, acc_bias=acc_bias, gyro_bias=gyro_bias)


def _rotation_error(x_k: State, x_prev: State, gamma: UnitQuaternion) -> UnitQuaternion:
    return x_k.q.conjugate() * x_prev.q * gamma.conjugate()


def imu_residual(x_k: State, x_prev: State, pre: Preintegration, g_w) -> np.ndarray:
    """Residual blocks [r_p, r_v, r_θ, r_ba, r_bω]"""
    g_w = np.asarray(g_w, dtype=float)
    alpha, beta, gamma, _ = corrected_terms(pre, x_k.acc_bias, x_k.gyro_bias)
    rot_t = x_k.q.matrix().T
    dt = pre.dt

    r = np.zeros(ERROR_STATE_DIM)
    r[P] = rot_t @ (x_k.p - x_k.v * dt - 0.5 * g_w * dt * dt - x_prev.p) + alpha
    r[V] = rot_t @ (x_k.v + g_w * dt - x_prev.v) + beta
    r[THETA] = 2.0 * _rotation_error(x_k, x_prev, gamma).vec
    r[BA] = x_k.acc_bias - x_prev.acc_bias
    r[BW] = x_k.gyro_bias - x_prev.gyro_bias
    return r


def imu_residual_jacobian(x_k: State, x_prev: State, pre: Preintegration, g_w) -> np.ndarray:
    """d(imu_residual)/d(error state of x_k)"""
    g_w = np.asarray(g_w, dtype=float)
    _, _, gamma, phi = corrected_terms(pre, x_k.acc_bias, x_k.gyro_bias)
    rot_t = x_k.q.matrix().T
    dt = pre.dt
    eye = np.eye(3)

    J = np.zeros((ERROR_STATE_DIM, ERROR_STATE_DIM))
    J[P, P] = rot_t
    J[P, V] = -dt * rot_t
    J[P, THETA] = skew(rot_t @ (x_k.p - x_k.v * dt - 0.5 * g_w * dt * dt - x_prev.p))
    J[P, BA] = pre.dalpha_dba
    J[P, BW] = pre.dalpha_dbw

    J[V, V] = rot_t
    J[V, THETA] = skew(rot_t @ (x_k.v + g_w * dt - x_prev.v))
    J[V, BA] = pre.dbeta_dba
    J[V, BW] = pre.dbeta_dbw

    e = _rotation_error(x_k, x_prev, gamma)
    J[THETA, THETA] = -(e.w * eye - skew(e.vec))
    J[THETA, BW] = -(e.w * eye + skew(e.vec)) @ gamma.matrix() @ right_jacobian(phi) @ pre.dtheta_dbw

    J[BA, BA] = eye
    J[BW, BW] = eye
    return J
