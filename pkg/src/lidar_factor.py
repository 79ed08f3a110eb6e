"""
Iterated point-level undistortion and point-to-line / point-to-plane factors

A point measured at t_j in the body frame at t_j is brought to the body frame
at the scan end t_k in two steps, both re-evaluated at every iterate x_k:

  a priori      p̄ = R_kᵀ(−v_k Δt_j − ½ g Δt_j²) + α_j,   q̄ = γ_j,   Δt_j = t_k − t_j
  correction    δT_j spreads the discrepancy between x_k, x_{k-1} and the
                full-window a-priori motion over the sweep with factor μ_j:
                δq = Exp(μ_j φ),  φ = 2 vec(q_k⁻¹ ⊗ q_{k-1} ⊗ γ⁻¹)
                δp = μ_j R_kᵀ(R_{k-1} s + p_{k-1} − p_k),  s = −R̄ᵀ p̄_{k-1}

The undistorted body point u = δR (R̄_j p_j + p̄) + δp is then moved to the
world frame with x_k and compared with its map primitive.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from geometry import RigidTransform, UnitQuaternion, exp_map, right_jacobian, skew
from map_matching import Correspondence, CorrespondenceKind
from preintegration import Preintegration, PreintegrationCache, corrected_terms, sub_preintegration
from state import BA, BW, ERROR_STATE_DIM, P, THETA, V, State

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UndistortionTerms:
    """A-priori pose of the body at t_j expressed in the body frame at t_k"""
    p_bar: np.ndarray
    q_bar: UnitQuaternion
    mu: float
    sub: Preintegration


def interpolation_factor(t_j: float, t_prev: float, t_k: float) -> float:
    """μ_j = (t_k − t_j)/(t_k − t_{k-1}) clamped to [0, 1]"""
    span = t_k - t_prev
    if span <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, (t_k - t_j) / span)))


def _apriori(sub: Preintegration, x_k: State, g_w: np.ndarray) -> tuple[np.ndarray, UnitQuaternion, np.ndarray, np.ndarray]:
    """(p̄, q̄, φ_bias, c) with c = −v Δt − ½ g Δt²"""
    alpha, _, gamma, phi = corrected_terms(sub, x_k.acc_bias, x_k.gyro_bias)
    dt = sub.dt
    c = -x_k.v * dt - 0.5 * g_w * dt * dt
    return x_k.q.matrix().T @ c + alpha, gamma, phi, c


def apriori_undistort(cache: PreintegrationCache, x_k: State, g_w, t_j: float) -> UndistortionTerms:
    sub = sub_preintegration(cache, t_j)
    p_bar, q_bar, _, _ = _apriori(sub, x_k, np.asarray(g_w, dtype=float))
    mu = interpolation_factor(t_j, cache.t_start, cache.t_end)
    return UndistortionTerms(p_bar=p_bar, q_bar=q_bar, mu=mu, sub=sub)


@dataclass(frozen=True, eq=False)
class _MotionTerms:
    """Scan-level discrepancy (φ, t_D) and its derivatives w.r.t. x_k"""
    phi: np.ndarray
    t_d: np.ndarray
    dphi_dtheta: np.ndarray
    dphi_dbw: np.ndarray
    dtd: np.ndarray  # 3x15


class ScanMotion:
    """
    The part of the correction shared by every point of one scan

    Holds x_{k-1} (fixed) and the full-window preintegration; the terms for
    an iterate are memoized on the identity of the last State seen.
    """

    def __init__(self, prev_state: State, full: Preintegration, g_w):
        self.prev_state = prev_state
        self.full = full
        self.g_w = np.asarray(g_w, dtype=float)
        self._last_state: Optional[State] = None
        self._last_terms: Optional[_MotionTerms] = None

    def at(self, x_k: State) -> _MotionTerms:
        if x_k is self._last_state:
            return self._last_terms
        terms = self._compute(x_k)
        self._last_state, self._last_terms = x_k, terms
        return terms

    def _compute(self, x_k: State) -> _MotionTerms:
        full, prev = self.full, self.prev_state
        p_bar_full, gamma_full, phi_full, c_full = _apriori(full, x_k, self.g_w)
        rot = x_k.q.matrix()
        rot_t = rot.T
        rot_bar_t = gamma_full.matrix().T
        jr_bias = right_jacobian(phi_full) @ full.dtheta_dbw

        s = -rot_bar_t @ p_bar_full
        t_d = rot_t @ (prev.q.matrix() @ s + prev.p - x_k.p)

        e = x_k.q.conjugate() * prev.q * gamma_full.conjugate()
        eye = np.eye(3)
        dphi_dtheta = -(e.w * eye - skew(e.vec))
        dphi_dbw = -(e.w * eye + skew(e.vec)) @ gamma_full.matrix() @ jr_bias

        ds = np.zeros((3, ERROR_STATE_DIM))
        ds[:, V] = full.dt * rot_bar_t @ rot_t
        ds[:, THETA] = -rot_bar_t @ skew(rot_t @ c_full)
        ds[:, BA] = -rot_bar_t @ full.dalpha_dba
        ds[:, BW] = -rot_bar_t @ full.dalpha_dbw + skew(s) @ jr_bias

        dtd = (rot_t @ prev.q.matrix()) @ ds
        dtd[:, P] += -rot_t
        dtd[:, THETA] += skew(t_d)

        return _MotionTerms(
            phi=2.0 * e.vec,
            t_d=t_d,
            dphi_dtheta=dphi_dtheta,
            dphi_dbw=dphi_dbw,
            dtd=dtd,
        )


def correction(x_k: State, x_prev: State, full: Preintegration, mu: float, g_w) -> RigidTransform:
    """δT_j in linearized form"""
    terms = ScanMotion(x_prev, full, g_w).at(x_k)
    return RigidTransform(exp_map(mu * terms.phi), mu * terms.t_d)


def corrected_undistort(terms: UndistortionTerms, delta: RigidTransform) -> tuple[np.ndarray, UnitQuaternion]:
    """(p̌, q̌) = δT ∘ (q̄, p̄)"""
    p_check = delta.rotation.rotate(terms.p_bar) + delta.translation
    return p_check, delta.rotation * terms.q_bar


@dataclass(frozen=True, eq=False)
class LidarResidualContext:
    """
    Everything one feature point needs to build its residual

    frozen_point, when set, replaces the iterated undistortion with a body
    point computed once (one-pass mode).
    """
    terms: UndistortionTerms
    point: np.ndarray
    motion: ScanMotion
    correspondence: Optional[Correspondence] = None
    noise_sigma: float = 0.02
    frozen_point: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if not self.noise_sigma > 0.0:
            raise ValueError(f"LiDAR noise sigma must be positive, got {self.noise_sigma}")

    @property
    def prev_state(self) -> State:
        return self.motion.prev_state


def _undistorted(ctx: LidarResidualContext, x_k: State, with_jacobian: bool):
    """Body point at t_k, optionally with its 3x15 derivative"""
    if ctx.frozen_point is not None:
        return ctx.frozen_point, (np.zeros((3, ERROR_STATE_DIM)) if with_jacobian else None)

    sub, mu = ctx.terms.sub, ctx.terms.mu
    g_w = ctx.motion.g_w
    p_bar, gamma_j, phi_j, c_j = _apriori(sub, x_k, g_w)
    motion = ctx.motion.at(x_k)
    delta = RigidTransform(exp_map(mu * motion.phi), mu * motion.t_d)
    p_check, q_check = corrected_undistort(replace(ctx.terms, p_bar=p_bar, q_bar=gamma_j), delta)
    u = q_check.rotate(ctx.point) + p_check
    if not with_jacobian:
        return u, None

    rot_bar_j = gamma_j.matrix()
    w = rot_bar_j @ ctx.point + p_bar
    d_rot = delta.rotation.matrix()

    rot_t = x_k.q.matrix().T
    dw = np.zeros((3, ERROR_STATE_DIM))
    dw[:, V] = -sub.dt * rot_t
    dw[:, THETA] = skew(rot_t @ c_j)
    dw[:, BA] = sub.dalpha_dba
    dw[:, BW] = sub.dalpha_dbw - rot_bar_j @ skew(ctx.point) @ right_jacobian(phi_j) @ sub.dtheta_dbw

    d_rot_w = -mu * d_rot @ skew(w) @ right_jacobian(mu * motion.phi)
    du = d_rot @ dw + mu * motion.dtd
    du[:, THETA] += d_rot_w @ motion.dphi_dtheta
    du[:, BW] += d_rot_w @ motion.dphi_dbw
    return u, du


def undistorted_point(ctx: LidarResidualContext, x_k: State) -> np.ndarray:
    """The point expressed in the body frame at t_k"""
    return _undistorted(ctx, x_k, False)[0]


def world_point(ctx: LidarResidualContext, x_k: State) -> np.ndarray:
    return x_k.q.matrix() @ undistorted_point(ctx, x_k) + x_k.p


def _world_point_and_jacobian(ctx: LidarResidualContext, x_k: State) -> tuple[np.ndarray, np.ndarray]:
    u, du = _undistorted(ctx, x_k, True)
    rot = x_k.q.matrix()
    dP = rot @ du
    dP[:, P] += np.eye(3)
    dP[:, THETA] += -rot @ skew(u)
    return rot @ u + x_k.p, dP


def _require(ctx: LidarResidualContext, kind: CorrespondenceKind) -> Correspondence:
    corr = ctx.correspondence
    if corr is None or corr.kind is not kind:
        raise ValueError(f"Residual needs a {kind.value} correspondence")
    return corr


def line_residual(ctx: LidarResidualContext, x_k: State) -> np.ndarray:
    corr = _require(ctx, CorrespondenceKind.LINE)
    return np.cross(corr.normal, world_point(ctx, x_k) - corr.point)


def plane_residual(ctx: LidarResidualContext, x_k: State) -> float:
    corr = _require(ctx, CorrespondenceKind.PLANE)
    return float(corr.normal @ (world_point(ctx, x_k) - corr.point))


def residual(ctx: LidarResidualContext, x_k: State) -> np.ndarray:
    """Line or plane residual as a 1-D array"""
    if ctx.correspondence is not None and ctx.correspondence.kind is CorrespondenceKind.PLANE:
        return np.array([plane_residual(ctx, x_k)])
    return line_residual(ctx, x_k)


def residual_and_jacobian(ctx: LidarResidualContext, x_k: State) -> tuple[np.ndarray, np.ndarray]:
    corr = ctx.correspondence
    if corr is None:
        raise ValueError("Residual needs a correspondence")
    world, dP = _world_point_and_jacobian(ctx, x_k)
    offset = world - corr.point
    if corr.kind is CorrespondenceKind.PLANE:
        return np.array([corr.normal @ offset]), (corr.normal @ dP).reshape(1, -1)
    n_hat = skew(corr.normal)
    return n_hat @ offset, n_hat @ dP


def residual_jacobian(ctx: LidarResidualContext, x_k: State) -> np.ndarray:
    """3x15 for lines, 1x15 for planes, w.r.t. the error state of x_k"""
    return residual_and_jacobian(ctx, x_k)[1]


class LidarFactor:
    """Whitened LiDAR residual with an optional Huber loss"""

    def __init__(self, ctx: LidarResidualContext, huber: float = 0.0):
        self.ctx = ctx
        self.sigma = ctx.noise_sigma
        # Threshold in whitened units
        self.huber_k = huber / ctx.noise_sigma if huber > 0.0 else 0.0

    @property
    def kind(self) -> CorrespondenceKind:
        return self.ctx.correspondence.kind

    def raw_residual(self, state: State) -> np.ndarray:
        return residual(self.ctx, state)

    def linearize(self, state: State) -> tuple[np.ndarray, np.ndarray]:
        r, J = residual_and_jacobian(self.ctx, state)
        return r / self.sigma, J / self.sigma

    def robust_cost(self, squared: float) -> float:
        k = self.huber_k
        if k <= 0.0 or squared <= k * k:
            return squared
        return 2.0 * k * np.sqrt(squared) - k * k

    def weight(self, whitened: np.ndarray) -> float:
        k = self.huber_k
        norm = float(np.linalg.norm(whitened))
        if k <= 0.0 or norm <= k:
            return 1.0
        return k / norm

    def cost(self, state: State) -> float:
        r = self.raw_residual(state) / self.sigma
        return self.robust_cost(float(r @ r))
