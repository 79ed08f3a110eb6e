"""
Per-scan state estimation

Each scan end state x_k is found by minimizing the IMU factor against the
fixed previous state plus one point-to-line or point-to-plane factor per
matched feature point. The solver is Levenberg-Marquardt over the 15-dim
error state; correspondences are refreshed in a few outer passes while the
point undistortion is re-evaluated at every inner iterate.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Protocol, Sequence

import numpy as np
import scipy.linalg

from config import RunConfig
from imu import ImuNoiseParams, ImuSample, gravity_vector
from lidar_factor import LidarFactor, LidarResidualContext, ScanMotion, apriori_undistort, undistorted_point
from map_matching import CorrespondenceKind, GlobalMap, find_line, find_plane
from preintegration import (
    Preintegration,
    PreintegrationCache,
    RelinearizationRequired,
    bias_corrected,
    corrected_terms,
    imu_residual,
    imu_residual_jacobian,
    integrate_backward,
)
from scan import FeatureCloud, FeatureLabel
from state import ERROR_STATE_DIM, State

logger = logging.getLogger(__name__)

# Largest acceptable condition number of the Jacobi-scaled damped system
MAX_CONDITION = 1e12

_MAX_DAMPING = 1e10
_MIN_DAMPING = 1e-12


class DegenerateScanError(RuntimeError):
    """Too few correspondences to constrain the scan"""

    def __init__(self, fallback_state: State, num_correspondences: int, required: int):
        super().__init__(
            f"Only {num_correspondences} correspondences (need {required}); "
            f"falling back to the IMU prediction"
        )
        self.fallback_state = fallback_state
        self.num_correspondences = num_correspondences


class SingularSystemError(RuntimeError):
    """The damped normal equations cannot be solved"""

    def __init__(self, condition: float):
        super().__init__(f"Normal equations are singular (condition number {condition:.3e})")
        self.condition = condition


class Factor(Protocol):
    def linearize(self, state: State) -> tuple[np.ndarray, np.ndarray]:
        """Whitened residual and Jacobian"""

    def weight(self, whitened: np.ndarray) -> float:
        """Robust (IRLS) weight"""

    def cost(self, state: State) -> float:
        """Robustified squared Mahalanobis norm"""


@dataclass
class OptimizationReport:
    """Outcome of one scan's estimation"""
    inner_iterations: int = 0
    outer_iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    num_line_factors: int = 0
    num_plane_factors: int = 0
    lidar_rms: float = 0.0
    one_pass: bool = False
    reintegrations: int = 0

    def as_row(self) -> dict:
        return asdict(self)


class ImuFactor:
    """IMU residual whitened by the Cholesky factor of the preintegration covariance"""

    # Keeps the Cholesky factorization defined for very short windows
    COVARIANCE_FLOOR = 1e-18

    def __init__(self, prev_state: State, preintegration: Preintegration, g_w):
        self.prev_state = prev_state
        self.preintegration = preintegration
        self.g_w = np.asarray(g_w, dtype=float)
        covariance = preintegration.covariance + self.COVARIANCE_FLOOR * np.eye(ERROR_STATE_DIM)
        self._chol = scipy.linalg.cholesky(covariance, lower=True)

    def _whiten(self, values: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self._chol, values, lower=True)

    def residual(self, state: State) -> np.ndarray:
        return imu_residual(state, self.prev_state, self.preintegration, self.g_w)

    def linearize(self, state: State) -> tuple[np.ndarray, np.ndarray]:
        r = self.residual(state)
        J = imu_residual_jacobian(state, self.prev_state, self.preintegration, self.g_w)
        return self._whiten(r), self._whiten(J)

    def weight(self, whitened: np.ndarray) -> float:
        return 1.0

    def cost(self, state: State) -> float:
        r = self._whiten(self.residual(state))
        return float(r @ r)


def total_cost(factors: Sequence[Factor], state: State) -> float:
    return float(sum(f.cost(state) for f in factors))


def predict_state(prev_state: State, cache: PreintegrationCache, g_w) -> State:
    """
    The state at t_k that zeroes the IMU residual against prev_state

    Biases are carried over; the preintegration is bias-corrected to them.
    """
    g_w = np.asarray(g_w, dtype=float)
    alpha, beta, gamma, _ = corrected_terms(cache.full, prev_state.acc_bias, prev_state.gyro_bias)
    dt = cache.full.dt
    q_k = prev_state.q * gamma.conjugate()
    rot = q_k.matrix()
    v_k = prev_state.v - g_w * dt - rot @ beta
    p_k = prev_state.p + v_k * dt + 0.5 * g_w * dt * dt - rot @ alpha
    return State(
        p=p_k,
        v=v_k,
        q=q_k,
        acc_bias=prev_state.acc_bias,
        gyro_bias=prev_state.gyro_bias,
        t=cache.t_end,
    )


def solve_normal_equations(factors: Sequence[Factor], x: State, damping: float) -> np.ndarray:
    """
    Solve (H + λ·diag(H)) δx = −g with H = Σ w JᵀJ, g = Σ w Jᵀr

    Error-state directions no factor observes (zero diagonal) get a zero step.
    """
    if not factors:
        raise ValueError("Normal equations need at least one factor")

    H = np.zeros((ERROR_STATE_DIM, ERROR_STATE_DIM))
    g = np.zeros(ERROR_STATE_DIM)
    for factor in factors:
        r, J = factor.linearize(x)
        w = factor.weight(r)
        H += w * (J.T @ J)
        g += w * (J.T @ r)

    A = H + damping * np.diag(np.diag(H))
    diag = np.diag(A)
    observed = np.flatnonzero(diag > 0.0)
    if observed.size == 0:
        raise SingularSystemError(math.inf)

    scale = 1.0 / np.sqrt(diag[observed])
    scaled = A[np.ix_(observed, observed)] * np.outer(scale, scale)
    condition = float(np.linalg.cond(scaled))
    if not math.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularSystemError(condition)

    try:
        step = scipy.linalg.solve(scaled, -g[observed] * scale, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise SingularSystemError(condition)

    dx = np.zeros(ERROR_STATE_DIM)
    dx[observed] = step * scale
    return dx


@dataclass
class _LmResult:
    state: State
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


def levenberg_marquardt(
    factors: Sequence[Factor],
    x0: State,
    max_iterations: int = 10,
    lambda_init: float = 1e-4,
    min_step: float = 1e-6,
    min_rel_decrease: float = 1e-8,
) -> _LmResult:
    x = x0
    cost = total_cost(factors, x)
    initial_cost = cost
    damping = lambda_init
    converged = False
    iterations = 0

    while iterations < max_iterations:
        iterations += 1
        try:
            dx = solve_normal_equations(factors, x, damping)
        except SingularSystemError as e:
            logger.warning(f"LM stopped: {e}")
            break

        candidate = x.boxplus(dx)
        new_cost = total_cost(factors, candidate)
        logger.debug(
            f"LM iter {iterations}: cost {cost:.6e} -> {new_cost:.6e}, "
            f"|dx| {np.linalg.norm(dx):.3e}, lambda {damping:.1e}"
        )

        small_step = float(np.linalg.norm(dx)) < min_step
        if new_cost <= cost:
            rel_decrease = (cost - new_cost) / cost if cost > 0.0 else 0.0
            x, cost = candidate, new_cost
            damping = max(damping / 10.0, _MIN_DAMPING)
            if small_step or rel_decrease < min_rel_decrease:
                converged = True
                break
        elif small_step:
            # Rejected only by rounding at the optimum
            converged = True
            break
        else:
            damping *= 10.0
            if damping > _MAX_DAMPING:
                logger.debug("LM damping exhausted without a cost decrease")
                break

    return _LmResult(x, iterations, initial_cost, cost, converged)


class ScanEstimator:
    """
    Estimates x_k for one scan against a fixed x_{k-1} and the global map
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.noise = ImuNoiseParams.from_config(config.imu)
        self.g_w = gravity_vector(config.init.gravity)

    def integrate(self, imu_window: Sequence[ImuSample], state: State) -> PreintegrationCache:
        return integrate_backward(
            imu_window,
            (state.acc_bias, state.gyro_bias),
            self.noise,
            max_gap=self.config.imu.max_gap,
        )

    def predict(self, prev_state: State, imu_window: Sequence[ImuSample]) -> State:
        return predict_state(prev_state, self.integrate(imu_window, prev_state), self.g_w)

    def point_contexts(
        self,
        cache: PreintegrationCache,
        motion: ScanMotion,
        features: FeatureCloud,
        x_k: State,
    ) -> list[LidarResidualContext]:
        """One correspondence-free context per feature point, edges first"""
        contexts = []
        for fp in features.points():
            contexts.append(LidarResidualContext(
                terms=apriori_undistort(cache, x_k, self.g_w, fp.t),
                point=np.asarray(fp.p, dtype=float),
                motion=motion,
                noise_sigma=self.config.lidar.sigma,
            ))
        return contexts

    def associate(
        self,
        contexts: list[LidarResidualContext],
        labels: list[FeatureLabel],
        global_map: GlobalMap,
        x_k: State,
    ) -> list[LidarFactor]:
        """LiDAR factors for the points whose query at x_k finds a map primitive"""
        cfg = self.config.map
        factors = []
        rot = x_k.q.matrix()
        for index, (ctx, label) in enumerate(zip(contexts, labels)):
            query = rot @ undistorted_point(ctx, x_k) + x_k.p
            if label is FeatureLabel.EDGE:
                corr = find_line(global_map, query, cfg.neighbors, cfg.max_dist, cfg.line_ratio, index)
            else:
                corr = find_plane(global_map, query, cfg.neighbors, cfg.max_dist, cfg.plane_gate, index)
            if corr is not None:
                factors.append(LidarFactor(replace(ctx, correspondence=corr), self.config.lidar.huber))
        return factors

    def estimate(
        self,
        prev_state: State,
        features: FeatureCloud,
        imu_window: Sequence[ImuSample],
        global_map: GlobalMap,
        initial_guess: Optional[State] = None,
    ) -> tuple[State, OptimizationReport]:
        solver = self.config.solver
        cache = self.integrate(imu_window, prev_state)
        prediction = predict_state(prev_state, cache, self.g_w)
        x = initial_guess if initial_guess is not None else prediction
        x0 = x

        labels = [fp.label for fp in features.points()]
        report = OptimizationReport(one_pass=solver.one_pass)
        frozen: Optional[list[np.ndarray]] = None
        factors: list = []
        lidar_factors: list[LidarFactor] = []

        for outer in range(solver.outer):
            if outer > 0:
                try:
                    bias_corrected(cache.full, (x.acc_bias, x.gyro_bias), self.config.imu.relinearize_threshold)
                except RelinearizationRequired as e:
                    logger.info(f"{e}; re-integrating IMU window")
                    cache = self.integrate(imu_window, x)
                    report.reintegrations += 1

            motion = ScanMotion(prev_state, cache.full, self.g_w)
            contexts = self.point_contexts(cache, motion, features, x)
            if solver.one_pass:
                if frozen is None:
                    frozen = [undistorted_point(ctx, x0) for ctx in contexts]
                contexts = [replace(ctx, frozen_point=u) for ctx, u in zip(contexts, frozen)]

            lidar_factors = self.associate(contexts, labels, global_map, x)
            if len(lidar_factors) < solver.min_correspondences:
                raise DegenerateScanError(prediction, len(lidar_factors), solver.min_correspondences)

            factors = [ImuFactor(prev_state, cache.full, self.g_w), *lidar_factors]
            result = levenberg_marquardt(
                factors,
                x,
                max_iterations=solver.max_inner,
                lambda_init=solver.lambda_init,
                min_step=solver.min_step,
                min_rel_decrease=solver.min_rel_decrease,
            )
            x = result.state
            report.outer_iterations = outer + 1
            report.inner_iterations += result.iterations
            report.initial_cost = result.initial_cost
            report.final_cost = result.final_cost
            report.converged = result.converged

        report.num_line_factors = sum(1 for f in lidar_factors if f.kind is CorrespondenceKind.LINE)
        report.num_plane_factors = len(lidar_factors) - report.num_line_factors
        if lidar_factors:
            squared = [float(np.sum(f.raw_residual(x) ** 2)) for f in lidar_factors]
            report.lidar_rms = math.sqrt(sum(squared) / len(squared))

        logger.debug(
            f"Scan t={x.t:.3f}: {report.inner_iterations} inner / {report.outer_iterations} outer, "
            f"cost {report.initial_cost:.4e} -> {report.final_cost:.4e}"
        )
        return x, report

    def undistort_features(
        self,
        prev_state: State,
        state: State,
        features: FeatureCloud,
        imu_window: Sequence[ImuSample],
        undistort_at: Optional[State] = None,
    ) -> FeatureCloud:
        """
        World-frame copy of the features at `state`

        undistort_at selects the iterate the body-frame undistortion is
        evaluated at (the initial guess in one-pass mode); defaults to state.
        """
        cache = self.integrate(imu_window, prev_state)
        motion = ScanMotion(prev_state, cache.full, self.g_w)
        source = undistort_at if undistort_at is not None else state
        contexts = self.point_contexts(cache, motion, features, source)
        rot = state.q.matrix()
        moved = [
            replace(fp, p=rot @ undistorted_point(ctx, source) + state.p)
            for fp, ctx in zip(features.points(), contexts)
        ]
        n_edges = len(features.edges)
        return FeatureCloud(moved[:n_edges], moved[n_edges:])


def estimate_scan(
    prev_state: State,
    features: FeatureCloud,
    imu_window: Sequence[ImuSample],
    global_map: GlobalMap,
    config: RunConfig,
    initial_guess: Optional[State] = None,
) -> tuple[State, OptimizationReport]:
    return ScanEstimator(config).estimate(prev_state, features, imu_window, global_map, initial_guess)
