import numpy as np
import pytest

from conftest import high_dynamics_spec, random_samples, random_state, truth_state, yaw_spec
from geometry import RigidTransform, UnitQuaternion, boxminus, slerp
from imu import gravity_vector, slice_window
from lidar_factor import (
    LidarFactor,
    LidarResidualContext,
    ScanMotion,
    UndistortionTerms,
    apriori_undistort,
    corrected_undistort,
    correction,
    interpolation_factor,
    line_residual,
    plane_residual,
    residual,
    residual_jacobian,
    undistorted_point,
    world_point,
)
from map_matching import Correspondence, CorrespondenceKind
from preintegration import Preintegration, integrate_backward
from simulator import (
    TrajectoryKind,
    TrajectorySpec,
    default_world,
    point_to_primitive_distance,
    synthesize_imu,
    synthesize_scan,
)
from state import ERROR_STATE_DIM, State

G_W = gravity_vector()
ZERO_BIAS = (np.zeros(3), np.zeros(3))


def scan_contexts(spec, t_prev, t_k, noise, rate=400.0, points=200, seed=0):
    samples = synthesize_imu(spec, rate=rate)
    cache = integrate_backward(slice_window(samples, t_prev, t_k), ZERO_BIAS, noise)
    x_prev, x_k = truth_state(spec, t_prev), truth_state(spec, t_k)
    synthetic = synthesize_scan(default_world(), spec, t_prev, t_k, points_per_scan=points, seed=seed)
    motion = ScanMotion(x_prev, cache.full, G_W)
    contexts = [
        LidarResidualContext(apriori_undistort(cache, x_k, G_W, t), p, motion)
        for t, p in zip(synthetic.scan.times, synthetic.scan.points)
    ]
    return contexts, x_k, synthetic


def test_interpolation_factor():
    assert interpolation_factor(0.05, 0.0, 0.1) == pytest.approx(0.5)
    assert interpolation_factor(0.1, 0.0, 0.1) == 0.0
    assert interpolation_factor(0.0, 0.0, 0.1) == 1.0
    assert interpolation_factor(-0.5, 0.0, 0.1) == 1.0
    assert interpolation_factor(0.2, 0.0, 0.1) == 0.0
    assert interpolation_factor(0.1, 0.1, 0.1) == 0.0


def test_undistortion_is_exact_for_constant_yaw_motion(noise):
    contexts, x_k, synthetic = scan_contexts(yaw_spec(), 0.4, 0.5, noise)
    for ctx, expected in zip(contexts, synthetic.world_points):
        np.testing.assert_allclose(world_point(ctx, x_k), expected, atol=1e-9)


def test_undistortion_on_high_dynamics_motion(noise):
    spec = high_dynamics_spec()
    contexts, x_k, synthetic = scan_contexts(spec, 0.3, 0.4, noise, rate=8000.0, points=1000)
    world = default_world()
    distances = np.array([
        point_to_primitive_distance(world, label, index, world_point(ctx, x_k))
        for ctx, label, index in zip(contexts, synthetic.scan.labels, synthetic.primitive_index)
    ])
    assert np.mean(distances < 1e-6) >= 0.999


def test_undistortion_without_correction_leaves_motion_blur(noise):
    # Points read straight in the body frame at t_k land far from the surfaces
    spec = high_dynamics_spec()
    contexts, x_k, synthetic = scan_contexts(spec, 0.3, 0.4, noise, points=300)
    raw = x_k.pose.apply(synthetic.scan.points)
    assert np.max(np.linalg.norm(raw - synthetic.world_points, axis=1)) > 0.05


def test_correction_matches_pose_slerp(rng):
    x_k = random_state(rng)
    dx = np.zeros(ERROR_STATE_DIM)
    dx[:3] = rng.normal(0.0, 0.05, 3)
    dx[6:9] = rng.normal(0.0, 1e-3, 3)
    x_prev = x_k.boxplus(dx)
    relative = x_k.pose.inverse() @ x_prev.pose
    for mu in (0.0, 0.25, 0.5, 1.0):
        delta = correction(x_k, x_prev, Preintegration.identity(*ZERO_BIAS), mu, G_W)
        expected = slerp(RigidTransform.identity(), relative, mu)
        np.testing.assert_allclose(delta.translation, expected.translation, atol=1e-12)
        assert np.linalg.norm(boxminus(delta.rotation, expected.rotation)) < 1e-6


def test_correction_vanishes_at_the_true_states(noise):
    spec = yaw_spec()
    samples = synthesize_imu(spec)
    cache = integrate_backward(slice_window(samples, 0.2, 0.3), ZERO_BIAS, noise)
    delta = correction(truth_state(spec, 0.3), truth_state(spec, 0.2), cache.full, 0.7, G_W)
    np.testing.assert_allclose(delta.translation, np.zeros(3), atol=1e-9)
    assert delta.angle < 1e-9


def random_context(rng, noise, kind):
    samples = random_samples(rng, gyro_scale=0.5)
    x_prev = random_state(rng)
    cache = integrate_backward(samples, (x_prev.acc_bias, x_prev.gyro_bias), noise)
    x_k = random_state(rng, t=cache.t_end)
    x_k = State(
        p=x_k.p, v=x_k.v, q=x_k.q,
        acc_bias=x_prev.acc_bias + rng.normal(0.0, 0.02, 3),
        gyro_bias=x_prev.gyro_bias + rng.normal(0.0, 0.005, 3),
        t=x_k.t,
    )
    t_j = rng.uniform(cache.t_start, cache.t_end)
    normal = rng.normal(size=3)
    corr = Correspondence(kind, normal / np.linalg.norm(normal), rng.normal(0.0, 3.0, 3))
    ctx = LidarResidualContext(
        apriori_undistort(cache, x_k, G_W, t_j),
        rng.normal(0.0, 5.0, 3),
        ScanMotion(x_prev, cache.full, G_W),
        correspondence=corr,
    )
    return ctx, x_k


def numeric_jacobian(ctx, x, h=1e-6):
    columns = []
    for i in range(ERROR_STATE_DIM):
        dx = np.zeros(ERROR_STATE_DIM)
        dx[i] = h
        columns.append((residual(ctx, x.boxplus(dx)) - residual(ctx, x.boxplus(-dx))) / (2 * h))
    return np.column_stack(columns)


@pytest.mark.parametrize("kind", [CorrespondenceKind.LINE, CorrespondenceKind.PLANE])
def test_residual_jacobian_matches_finite_differences(kind, noise):
    rng = np.random.default_rng(11)
    for _ in range(100):
        ctx, x_k = random_context(rng, noise, kind)
        analytic = residual_jacobian(ctx, x_k)
        numeric = numeric_jacobian(ctx, x_k)
        assert analytic.shape == (3 if kind is CorrespondenceKind.LINE else 1, ERROR_STATE_DIM)
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1.0)
        assert error < 1e-4


def test_frozen_point_ignores_the_iterate(rng, noise):
    ctx, x_k = random_context(rng, noise, CorrespondenceKind.PLANE)
    frozen = LidarResidualContext(ctx.terms, ctx.point, ctx.motion, ctx.correspondence, frozen_point=np.ones(3))
    moved = x_k.boxplus(np.full(ERROR_STATE_DIM, 0.01))
    np.testing.assert_array_equal(undistorted_point(frozen, moved), np.ones(3))
    J = residual_jacobian(frozen, x_k)
    # Only the world pose of x_k moves a frozen point
    np.testing.assert_array_equal(J[:, 3:6], np.zeros((1, 3)))
    np.testing.assert_array_equal(J[:, 9:], np.zeros((1, 6)))


def test_residual_needs_a_correspondence(rng, noise):
    ctx, x_k = random_context(rng, noise, CorrespondenceKind.LINE)
    bare = LidarResidualContext(ctx.terms, ctx.point, ctx.motion)
    with pytest.raises(ValueError):
        residual_jacobian(bare, x_k)
    with pytest.raises(ValueError, match="positive"):
        LidarResidualContext(ctx.terms, ctx.point, ctx.motion, noise_sigma=0.0)


def test_huber_weight_and_cost(rng, noise):
    ctx, x_k = random_context(rng, noise, CorrespondenceKind.PLANE)
    factor = LidarFactor(ctx, huber=0.1)
    assert factor.huber_k == pytest.approx(0.1 / ctx.noise_sigma)
    k = factor.huber_k
    assert factor.weight(np.array([0.5 * k])) == 1.0
    assert factor.weight(np.array([4.0 * k])) == pytest.approx(0.25)
    assert factor.robust_cost(0.25 * k * k) == pytest.approx(0.25 * k * k)
    assert factor.robust_cost(16.0 * k * k) == pytest.approx(7.0 * k * k)
    # Continuous at the threshold
    assert factor.robust_cost(k * k) == pytest.approx(k * k)

    plain = LidarFactor(ctx)
    r = residual(ctx, x_k) / ctx.noise_sigma
    assert plain.cost(x_k) == pytest.approx(float(r @ r))


def test_apriori_undistort_at_the_scan_end_is_identity(rng, noise):
    cache = integrate_backward(random_samples(rng), ZERO_BIAS, noise)
    x_k = State(v=rng.normal(size=3), q=random_state(rng).q, t=cache.t_end)
    terms = apriori_undistort(cache, x_k, G_W, cache.t_end)
    np.testing.assert_allclose(terms.p_bar, np.zeros(3), atol=1e-12)
    assert terms.q_bar.angle < 1e-12
    assert terms.mu == 0.0


def test_apriori_undistort_at_rest_is_zero(noise):
    spec = TrajectorySpec(TrajectoryKind.REST, duration=1.0)
    cache = integrate_backward(slice_window(synthesize_imu(spec), 0.4, 0.5), ZERO_BIAS, noise)
    for t_j in (0.4, 0.4125, 0.45):
        terms = apriori_undistort(cache, truth_state(spec, 0.5), G_W, t_j)
        np.testing.assert_allclose(terms.p_bar, np.zeros(3), atol=1e-9)


def test_apriori_undistort_at_constant_velocity(noise):
    spec = yaw_spec(yaw_rate=0.0)
    cache = integrate_backward(slice_window(synthesize_imu(spec), 0.4, 0.5), ZERO_BIAS, noise)
    terms = apriori_undistort(cache, truth_state(spec, 0.5), G_W, 0.45)
    np.testing.assert_allclose(terms.p_bar, [-0.05, 0.0, 0.0], atol=1e-9)
    assert terms.mu == pytest.approx(0.5)


def test_apriori_undistort_follows_the_velocity_iterate(rng, noise):
    cache = integrate_backward(random_samples(rng), ZERO_BIAS, noise)
    x_k = State(v=rng.normal(size=3), q=random_state(rng).q, t=cache.t_end)
    t_j = cache.t_start + 0.3 * (cache.t_end - cache.t_start)
    dv = np.array([0.5, -0.2, 0.1])
    faster = State(v=x_k.v + dv, q=x_k.q, t=x_k.t)
    before = apriori_undistort(cache, x_k, G_W, t_j)
    after = apriori_undistort(cache, faster, G_W, t_j)
    dt = cache.t_end - t_j
    np.testing.assert_allclose(after.p_bar - before.p_bar, -x_k.q.matrix().T @ dv * dt, atol=1e-12)
    assert np.linalg.norm(after.p_bar - before.p_bar) > 0.01


def test_corrected_undistort_with_identity_correction(rng):
    q_bar = RigidTransform.from_rotation_vector(rng.normal(0.0, 0.3, 3)).rotation
    terms = UndistortionTerms(rng.normal(size=3), q_bar, 0.5, Preintegration.identity(*ZERO_BIAS))
    p_check, q_check = corrected_undistort(terms, RigidTransform.identity())
    np.testing.assert_allclose(p_check, terms.p_bar, atol=1e-15)
    assert np.linalg.norm(boxminus(q_check, q_bar)) < 1e-12


def test_corrected_undistort_with_pure_translation():
    terms = UndistortionTerms(np.zeros(3), UnitQuaternion.identity(), 1.0, Preintegration.identity(*ZERO_BIAS))
    t = np.array([0.1, -0.2, 0.3])
    p_check, q_check = corrected_undistort(terms, RigidTransform(UnitQuaternion.identity(), t))
    np.testing.assert_allclose(p_check, t, atol=1e-15)
    assert q_check.angle < 1e-12


def test_corrected_undistort_composes_the_correction_on_the_left(rng):
    for _ in range(20):
        a_priori = RigidTransform.from_rotation_vector(rng.normal(0.0, 0.5, 3), rng.normal(size=3))
        delta = RigidTransform.from_rotation_vector(rng.normal(0.0, 0.05, 3), rng.normal(0.0, 0.1, 3))
        terms = UndistortionTerms(a_priori.translation, a_priori.rotation, 0.5, Preintegration.identity(*ZERO_BIAS))
        p_check, q_check = corrected_undistort(terms, delta)
        expected = delta @ a_priori
        np.testing.assert_allclose(p_check, expected.translation, atol=1e-12)
        assert np.linalg.norm(boxminus(q_check, expected.rotation)) < 1e-12


def identity_context(point, corr):
    """Zero-length window at the origin: the undistorted point is the point itself"""
    pre = Preintegration.identity(*ZERO_BIAS)
    terms = UndistortionTerms(np.zeros(3), UnitQuaternion.identity(), 0.0, pre)
    return LidarResidualContext(terms, np.asarray(point, dtype=float), ScanMotion(State(), pre, G_W), corr)


def test_line_residual_example():
    corr = Correspondence(CorrespondenceKind.LINE, np.array([0.0, 0.0, 1.0]), np.zeros(3))
    ctx = identity_context([1.0, 0.0, 0.0], corr)
    np.testing.assert_allclose(line_residual(ctx, State()), [0.0, 1.0, 0.0], atol=1e-15)
    on_line = identity_context([0.0, 0.0, 2.5], corr)
    np.testing.assert_allclose(line_residual(on_line, State()), np.zeros(3), atol=1e-15)


def test_plane_residual_example():
    corr = Correspondence(CorrespondenceKind.PLANE, np.array([0.0, 0.0, 1.0]), np.zeros(3))
    assert plane_residual(identity_context([3.0, 4.0, 0.2], corr), State()) == pytest.approx(0.2, abs=1e-15)
    assert plane_residual(identity_context([3.0, 4.0, 0.0], corr), State()) == 0.0


def test_residuals_match_the_distance_formulas(noise):
    rng = np.random.default_rng(23)
    for _ in range(100):
        ctx, x_k = random_context(rng, noise, CorrespondenceKind.LINE)
        corr = ctx.correspondence
        offset = world_point(ctx, x_k) - corr.point
        distance = np.linalg.norm(np.cross(offset, corr.normal)) / np.linalg.norm(corr.normal)
        assert abs(np.linalg.norm(line_residual(ctx, x_k)) - distance) < 1e-12

        ctx, x_k = random_context(rng, noise, CorrespondenceKind.PLANE)
        corr = ctx.correspondence
        signed = corr.normal @ (world_point(ctx, x_k) - corr.point) / np.linalg.norm(corr.normal)
        assert abs(plane_residual(ctx, x_k) - signed) < 1e-12


def test_residuals_do_not_depend_on_where_the_primitive_is_anchored(noise):
    rng = np.random.default_rng(29)
    for _ in range(20):
        ctx, x_k = random_context(rng, noise, CorrespondenceKind.LINE)
        corr = ctx.correspondence
        slid = Correspondence(corr.kind, corr.normal, corr.point + rng.normal() * corr.normal)
        moved = LidarResidualContext(ctx.terms, ctx.point, ctx.motion, slid)
        np.testing.assert_allclose(line_residual(moved, x_k), line_residual(ctx, x_k), atol=1e-12)

        ctx, x_k = random_context(rng, noise, CorrespondenceKind.PLANE)
        corr = ctx.correspondence
        slid = Correspondence(corr.kind, corr.normal, corr.point + np.cross(corr.normal, rng.normal(size=3)))
        moved = LidarResidualContext(ctx.terms, ctx.point, ctx.motion, slid)
        assert plane_residual(moved, x_k) == pytest.approx(plane_residual(ctx, x_k), abs=1e-12)


def test_undistorted_point_applies_the_corrected_pose(rng, noise):
    ctx, x_k = random_context(rng, noise, CorrespondenceKind.PLANE)
    # ctx.terms were built at x_k
    delta = correction(x_k, ctx.prev_state, ctx.motion.full, ctx.terms.mu, G_W)
    p_check, q_check = corrected_undistort(ctx.terms, delta)
    np.testing.assert_allclose(undistorted_point(ctx, x_k), q_check.rotate(ctx.point) + p_check, atol=1e-12)
