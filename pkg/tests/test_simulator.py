import numpy as np
import pytest

from chaintrack import so3
from chaintrack.chain import ImuPoses
from chaintrack.simulator import (
    GRAVITY,
    EmptySpec,
    InvalidRate,
    NoiseSpec,
    NonUniformSampling,
    TooShort,
    UnknownJoint,
    compute_ground_truth_joint_accel,
    default_manipulator,
    resimulate_from_poses,
    simulate_manipulator,
    simulate_tree,
)


def static_spec():
    spec = default_manipulator()
    for link in spec.links:
        link.amplitude = 0.0
    return spec


def spin_spec(rate=1.5):
    spec = static_spec()
    spec.links[0].rate = rate
    return spec


@pytest.fixture(scope="module")
def noiseless():
    return simulate_manipulator(default_manipulator(), 20.0, 100.0)


def test_static_chain_measures_gravity_only():
    trial = simulate_manipulator(static_spec(), 2.0, 100.0)
    assert np.allclose(np.linalg.norm(trial.accel, axis=-1), 9.81, atol=1e-12)
    assert np.allclose(trial.gyro, 0.0, atol=1e-15)


def test_constant_spin_centripetal_oracle():
    w = 1.5
    trial = simulate_manipulator(spin_spec(w), 5.0, 100.0)
    omega = np.array([0.0, 0.0, w])
    W = so3.cross_matrix(omega)
    for i in range(3):
        r = trial.poses.positions[:, i]
        R = so3.quat_to_matrix_batch(trial.poses.orientations[:, i])
        expected = np.einsum("tji,tj->ti", R, (W @ W @ r.T).T - GRAVITY)
        assert np.allclose(trial.accel[:, i], expected, atol=1e-9)
        # centripetal magnitude w^2 times the distance from the spin axis
        horizontal = np.linalg.norm(np.einsum("tij,tj->ti", R, trial.accel[:, i])[:, :2], axis=1)
        assert np.allclose(horizontal, w**2 * np.linalg.norm(r[:, :2], axis=1), atol=1e-9)


def test_ten_minute_trial_noise_statistics():
    spec = default_manipulator()
    clean = simulate_manipulator(spec, 600.0, 100.0)
    noisy = simulate_manipulator(spec, 600.0, 100.0, NoiseSpec(seed=3))
    assert clean.accel.shape == (60_000, 3, 3)
    g_var = np.var(noisy.gyro - clean.gyro)
    a_var = np.var(noisy.accel - clean.accel)
    assert g_var == pytest.approx(8.25e-5, rel=0.05)
    assert a_var == pytest.approx(0.0075, rel=0.05)


def test_noise_reproducible():
    spec = default_manipulator()
    a = simulate_manipulator(spec, 3.0, 100.0, NoiseSpec(seed=5))
    b = simulate_manipulator(spec, 3.0, 100.0, NoiseSpec(seed=5))
    c = simulate_manipulator(spec, 3.0, 100.0, NoiseSpec(seed=6))
    assert np.array_equal(a.accel, b.accel) and np.array_equal(a.gyro, b.gyro)
    assert not np.array_equal(a.accel, c.accel)


def test_orientation_stream_is_external_imu_truth(noiseless):
    e = noiseless.topology.external_imu
    assert np.array_equal(noiseless.orientation_meas, noiseless.poses.orientations[:, e])


def test_series_share_timestamps(noiseless):
    T = len(noiseless.t)
    for arr in (noiseless.accel, noiseless.gyro, noiseless.orientation_meas,
                noiseless.poses.positions, noiseless.true_omega, noiseless.true_omega_dot):
        assert len(arr) == T


def test_lever_arms_about_26cm(noiseless):
    norms = np.linalg.norm(noiseless.geometry.as_array(), axis=-1)
    assert np.all((norms > 0.24) & (norms < 0.28))


def test_joint_acceleration_rigidity(noiseless):
    for joint in noiseless.topology.joints:
        a, b = compute_ground_truth_joint_accel(noiseless, joint)
        assert np.max(np.abs(a - b)) < 1e-6


def test_joint_acceleration_static_is_gravity_reaction():
    trial = simulate_manipulator(static_spec(), 1.0, 100.0)
    a, b = compute_ground_truth_joint_accel(trial, (0, 1))
    assert np.allclose(a, -GRAVITY) and np.allclose(b, -GRAVITY)


def test_joint_acceleration_noise_zero_mean():
    trial = simulate_manipulator(default_manipulator(), 120.0, 100.0, NoiseSpec(seed=2))
    a, b = compute_ground_truth_joint_accel(trial, (1, 2))
    diff = a - b
    # standard error of the mean of a difference of two noisy samples
    se = np.sqrt(2 * 0.0075 / len(diff))
    assert np.all(np.abs(diff.mean(axis=0)) < 5 * se)


def test_unknown_joint(noiseless):
    with pytest.raises(UnknownJoint):
        compute_ground_truth_joint_accel(noiseless, (0, 2))


def test_heading_rotation_of_ground_truth():
    spec = default_manipulator()
    base = simulate_manipulator(spec, 3.0, 100.0)
    q_h = so3.quat_from_axis_angle([0, 0, 1], 1.1)
    spec.base_orientation = q_h
    turned = simulate_manipulator(spec, 3.0, 100.0)
    assert np.allclose(turned.gyro, base.gyro, atol=1e-12)
    assert np.allclose(turned.accel, base.accel, atol=1e-9)
    expected = so3.quat_multiply_batch(q_h[None], base.orientation_meas)
    dots = np.abs(np.einsum("tk,tk->t", expected, turned.orientation_meas))
    assert np.allclose(dots, 1.0, atol=1e-12)


def test_invalid_inputs():
    with pytest.raises(InvalidRate):
        simulate_manipulator(default_manipulator(), 1.0, 0.0)
    spec = default_manipulator()
    spec.links = []
    with pytest.raises(EmptySpec):
        simulate_manipulator(spec, 1.0, 100.0)
    with pytest.raises(EmptySpec):
        default_manipulator((10.0, 10.0), ((1, 2, 3), (4, 5, 6)))


# ---------------------------------------------------------------- re-simulation


def test_resimulate_constant_pose():
    T = 50
    q = so3.quat_from_axis_angle([1, 1, 0], 0.4)
    poses = ImuPoses(np.arange(T) / 100, np.tile([0.1, 0.2, 0.3], (T, 1, 1)), np.tile(q, (T, 1, 1)))
    trial = resimulate_from_poses(poses)
    assert np.allclose(trial.gyro, 0.0, atol=1e-12)
    expected = so3.quat_to_matrix(q).T @ -GRAVITY
    assert np.allclose(trial.accel, expected, atol=1e-9)


def test_resimulate_matches_analytic_path(noiseless):
    trial = resimulate_from_poses(noiseless.poses, None, noiseless.topology, noiseless.geometry)
    assert np.max(np.abs(trial.gyro - noiseless.gyro)) < 1e-3
    assert np.max(np.abs(trial.accel - noiseless.accel)) < 1e-2


def test_resimulate_circular_translation():
    r, w, T = 0.4, 2.0, 1000
    t = np.arange(T) / 100
    pos = np.stack([r * np.cos(w * t), r * np.sin(w * t), np.zeros(T)], axis=1)[:, None]
    quat = np.tile(so3.IDENTITY_QUAT, (T, 1, 1))
    trial = resimulate_from_poses(ImuPoses(t, pos, quat))
    expected = np.hypot(w * w * r, 9.81)
    assert np.allclose(np.linalg.norm(trial.accel[:, 0], axis=1), expected, rtol=5e-3)


def test_resimulate_noise_and_errors():
    T = 20
    t = np.arange(T) / 100
    poses = ImuPoses(t, np.zeros((T, 2, 3)), np.tile(so3.IDENTITY_QUAT, (T, 2, 1)))
    a = resimulate_from_poses(poses, NoiseSpec(seed=1))
    b = resimulate_from_poses(poses, NoiseSpec(seed=1))
    assert np.array_equal(a.gyro, b.gyro)
    with pytest.raises(TooShort):
        resimulate_from_poses(ImuPoses(t[:4], poses.positions[:4], poses.orientations[:4]))
    jittered = t.copy()
    jittered[5] += 1e-4
    with pytest.raises(NonUniformSampling):
        resimulate_from_poses(ImuPoses(jittered, poses.positions, poses.orientations))


def test_tree_joint_centres_coincide():
    trial = simulate_tree(duration=5.0)
    topo = trial.topology
    assert topo.imu_count == 7 and topo.joint_count == 6
    R = so3.quat_to_matrix_batch(trial.poses.orientations.reshape(-1, 4)).reshape(-1, 7, 3, 3)
    p = trial.poses.positions
    for k, (i, j) in enumerate(topo.joints):
        Ji, Jj = trial.geometry.joint_positions[k]
        ci = p[:, i] + R[:, i] @ Ji
        cj = p[:, j] + R[:, j] @ Jj
        assert np.max(np.abs(ci - cj)) < 1e-12
