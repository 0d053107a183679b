"""Synthetic IMU data for kinematic chains.

Two generation paths are provided:

* :func:`simulate_manipulator` drives a Denavit-Hartenberg chain with
  sinusoidal joint angles and evaluates the IMU kinematics analytically
  through a recursive velocity/acceleration pass.
* :func:`resimulate_from_poses` differentiates an externally supplied pose
  series numerically (e.g. optical motion capture).

The navigation frame has its z axis pointing up, so gravity is
``(0, 0, -9.81)`` and a resting accelerometer reads ``(0, 0, +9.81)``
rotated into the sensor frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .chain import ChainGeometry, ChainTopology, ImuPoses

GRAVITY = np.array([0.0, 0.0, -9.81])


class SimulationError(ValueError):
    pass


class InvalidRate(SimulationError):
    pass


class EmptySpec(SimulationError):
    pass


class NonUniformSampling(SimulationError):
    pass


class TooShort(SimulationError):
    pass


class UnknownJoint(SimulationError):
    pass


@dataclass
class DhLink:
    """One revolute DOF in standard DH convention.

    ``theta(t) = theta_offset + rate * t + amplitude * sin(2 pi frequency t + phase)``
    """

    a: float = 0.0
    alpha: float = 0.0
    d: float = 0.0
    theta_offset: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.2
    phase: float = 0.0
    rate: float = 0.0

    def angles(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = 2.0 * np.pi * self.frequency
        arg = w * t + self.phase
        s, c = np.sin(arg), np.cos(arg)
        return (
            self.theta_offset + self.rate * t + self.amplitude * s,
            self.rate + self.amplitude * w * c,
            -self.amplitude * w * w * s,
        )


@dataclass
class ImuMount:
    """Rigid attachment of an IMU to the DH frame ``frame`` (0 is the base)."""

    frame: int
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: so3.IDENTITY_QUAT.copy())


@dataclass
class ManipulatorSpec:
    """DH chain, IMU mounts and joint centres.

    ``joint_frames[k]`` is the DH frame whose origin is the centre of
    ``topology.joints[k]``.
    """

    links: list[DhLink]
    mounts: list[ImuMount]
    joint_frames: list[int]
    external_imu: int = 0
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_orientation: np.ndarray = field(default_factory=lambda: so3.IDENTITY_QUAT.copy())

    @property
    def topology(self) -> ChainTopology:
        return ChainTopology.serial(len(self.mounts), self.external_imu)

    def validate(self) -> None:
        if not self.links:
            raise EmptySpec("manipulator has no links")
        n = len(self.links)
        for m in self.mounts:
            if not 0 <= m.frame <= n:
                raise EmptySpec(f"mount frame {m.frame} outside 0..{n}")
        if len(self.joint_frames) != len(self.mounts) - 1:
            raise EmptySpec("need one joint frame per joint")
        for link in self.links:
            if link.amplitude != 0.0 and link.frequency <= 0.0:
                raise EmptySpec("sinusoid frequencies must be positive")


@dataclass
class NoiseSpec:
    gyro_variance: float = 8.25e-5
    accel_variance: float = 0.0075
    seed: int = 0


@dataclass
class SimulatedTrial:
    """Measurements plus ground truth, all sampled on the same time grid.

    Arrays are indexed ``[time, imu, axis]``. ``orientation_meas`` holds the
    absolute orientation of ``topology.external_imu``.
    """

    t: np.ndarray
    rate: float
    topology: ChainTopology
    accel: np.ndarray
    gyro: np.ndarray
    orientation_meas: np.ndarray
    poses: ImuPoses
    geometry: ChainGeometry | None = None
    true_omega: np.ndarray | None = None
    true_omega_dot: np.ndarray | None = None
    true_accel_nav: np.ndarray | None = None
    true_specific_force: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    def __len__(self) -> int:
        return len(self.t)


def _spherical_rows(length: float, amplitudes, frequencies, phases=(0.0, 0.0, 0.0)) -> list[DhLink]:
    # three intersecting, mutually orthogonal axes at the nominal pose; the
    # last row carries the segment length along its z axis
    alphas = (np.pi / 2, np.pi / 2, 0.0)
    offsets = (0.0, np.pi / 2, 0.0)
    ds = (0.0, 0.0, length)
    return [
        DhLink(0.0, al, d, off, amp, f, ph)
        for al, d, off, amp, f, ph in zip(alphas, ds, offsets, amplitudes, frequencies, phases)
    ]


DEFAULT_AMPLITUDES_DEG = (8.0, 15.0, 12.0)
DEFAULT_FREQUENCIES_HZ = ((1.5, 2.0, 2.5), (0.9, 1.1, 1.4), (0.8, 1.0, 1.3))


def default_manipulator(
    amplitudes_deg: tuple[float, float, float] = DEFAULT_AMPLITUDES_DEG,
    frequencies_hz: tuple[tuple[float, float, float], ...] = DEFAULT_FREQUENCIES_HZ,
    segment_length: float = 0.5,
) -> ManipulatorSpec:
    """Three-segment arm with spherical joints and IMUs mid-segment.

    ``amplitudes_deg[s]`` and ``frequencies_hz[s]`` drive the three rotational
    DOFs of segment ``s`` (the base pivot first). Every IMU sits about 26 cm
    from each adjacent joint centre and is mounted with an arbitrary fixed
    rotation relative to its segment.

    The defaults keep relative angular rates moderate while giving every
    joint angular accelerations well above the gyro noise amplified by the
    backward difference; the base IMU rotates least.
    """
    if len(amplitudes_deg) != 3 or len(frequencies_hz) != 3:
        raise EmptySpec("need amplitudes and frequencies for three segments")
    links = []
    for amp, freqs in zip(amplitudes_deg, frequencies_hz):
        links += _spherical_rows(segment_length, (np.deg2rad(amp),) * 3, tuple(freqs))
    half = -0.5 * segment_length
    mounts = [
        ImuMount(3, np.array([0.03, 0.04, half]), so3.quat_from_axis_angle([1, 2, 3], 0.7)),
        ImuMount(6, np.array([-0.04, 0.03, half]), so3.quat_from_axis_angle([-2, 1, 0.5], 1.9)),
        ImuMount(9, np.array([0.035, -0.035, half]), so3.quat_from_axis_angle([0.3, -1, 2], 2.6)),
    ]
    return ManipulatorSpec(links=links, mounts=mounts, joint_frames=[3, 6], external_imu=0)


def _frame_kinematics(spec: ManipulatorSpec, t: np.ndarray):
    """World rotation, origin, angular velocity/acceleration and origin
    acceleration of every DH frame, vectorized over time."""
    T = len(t)
    R = np.broadcast_to(so3.quat_to_matrix(spec.base_orientation), (T, 3, 3)).copy()
    p = np.broadcast_to(np.asarray(spec.base_position, float), (T, 3)).copy()
    w = np.zeros((T, 3))
    wd = np.zeros((T, 3))
    a = np.zeros((T, 3))
    frames = [(R, p, w, wd, a)]
    for link in spec.links:
        th, thd, thdd = link.angles(t)
        z = R[:, :, 2]
        w_new = w + thd[:, None] * z
        wd = wd + thdd[:, None] * z + np.cross(w, thd[:, None] * z)
        w = w_new
        c, s = np.cos(th), np.sin(th)
        Rz = np.zeros((T, 3, 3))
        Rz[:, 0, 0] = c
        Rz[:, 0, 1] = -s
        Rz[:, 1, 0] = s
        Rz[:, 1, 1] = c
        Rz[:, 2, 2] = 1.0
        ca, sa = np.cos(link.alpha), np.sin(link.alpha)
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
        Rrot = R @ Rz
        r = Rrot @ np.array([link.a, 0.0, link.d])
        p = p + r
        a = a + np.cross(wd, r) + np.cross(w, np.cross(w, r))
        R = Rrot @ Rx
        frames.append((R, p, w, wd, a))
    return frames


def _add_noise(trial: SimulatedTrial, noise: NoiseSpec) -> None:
    rng = np.random.default_rng(noise.seed)
    shape = trial.gyro.shape
    trial.gyro = trial.gyro + rng.normal(0.0, np.sqrt(noise.gyro_variance), shape)
    trial.accel = trial.accel + rng.normal(0.0, np.sqrt(noise.accel_variance), shape)


def simulate_manipulator(
    spec: ManipulatorSpec,
    duration: float,
    rate: float = 100.0,
    noise: NoiseSpec | None = None,
) -> SimulatedTrial:
    """Forward kinematics of ``spec`` sampled at ``rate`` for ``duration`` seconds."""
    if not rate > 0:
        raise InvalidRate(f"rate must be positive, got {rate}")
    spec.validate()
    n_samples = int(round(duration * rate))
    if n_samples < 1:
        raise InvalidRate("duration shorter than one sample")
    t = np.arange(n_samples) / rate
    frames = _frame_kinematics(spec, t)

    N = len(spec.mounts)
    pos = np.empty((n_samples, N, 3))
    quat = np.empty((n_samples, N, 4))
    omega = np.empty((n_samples, N, 3))
    omega_dot = np.empty((n_samples, N, 3))
    acc_nav = np.empty((n_samples, N, 3))
    f_body = np.empty((n_samples, N, 3))
    for i, m in enumerate(spec.mounts):
        R, p, w, wd, a = frames[m.frame]
        R_imu = R @ so3.quat_to_matrix(m.orientation)
        lever = R @ np.asarray(m.position, float)
        pos[:, i] = p + lever
        acc = a + np.cross(wd, lever) + np.cross(w, np.cross(w, lever))
        acc_nav[:, i] = acc
        R_imu_T = np.swapaxes(R_imu, 1, 2)
        omega[:, i] = np.einsum("tij,tj->ti", R_imu_T, w)
        omega_dot[:, i] = np.einsum("tij,tj->ti", R_imu_T, wd)
        f_body[:, i] = np.einsum("tij,tj->ti", R_imu_T, acc - GRAVITY)
        quat[:, i] = so3.quat_from_matrix_batch(R_imu)

    # keep quaternion series sign-continuous for downstream differencing
    for i in range(N):
        flips = np.einsum("tk,tk->t", quat[1:, i], quat[:-1, i]) < 0
        sign = np.concatenate(([1.0], np.cumprod(np.where(flips, -1.0, 1.0))))
        quat[:, i] *= sign[:, None]

    geometry = manipulator_geometry(spec)
    topo = spec.topology
    trial = SimulatedTrial(
        t=t,
        rate=float(rate),
        topology=topo,
        accel=f_body.copy(),
        gyro=omega.copy(),
        orientation_meas=quat[:, topo.external_imu].copy(),
        poses=ImuPoses(t, pos, quat),
        geometry=geometry,
        true_omega=omega,
        true_omega_dot=omega_dot,
        true_accel_nav=acc_nav,
        true_specific_force=f_body,
    )
    if noise is not None:
        _add_noise(trial, noise)
    return trial


def manipulator_geometry(spec: ManipulatorSpec) -> ChainGeometry:
    """True joint centres in the frames of their adjacent IMUs."""
    frames = _frame_kinematics(spec, np.zeros(1))
    out = []
    for (i, j), f in zip(spec.topology.joints, spec.joint_frames):
        centre = frames[f][1][0]
        pair = []
        for k in (i, j):
            m = spec.mounts[k]
            R, p = frames[m.frame][0][0], frames[m.frame][1][0]
            R_imu = R @ so3.quat_to_matrix(m.orientation)
            pair.append(R_imu.T @ (centre - p - R @ m.position))
        out.append((pair[0], pair[1]))
    return ChainGeometry(out)


def _richardson(diff, T: int) -> np.ndarray:
    """Fourth-order central derivative from two step sizes.

    ``diff(h)`` returns a central difference over ``+-h`` samples whose error
    is even in ``h``. Samples the stencils cannot reach are left as NaN.
    """
    d1 = diff(1)
    out = np.full((T,) + d1.shape[1:], np.nan)
    if T < 5:
        out[1:-1] = d1
        return out
    out[2:-2] = (4.0 * d1[1:-1] - diff(2)) / 3.0
    return out


def _one_sided_weights(points: int, order: int) -> np.ndarray:
    """Weights ``w`` with ``sum_s w[s] f(s) ~ f^(order)(0)`` over offsets ``0..points-1``."""
    s = np.arange(points, dtype=float)
    V = np.vstack([s**m / math.factorial(m) for m in range(points)])
    rhs = np.zeros(points)
    rhs[order] = 1.0
    return np.linalg.solve(V, rhs)


def resimulate_from_poses(
    poses: ImuPoses,
    noise: NoiseSpec | None = None,
    topology: ChainTopology | None = None,
    geometry: ChainGeometry | None = None,
) -> SimulatedTrial:
    """IMU readings from a pose series by finite differences.

    Angular velocity uses the central quaternion difference
    ``2 log(q[t-1]^-1 q[t+1]) / (2 dt)``, linear acceleration the second
    central difference of position; both are Richardson-extrapolated over
    two step sizes. The first and last two samples use one-sided stencils.
    """
    t = np.asarray(poses.t, dtype=float)
    if len(t) < 5:
        raise TooShort(f"need at least 5 samples, got {len(t)}")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if np.any(steps <= 0) or np.max(np.abs(steps - dt)) > 1e-9:
        raise NonUniformSampling("timestamps must be strictly increasing with constant step")
    T, N = poses.positions.shape[:2]
    topo = topology or ChainTopology.serial(N)

    quat = np.array(poses.orientations, dtype=float)
    quat /= np.linalg.norm(quat, axis=-1, keepdims=True)
    for i in range(N):
        flips = np.einsum("tk,tk->t", quat[1:, i], quat[:-1, i]) < 0
        sign = np.concatenate(([1.0], np.cumprod(np.where(flips, -1.0, 1.0))))
        quat[:, i] *= sign[:, None]

    def rate_over(h: int) -> np.ndarray:
        # central quaternion difference over +-h samples, valid for k in [h, T-h)
        dq = so3.quat_multiply_batch(so3.quat_conjugate_batch(quat[: T - 2 * h]), quat[2 * h :])
        return so3.quat_log_batch(dq) / (h * dt)

    def accel_over(h: int) -> np.ndarray:
        return (p[2 * h :] - 2 * p[h : T - h] + p[: T - 2 * h]) / (h * dt) ** 2

    p = np.asarray(poses.positions, dtype=float)
    omega = _richardson(rate_over, T)
    acc = _richardson(accel_over, T)

    # endpoints: one-sided stencils of the same order over the nearest samples
    points = min(T, 7)
    w1 = _one_sided_weights(points - 1, 1) / dt
    w2 = _one_sided_weights(points, 2) / dt**2
    for k in np.flatnonzero(np.isnan(omega[:, 0, 0])):
        step = 1 if k < T // 2 else -1
        idx = k + step * np.arange(points)
        rel = so3.quat_multiply_batch(so3.quat_conjugate_batch(quat[k])[None], quat[idx[: points - 1]])
        phi = 2.0 * so3.quat_log_batch(rel)
        omega[k] = step * np.einsum("s,sni->ni", w1, phi)
        acc[k] = np.einsum("s,sni->ni", w2, p[idx])
    R = so3.quat_to_matrix_batch(quat.reshape(-1, 4)).reshape(T, N, 3, 3)
    f_body = np.einsum("tnji,tnj->tni", R, acc - GRAVITY)

    trial = SimulatedTrial(
        t=t,
        rate=1.0 / dt,
        topology=topo,
        accel=f_body.copy(),
        gyro=omega.copy(),
        orientation_meas=quat[:, topo.external_imu].copy(),
        poses=ImuPoses(t, p, quat),
        geometry=geometry,
        true_omega=omega,
        true_accel_nav=acc,
        true_specific_force=f_body,
    )
    if noise is not None:
        _add_noise(trial, noise)
    return trial


def compute_ground_truth_joint_accel(
    trial: SimulatedTrial, joint: tuple[int, int], use_measured: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Navigation-frame specific force at a joint centre seen from both sides.

    Uses the true angular velocity/acceleration and true joint positions of
    ``trial``; ``use_measured`` selects the (possibly noisy) accelerometer
    samples instead of the noiseless specific force.
    """
    joints = list(trial.topology.joints)
    if tuple(joint) not in joints:
        raise UnknownJoint(f"joint {joint} not in topology")
    if trial.geometry is None or trial.true_omega is None or trial.true_omega_dot is None:
        raise UnknownJoint("trial carries no ground-truth geometry")
    k = joints.index(tuple(joint))
    J = trial.geometry.joint_positions[k]
    f = trial.accel if use_measured else trial.true_specific_force
    quat = trial.poses.orientations
    out = []
    for side, imu in enumerate(joint):
        w = trial.true_omega[:, imu]
        wd = trial.true_omega_dot[:, imu]
        Jb = np.broadcast_to(J[side], w.shape)
        f_joint = f[:, imu] + np.cross(wd, Jb) + np.cross(w, np.cross(w, Jb))
        R = so3.quat_to_matrix_batch(quat[:, imu])
        out.append(np.einsum("tij,tj->ti", R, f_joint))
    return out[0], out[1]


# ---------------------------------------------------------------- lower-body tree

LOWER_BODY_JOINTS = ((0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6))


@dataclass
class TreeSegment:
    """A rigid segment attached to ``parent`` by a three-DOF joint.

    The joint centre sits at ``offset`` in the parent segment frame and is
    the origin of this segment. Joint angles about the parent x, y and z
    axes follow ``amplitude * sin(2 pi frequency t + phase)`` and are
    composed as a rotation vector.
    """

    parent: int
    offset: tuple[float, float, float]
    amplitude: tuple[float, float, float]
    frequency: tuple[float, float, float]
    phase: tuple[float, float, float] = (0.0, 0.0, 0.0)
    imu_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    imu_axis_angle: tuple[tuple[float, float, float], float] = ((0.0, 0.0, 1.0), 0.0)


def _sinusoid(amplitude, frequency, phase, t: np.ndarray) -> np.ndarray:
    a, f, p = (np.asarray(x, dtype=float) for x in (amplitude, frequency, phase))
    return a * np.sin(2.0 * np.pi * f * t[:, None] + p)


def default_lower_body() -> list[TreeSegment]:
    """Pelvis plus two legs of thigh, shank and foot, seven segments in total.

    The pelvis (segment 0, ``parent=-1``) sways about all three axes and
    translates slowly; its ``offset`` is the mean position in the
    navigation frame.
    """
    rad = np.deg2rad
    pelvis = TreeSegment(-1, (0.0, 0.0, 1.0), tuple(rad([6.0, 8.0, 20.0])), (0.35, 0.55, 0.25),
                         imu_position=(-0.08, 0.0, 0.05), imu_axis_angle=((0.2, 1.0, 0.1), 1.4))
    segs = [pelvis]
    for side, sgn in ((0, 1.0), (1, -1.0)):
        base = len(segs)
        ph = 0.0 if side == 0 else np.pi
        segs.append(TreeSegment(0, (0.0, 0.09 * sgn, -0.08), tuple(rad([15.0, 35.0, 10.0])),
                                (0.61 + 0.05 * side, 0.9 + 0.07 * side, 0.43 + 0.04 * side),
                                (ph, ph, 0.0), (0.05, 0.07 * sgn, -0.2),
                                ((1.0, 0.3 * sgn, 0.2), 1.1 + 0.3 * side)))
        segs.append(TreeSegment(base, (0.0, 0.0, -0.42), tuple(rad([8.0, 40.0, 12.0])),
                                (0.73 + 0.06 * side, 1.13 + 0.05 * side, 0.52 + 0.03 * side),
                                (ph, ph + 0.5, 0.0), (0.04, 0.05 * sgn, -0.22),
                                ((0.1, -1.0, 0.4), 0.8 + 0.4 * side)))
        segs.append(TreeSegment(base + 1, (0.0, 0.0, -0.41), tuple(rad([12.0, 25.0, 15.0])),
                                (0.97 + 0.05 * side, 1.31 + 0.06 * side, 0.67 + 0.04 * side),
                                (ph, ph + 1.0, 0.0), (0.09, 0.0, -0.05),
                                ((0.5, 0.5, 1.0), 2.0 + 0.2 * side)))
    return segs


def tree_kinematics(segments: list[TreeSegment], t: np.ndarray):
    """World rotation and origin of every segment, vectorized over time."""
    R_all, p_all = [], []
    for k, seg in enumerate(segments):
        rot = so3.quat_to_matrix_batch(so3.quat_exp_batch(
            0.5 * _sinusoid(seg.amplitude, seg.frequency, seg.phase, t)))
        if seg.parent < 0:
            if k != 0:
                raise EmptySpec("only the first segment may be the root")
            sway = _sinusoid((0.03, 0.02, 0.015), (0.29, 0.47, 0.83), (0.0, 0.0, 0.0), t)
            R_all.append(rot)
            p_all.append(np.asarray(seg.offset, float) + sway)
            continue
        if not 0 <= seg.parent < k:
            raise EmptySpec(f"segment {k}: parent must precede the child")
        Rp, pp = R_all[seg.parent], p_all[seg.parent]
        p_all.append(pp + Rp @ np.asarray(seg.offset, float))
        R_all.append(Rp @ rot)
    return R_all, p_all


def simulate_tree(
    segments: list[TreeSegment] | None = None,
    duration: float = 10.0,
    rate: float = 100.0,
    noise: NoiseSpec | None = None,
    external_imu: int = 0,
) -> SimulatedTrial:
    """IMU data for a segment tree with one IMU per segment.

    Poses come from forward kinematics; readings are re-simulated from the
    pose series. Joints connect each segment to its parent.
    """
    segments = default_lower_body() if segments is None else segments
    if len(segments) < 2:
        raise EmptySpec("need at least two segments")
    if not rate > 0:
        raise InvalidRate(f"rate must be positive, got {rate}")
    n_samples = int(round(duration * rate))
    t = np.arange(n_samples) / rate
    R_seg, p_seg = tree_kinematics(segments, t)
    N = len(segments)
    pos = np.empty((n_samples, N, 3))
    quat = np.empty((n_samples, N, 4))
    mount_R = []
    for i, seg in enumerate(segments):
        axis, angle = seg.imu_axis_angle
        Rm = so3.quat_to_matrix(so3.quat_from_axis_angle(np.asarray(axis, float), angle))
        mount_R.append(Rm)
        pos[:, i] = p_seg[i] + R_seg[i] @ np.asarray(seg.imu_position, float)
        quat[:, i] = so3.quat_from_matrix_batch(R_seg[i] @ Rm)
    joints = tuple((seg.parent, k) for k, seg in enumerate(segments) if seg.parent >= 0)
    topo = ChainTopology(N, joints, external_imu)
    geometry = []
    for i, k in joints:
        # joint centre in the parent segment frame and in the child frame (origin)
        centre_parent = np.asarray(segments[k].offset, float)
        pair = (
            mount_R[i].T @ (centre_parent - np.asarray(segments[i].imu_position, float)),
            mount_R[k].T @ (-np.asarray(segments[k].imu_position, float)),
        )
        geometry.append(pair)
    trial = resimulate_from_poses(ImuPoses(t, pos, quat), noise, topo, ChainGeometry(geometry))
    return trial
