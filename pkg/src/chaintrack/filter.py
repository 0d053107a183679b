"""Recursive MAP filter for IMU orientations, angular rates and joint positions.

Each timestep runs an EKF-style time update followed by a Gauss-Newton
solve of the per-step maximum a-posteriori problem

    min_X  1/2 |X_pred - X|^2_{P_pred^-1}  +  1/2 sum |v|^2_{Sigma^-1}

over gyroscope residuals, joint-acceleration coincidence residuals and one
absolute orientation residual.

Orientation uncertainty is carried as the covariance of a local MRP
perturbation ``delta`` with ``q = q_mean * q(delta)``; angular rates and
joint positions are perturbed additively. The posterior covariance is the
inverse Gauss-Newton Hessian at the optimum.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels as _k
from . import so3
from .chain import ChainTopology, StateLayout, state_layout, validate_topology


class FilterError(RuntimeError):
    """Numerical failure inside the filter; ``step`` is the timestep index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SingularNormalEquations(FilterError):
    pass


class NonPositiveDt(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class NoiseConfig:
    """Isotropic variances (each multiplies a 3x3 identity)."""

    p0_orientation: float = 1e-6
    p0_omega: float = 1e-1
    p0_joint: float = 1e-4
    q_omega: float = 1e-8
    sigma_omega: float = 1e-3
    sigma_accel: float = 1e-1
    sigma_orientation: float = 1e-3

    def validate(self) -> None:
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        for name in ("sigma_omega", "sigma_accel", "sigma_orientation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolverConfig:
    max_iterations: int = 10
    step_tolerance: float = 1e-8
    jacobian: Literal["analytic", "numeric"] = "analytic"
    fd_step: float = 1e-7
    regularization: float = 1e-12

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.step_tolerance > 0 and self.fd_step > 0):
            raise ValueError("tolerances must be positive")
        if self.jacobian not in ("analytic", "numeric"):
            raise ValueError(f"unknown jacobian mode {self.jacobian!r}")


@dataclass
class MeasurementFrame:
    """Synchronized samples of one timestep.

    ``accel`` and ``gyro`` are ``(N, 3)``; ``orientation`` is the absolute
    orientation quaternion of the external IMU.
    """

    accel: np.ndarray
    gyro: np.ndarray
    orientation: np.ndarray


@dataclass
class FilterState:
    """Posterior (or predicted) mean and covariance.

    ``chi`` holds one MRP per IMU, ``omega`` the body-frame angular rates
    and ``joints[k] = (J in frame i, J in frame j)`` for joint ``k``.
    """

    chi: np.ndarray
    omega: np.ndarray
    joints: np.ndarray
    P: np.ndarray
    t: int = 0

    @property
    def quat(self) -> np.ndarray:
        return np.array([so3.quat_from_mrp(c) for c in self.chi])

    def copy(self) -> FilterState:
        return FilterState(
            self.chi.copy(), self.omega.copy(), self.joints.copy(), self.P.copy(), self.t
        )

    def vector(self) -> np.ndarray:
        """Stacked state in :func:`~chaintrack.chain.state_layout` order."""
        per_imu = np.concatenate([self.chi, self.omega], axis=1).ravel()
        return np.concatenate([per_imu, self.joints.ravel()])


def init_state(
    topo: ChainTopology,
    noise: NoiseConfig | None = None,
    init_orientations: np.ndarray | None = None,
    joint_init: np.ndarray | int | None = None,
    joint_range: float = 0.3,
) -> FilterState:
    """Initial state with Table-style block-diagonal covariance.

    ``init_orientations`` are MRPs ``(N, 3)`` (identity if omitted).
    ``joint_init`` is either explicit ``(M, 2, 3)`` positions or an integer
    seed for uniform draws in ``[-joint_range, joint_range]``.
    """
    validate_topology(topo)
    noise = noise or NoiseConfig()
    layout = state_layout(topo)
    n, m = topo.imu_count, topo.joint_count

    if init_orientations is None:
        chi = np.zeros((n, 3))
    else:
        chi = np.array(init_orientations, dtype=float)
        if chi.shape != (n, 3):
            raise DimensionMismatch(f"expected orientations of shape {(n, 3)}, got {chi.shape}")
        chi = np.array([so3.mrp_shadow(c) for c in chi])

    if joint_init is None or isinstance(joint_init, (int, np.integer)):
        rng = np.random.default_rng(joint_init)
        joints = rng.uniform(-joint_range, joint_range, size=(m, 2, 3))
    else:
        joints = np.array(joint_init, dtype=float)
        if joints.shape != (m, 2, 3):
            raise DimensionMismatch(f"expected joints of shape {(m, 2, 3)}, got {joints.shape}")

    diag = np.empty(layout.dim)
    diag[layout.orientation_index()] = noise.p0_orientation
    diag[layout.angular_velocity_index()] = noise.p0_omega
    diag[layout.joint_index()] = noise.p0_joint
    return FilterState(chi, np.zeros((n, 3)), joints, np.diag(diag), 0)


def compute_angular_accel(gyro: np.ndarray, omega_prev: np.ndarray, dt: float) -> np.ndarray:
    """Backward difference between the current gyro sample and the previous
    filtered angular rate."""
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    return (np.asarray(gyro) - np.asarray(omega_prev)) / dt


def _mrp_to_quat_batch(chi: np.ndarray) -> np.ndarray:
    n2 = np.einsum("ij,ij->i", chi, chi)[:, None]
    return np.concatenate([(1.0 - n2), 2.0 * chi], axis=1) / (1.0 + n2)


class ChainFilter:
    """Step functions bound to one topology and configuration.

    The heavy lifting happens in compiled kernels; this class converts
    between :class:`FilterState` objects and the flat arrays they use.
    """

    def __init__(
        self,
        topo: ChainTopology,
        noise: NoiseConfig | None = None,
        solver: SolverConfig | None = None,
    ):
        validate_topology(topo)
        self.topo = topo
        self.noise = noise or NoiseConfig()
        self.solver = solver or SolverConfig()
        self.noise.validate()
        self.solver.validate()
        self.layout: StateLayout = state_layout(topo)
        self.n, self.m = topo.imu_count, topo.joint_count
        self.dim = self.layout.dim
        self.n_rows = 3 * self.n + 3 * self.m + 3
        self._ji = np.array([i for i, _ in topo.joints], dtype=np.int64)
        self._jj = np.array([j for _, j in topo.joints], dtype=np.int64)
        self._e = topo.external_imu
        self._weights = (
            1.0 / np.sqrt(self.noise.sigma_omega),
            1.0 / np.sqrt(self.noise.sigma_accel),
            1.0 / np.sqrt(self.noise.sigma_orientation),
        )

    def _check(self, state: FilterState) -> None:
        if state.chi.shape != (self.n, 3) or state.joints.shape != (self.m, 2, 3):
            raise DimensionMismatch("state does not match the filter topology")

    def _frame_args(self, frame: MeasurementFrame, omega_dot: np.ndarray):
        accel = np.ascontiguousarray(frame.accel, dtype=float)
        gyro = np.ascontiguousarray(frame.gyro, dtype=float)
        if accel.shape != (self.n, 3) or gyro.shape != (self.n, 3):
            raise DimensionMismatch(f"expected ({self.n}, 3) accel and gyro samples")
        q = np.asarray(frame.orientation, dtype=float)
        omega_dot = np.ascontiguousarray(omega_dot, dtype=float).reshape(self.n, 3)
        return accel, gyro, q / np.linalg.norm(q), omega_dot

    # ------------------------------------------------------------------ time update

    def predict(self, state: FilterState, dt: float) -> FilterState:
        """Constant-rate orientation propagation; process noise on rates only."""
        if not dt > 0:
            raise NonPositiveDt(f"dt must be positive, got {dt}")
        chi, P = _k.predict(state.chi, state.omega, state.P, float(dt), self.noise.q_omega)
        return FilterState(chi, state.omega.copy(), state.joints.copy(), P, state.t + 1)

    # ------------------------------------------------------------ measurement model

    def residuals(
        self,
        chi: np.ndarray,
        omega: np.ndarray,
        joints: np.ndarray,
        frame: MeasurementFrame,
        omega_dot: np.ndarray,
    ) -> np.ndarray:
        """Whitened residual stack ``[gyro; joint; orientation]``."""
        accel, gyro, q, omega_dot = self._frame_args(frame, omega_dot)
        return _k.evaluate(
            chi, omega, joints, accel, gyro, q, omega_dot,
            self._ji, self._jj, self._e, *self._weights, False,
        )[0]

    def residuals_and_jacobian(
        self, state: FilterState, frame: MeasurementFrame, omega_dot: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Whitened residuals and their Jacobian with respect to the local
        state perturbation (right-multiplicative MRP for orientations)."""
        self._check(state)
        if self.solver.jacobian == "numeric":
            r = self.residuals(state.chi, state.omega, state.joints, frame, omega_dot)
            return r, self.numeric_jacobian(state, frame, omega_dot)
        accel, gyro, q, omega_dot = self._frame_args(frame, omega_dot)
        return _k.evaluate(
            state.chi, state.omega, state.joints, accel, gyro, q, omega_dot,
            self._ji, self._jj, self._e, *self._weights, True,
        )

    def numeric_jacobian(
        self, state: FilterState, frame: MeasurementFrame, omega_dot: np.ndarray
    ) -> np.ndarray:
        """Central finite differences of :meth:`residuals` over the local perturbation."""
        h = self.solver.fd_step
        Jac = np.empty((self.n_rows, self.dim))
        for k in range(self.dim):
            cols = []
            for sign in (1.0, -1.0):
                d = np.zeros(self.dim)
                d[k] = sign * h
                chi, omega, joints = self.retract(state, d)
                cols.append(self.residuals(chi, omega, joints, frame, omega_dot))
            Jac[:, k] = (cols[0] - cols[1]) / (2 * h)
        return Jac

    def retract(self, state: FilterState, delta: np.ndarray):
        """Apply a local perturbation ``delta`` to the mean of ``state``."""
        return _k.retract(state.chi, state.omega, state.joints, np.asarray(delta, dtype=float))

    def local_difference(self, state: FilterState, reference: FilterState):
        """Local coordinates of ``state`` around ``reference`` and the
        Jacobian of that map with respect to a perturbation of ``state``."""
        return _k.local_difference(
            state.chi, state.omega, state.joints, reference.chi, reference.omega, reference.joints
        )

    # ------------------------------------------------------------ measurement update

    def map_update(
        self, predicted: FilterState, frame: MeasurementFrame, omega_dot: np.ndarray
    ) -> tuple[FilterState, dict]:
        """Gauss-Newton solve of the per-step MAP problem.

        Returns the posterior and a small info dict (iterations, converged,
        cost). Hitting the iteration cap returns the last iterate with
        ``converged=False``.
        """
        self._check(predicted)
        solver = self.solver
        if solver.jacobian == "numeric":
            return self._map_update_numeric(predicted, frame, omega_dot)
        info_prior = _k.spd_inverse(predicted.P, solver.regularization)
        if info_prior.shape[0] == 0:
            raise SingularNormalEquations("predicted covariance is not positive definite")
        accel, gyro, q, omega_dot = self._frame_args(frame, omega_dot)
        chi, omega, joints, H, iterations, status = _k.gauss_newton(
            predicted.chi, predicted.omega, predicted.joints, info_prior,
            accel, gyro, q, omega_dot, self._ji, self._jj, self._e, *self._weights,
            solver.max_iterations, solver.step_tolerance, solver.regularization,
        )
        if status < 0:
            raise SingularNormalEquations("normal equations are singular")
        return self._finish(predicted, chi, omega, joints, H, info_prior, frame, omega_dot,
                            iterations, status == 1)

    def _map_update_numeric(self, predicted, frame, omega_dot):
        solver = self.solver
        info_prior = _k.spd_inverse(predicted.P, solver.regularization)
        if info_prior.shape[0] == 0:
            raise SingularNormalEquations("predicted covariance is not positive definite")
        current = predicted.copy()
        converged = False
        iterations = 0
        for iterations in range(1, solver.max_iterations + 1):
            g, H = self.objective_gradient(current, predicted, frame, omega_dot, info_prior)
            L = _k.cholesky(H + solver.regularization * np.eye(self.dim))
            if L.shape[0] == 0:
                raise SingularNormalEquations("normal equations are singular")
            step = -_k.cholesky_solve(L, g)
            chi, omega, joints = self.retract(current, step)
            current = FilterState(chi, omega, joints, current.P, current.t)
            if np.linalg.norm(step) < solver.step_tolerance:
                converged = True
                break
        _, H = self.objective_gradient(current, predicted, frame, omega_dot, info_prior)
        return self._finish(predicted, current.chi, current.omega, current.joints, H,
                            info_prior, frame, omega_dot, iterations, converged)

    def _finish(self, predicted, chi, omega, joints, H, info_prior, frame, omega_dot,
                iterations, converged):
        P = _k.spd_inverse(H, self.solver.regularization)
        if P.shape[0] == 0:
            raise SingularNormalEquations("posterior information is not positive definite")
        post = FilterState(chi, omega, joints, P, predicted.t)
        r = self.residuals(chi, omega, joints, frame, omega_dot)
        d, _ = self.local_difference(post, predicted)
        cost = 0.5 * d @ info_prior @ d + 0.5 * r @ r
        return post, {"iterations": int(iterations), "converged": bool(converged),
                      "cost": float(cost)}

    def objective_gradient(
        self,
        state: FilterState,
        predicted: FilterState,
        frame: MeasurementFrame,
        omega_dot: np.ndarray,
        info_prior: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and Gauss-Newton Hessian of the MAP objective at ``state``
        with respect to its local perturbation."""
        if info_prior is None:
            info_prior = _k.spd_inverse(predicted.P, self.solver.regularization)
        r, Jac = self.residuals_and_jacobian(state, frame, omega_dot)
        d, M = self.local_difference(state, predicted)
        IM = info_prior @ M
        return Jac.T @ r + IM.T @ d, Jac.T @ Jac + M.T @ IM

    def step(self, state: FilterState, frame: MeasurementFrame, dt: float):
        omega_dot = compute_angular_accel(frame.gyro, state.omega, dt)
        predicted = self.predict(state, dt)
        return self.map_update(predicted, frame, omega_dot)


# ---------------------------------------------------------------- module-level API


def predict(state: FilterState, dt: float, noise: NoiseConfig, topo: ChainTopology) -> FilterState:
    return ChainFilter(topo, noise).predict(state, dt)


def residuals_and_jacobian(
    state: FilterState,
    frame: MeasurementFrame,
    omega_dot: np.ndarray,
    noise: NoiseConfig,
    topo: ChainTopology,
    solver: SolverConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    return ChainFilter(topo, noise, solver).residuals_and_jacobian(state, frame, omega_dot)


def map_update(
    predicted: FilterState,
    frame: MeasurementFrame,
    omega_dot: np.ndarray,
    noise: NoiseConfig,
    solver: SolverConfig,
    topo: ChainTopology,
) -> FilterState:
    return ChainFilter(topo, noise, solver).map_update(predicted, frame, omega_dot)[0]


@dataclass
class FilterResult:
    """Posterior trajectory; arrays are indexed by timestep first."""

    t: np.ndarray
    quat: np.ndarray
    omega: np.ndarray
    joints: np.ndarray
    step_seconds: np.ndarray
    iterations: np.ndarray
    not_converged: int = 0
    final_state: FilterState | None = None
    covariance_diag: np.ndarray | None = None
    min_eigenvalue: list[float] = field(default_factory=list)


def run_filter(
    accel: np.ndarray,
    gyro: np.ndarray,
    orientation: np.ndarray,
    dt: float,
    topo: ChainTopology,
    noise: NoiseConfig | None = None,
    solver: SolverConfig | None = None,
    init: FilterState | None = None,
    t: np.ndarray | None = None,
    keep_covariance: bool = False,
) -> FilterResult:
    """Filter a measurement stream ``accel/gyro (T, N, 3)``, ``orientation (T, 4)``.

    The first step uses a zero angular acceleration since no previous
    filtered rate exists yet.
    """
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    kf = ChainFilter(topo, noise, solver)
    state = init.copy() if init is not None else init_state(topo, kf.noise)
    T = len(gyro)
    n, m = topo.imu_count, topo.joint_count
    quat = np.empty((T, n, 4))
    omega = np.empty((T, n, 3))
    joints = np.empty((T, m, 2, 3))
    seconds = np.empty(T)
    iters = np.empty(T, dtype=int)
    cov = np.empty((T, kf.dim)) if keep_covariance else None
    not_converged = 0
    for k in range(T):
        tic = time.perf_counter()
        frame = MeasurementFrame(accel[k], gyro[k], orientation[k])
        if k == 0:
            omega_dot = np.zeros((n, 3))
        else:
            omega_dot = compute_angular_accel(frame.gyro, state.omega, dt)
        try:
            predicted = kf.predict(state, dt)
            state, info = kf.map_update(predicted, frame, omega_dot)
        except FilterError as exc:
            raise type(exc)(exc.args[0], k) from exc
        seconds[k] = time.perf_counter() - tic
        iters[k] = info["iterations"]
        not_converged += not info["converged"]
        quat[k] = _mrp_to_quat_batch(state.chi)
        omega[k] = state.omega
        joints[k] = state.joints
        if cov is not None:
            cov[k] = np.diag(state.P)
    times = np.arange(T) * dt if t is None else np.asarray(t)
    return FilterResult(
        times, quat, omega, joints, seconds, iters, not_converged, state, cov
    )
