"""Kinematic chain description: IMUs, joints and the state vector layout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TopologyError(ValueError):
    """Base class for invalid chain topologies."""


class TooFewImus(TopologyError):
    pass


class DisconnectedChain(TopologyError):
    pass


class CyclicChain(TopologyError):
    pass


class BadExternalIndex(TopologyError):
    pass


@dataclass(frozen=True)
class ChainTopology:
    """IMUs connected by joints.

    ``joints`` holds index pairs ``(i, j)``; ``external_imu`` is the IMU
    that receives absolute orientation measurements.
    """

    imu_count: int
    joints: tuple[tuple[int, int], ...]
    external_imu: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "joints", tuple((int(i), int(j)) for i, j in self.joints))

    @classmethod
    def serial(cls, imu_count: int, external_imu: int = 0) -> ChainTopology:
        """Serial chain ``0 - 1 - ... - (imu_count - 1)``."""
        return cls(imu_count, tuple((k, k + 1) for k in range(imu_count - 1)), external_imu)

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    def chain_distance(self, source: int | None = None) -> list[int]:
        """Number of joints between ``source`` (default: the external IMU) and every IMU."""
        source = self.external_imu if source is None else source
        adjacency: dict[int, list[int]] = {k: [] for k in range(self.imu_count)}
        for i, j in self.joints:
            adjacency[i].append(j)
            adjacency[j].append(i)
        dist = [-1] * self.imu_count
        dist[source] = 0
        frontier = [source]
        while frontier:
            nxt = []
            for k in frontier:
                for n in adjacency[k]:
                    if dist[n] < 0:
                        dist[n] = dist[k] + 1
                        nxt.append(n)
            frontier = nxt
        return dist


def validate_topology(topo: ChainTopology) -> None:
    """Raise a :class:`TopologyError` subclass naming the violated rule."""
    n = topo.imu_count
    if n < 2:
        raise TooFewImus(f"need at least 2 IMUs, got {n}")
    if not 0 <= topo.external_imu < n:
        raise BadExternalIndex(f"external_imu {topo.external_imu} not in [0, {n})")
    for i, j in topo.joints:
        if not (0 <= i < n and 0 <= j < n):
            raise DisconnectedChain(f"joint ({i}, {j}) references an unknown IMU")
        if i == j:
            raise CyclicChain(f"joint ({i}, {j}) connects an IMU to itself")

    # union-find: a repeated connection closes a cycle
    parent = list(range(n))

    def find(k: int) -> int:
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for i, j in topo.joints:
        ri, rj = find(i), find(j)
        if ri == rj:
            raise CyclicChain(f"joint ({i}, {j}) closes a cycle or duplicates a joint")
        parent[ri] = rj

    if topo.joint_count != n - 1:
        raise DisconnectedChain(
            f"{n} IMUs need {n - 1} joints to form a connected chain, got {topo.joint_count}"
        )


@dataclass(frozen=True)
class StateLayout:
    """Offsets of every block in the stacked state vector.

    Per IMU ``i`` the orientation MRP and angular velocity, then per joint
    the position in the frame of the first and of the second IMU.
    """

    imu_count: int
    joint_count: int
    orientation: tuple[slice, ...]
    angular_velocity: tuple[slice, ...]
    joint_position: tuple[tuple[slice, slice], ...]
    dim: int

    def orientation_index(self) -> np.ndarray:
        return np.concatenate([np.arange(s.start, s.stop) for s in self.orientation])

    def angular_velocity_index(self) -> np.ndarray:
        return np.concatenate([np.arange(s.start, s.stop) for s in self.angular_velocity])

    def joint_index(self) -> np.ndarray:
        if not self.joint_position:
            return np.zeros(0, dtype=int)
        return np.arange(6 * self.imu_count, self.dim)


def state_layout(topo: ChainTopology) -> StateLayout:
    n, m = topo.imu_count, topo.joint_count
    orient = tuple(slice(6 * i, 6 * i + 3) for i in range(n))
    omega = tuple(slice(6 * i + 3, 6 * i + 6) for i in range(n))
    base = 6 * n
    joints = tuple(
        (slice(base + 6 * k, base + 6 * k + 3), slice(base + 6 * k + 3, base + 6 * k + 6))
        for k in range(m)
    )
    return StateLayout(n, m, orient, omega, joints, base + 6 * m)


@dataclass
class ChainGeometry:
    """Ground-truth joint positions: ``joint_positions[k] = (J in frame i, J in frame j)``."""

    joint_positions: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        """``(joint_count, 2, 3)`` array."""
        return np.array([[np.asarray(a), np.asarray(b)] for a, b in self.joint_positions])


@dataclass
class ImuPoses:
    """Pose series for all IMUs.

    ``positions`` is ``(T, N, 3)`` in metres, ``orientations`` is
    ``(T, N, 4)`` scalar-first quaternions (sensor to navigation frame).
    """

    t: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray

    @property
    def imu_count(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return len(self.t)
