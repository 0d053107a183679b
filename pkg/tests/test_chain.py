import numpy as np
import pytest

from chaintrack.chain import (
    BadExternalIndex,
    ChainGeometry,
    ChainTopology,
    CyclicChain,
    DisconnectedChain,
    TooFewImus,
    state_layout,
    validate_topology,
)
from chaintrack.simulator import LOWER_BODY_JOINTS


def test_three_imu_chain_is_valid():
    validate_topology(ChainTopology(3, ((0, 1), (1, 2)), 0))


def test_two_imus_without_joint_rejected():
    with pytest.raises(DisconnectedChain):
        validate_topology(ChainTopology(2, (), 0))


def test_single_imu_rejected():
    with pytest.raises(TooFewImus):
        validate_topology(ChainTopology(1, (), 0))


def test_duplicate_joint_rejected():
    with pytest.raises(CyclicChain):
        validate_topology(ChainTopology(3, ((0, 1), (0, 1)), 0))


def test_cycle_rejected():
    with pytest.raises(CyclicChain):
        validate_topology(ChainTopology(4, ((0, 1), (1, 2), (2, 0)), 0))


def test_self_loop_rejected():
    with pytest.raises(CyclicChain):
        validate_topology(ChainTopology(2, ((1, 1),), 0))


def test_unknown_imu_rejected():
    with pytest.raises(DisconnectedChain):
        validate_topology(ChainTopology(3, ((0, 1), (1, 5)), 0))


def test_bad_external_index():
    with pytest.raises(BadExternalIndex):
        validate_topology(ChainTopology(3, ((0, 1), (1, 2)), 3))


def test_tree_topology_accepted():
    validate_topology(ChainTopology(7, LOWER_BODY_JOINTS, 0))


@pytest.mark.parametrize("n,dim", [(2, 18), (3, 30), (7, 78)])
def test_state_dimension(n, dim):
    assert state_layout(ChainTopology.serial(n)).dim == dim


def test_layout_is_bijection():
    layout = state_layout(ChainTopology(7, LOWER_BODY_JOINTS, 0))
    idx = np.concatenate(
        [layout.orientation_index(), layout.angular_velocity_index(), layout.joint_index()]
    )
    assert sorted(idx.tolist()) == list(range(layout.dim))
    # per IMU: orientation block then rate block
    assert layout.orientation[1] == slice(6, 9)
    assert layout.angular_velocity[1] == slice(9, 12)
    assert layout.joint_position[0] == (slice(42, 45), slice(45, 48))


def test_layout_is_stable():
    topo = ChainTopology.serial(4)
    assert state_layout(topo) == state_layout(topo)


def test_chain_distance():
    assert ChainTopology.serial(4, 0).chain_distance() == [0, 1, 2, 3]
    assert ChainTopology.serial(4, 2).chain_distance() == [2, 1, 0, 1]
    assert ChainTopology(7, LOWER_BODY_JOINTS, 0).chain_distance() == [0, 1, 2, 3, 1, 2, 3]


def test_geometry_array_shape():
    g = ChainGeometry([(np.zeros(3), np.ones(3)), (np.ones(3), np.zeros(3))])
    assert g.as_array().shape == (2, 2, 3)
