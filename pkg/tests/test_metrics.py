import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaintrack import so3
from chaintrack.metrics import (
    BatchReport,
    EmptyInput,
    ErrorSeries,
    SeriesTooShort,
    aggregate_trials,
    batch_mae,
    convergence_time,
    joint_position_error,
    orientation_error,
    relative_orientation,
)

rng = np.random.default_rng(11)


def random_rotation():
    q = rng.normal(size=4)
    return so3.quat_to_matrix(q / np.linalg.norm(q))


def rot(axis, deg):
    return so3.quat_to_matrix(so3.quat_from_axis_angle(axis, np.deg2rad(deg)))


def test_orientation_error_identical_is_zero():
    R = random_rotation()
    assert orientation_error(R, R) == pytest.approx(0.0, abs=1e-7)


def test_orientation_error_ten_degrees():
    R = random_rotation()
    for axis in ([1, 0, 0], [0.3, -2, 1]):
        assert orientation_error(R, rot(axis, 10) @ R) == pytest.approx(np.deg2rad(10), abs=1e-9)
        assert orientation_error(R, R @ rot(axis, 10)) == pytest.approx(np.deg2rad(10), abs=1e-9)


def test_orientation_error_left_invariant():
    for _ in range(50):
        A, B, R = random_rotation(), random_rotation(), random_rotation()
        assert orientation_error(R @ A, R @ B) == pytest.approx(orientation_error(A, B), abs=1e-9)


def test_orientation_error_batch_matches_single():
    A = np.array([random_rotation() for _ in range(5)])
    B = np.array([random_rotation() for _ in range(5)])
    batch = orientation_error(A, B)
    assert np.allclose(batch, [orientation_error(a, b) for a, b in zip(A, B)])
    assert np.all((batch >= 0) & (batch <= np.pi))


def test_relative_orientation_properties():
    A, B, R = random_rotation(), random_rotation(), random_rotation()
    assert np.allclose(relative_orientation(A, A), np.eye(3), atol=1e-12)
    assert np.allclose(relative_orientation(R @ A, R @ B), relative_orientation(A, B), atol=1e-12)
    assert np.allclose(relative_orientation(A, B) @ B.T @ A, np.eye(3), atol=1e-9)


def test_joint_position_error():
    truth = np.array([0.1, 0.2, -0.3])
    assert joint_position_error(truth, truth) == 0.0
    assert joint_position_error(truth + [0.01, 0, 0], truth) == pytest.approx(0.01)


vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec)
def test_position_error_triangle_inequality(a, b, c):
    assert joint_position_error(a, c) <= joint_position_error(a, b) + joint_position_error(b, c) + 1e-12


def series(values, rate=100.0, label="x"):
    t = np.arange(len(values)) / rate
    return ErrorSeries(t, np.asarray(values, float), label)


def test_constant_error_two_batches():
    s = series(np.full(2 * 180 * 10, np.deg2rad(0.5)), rate=10)
    rep = batch_mae(s, 180.0, skip_initial=0.0)
    assert len(rep.batch_mae) == 2
    assert np.allclose(rep.batch_mae, np.deg2rad(0.5))
    assert rep.drift == pytest.approx(0.0, abs=1e-15)
    assert rep.boundaries == [(0.0, 180.0), (180.0, 360.0)]


def test_growing_error_flags_drift():
    rep = batch_mae(series(np.linspace(0, 1, 1000)), 2.0, skip_initial=0.0)
    assert rep.drift > 0 and rep.drifting


def test_ten_minute_series_three_batches():
    s = series(np.ones(60_000))
    rep = batch_mae(s, 200.0, skip_initial=0.0)
    assert len(rep.batch_mae) == 3
    assert rep.batch_samples == [20_000] * 3


def test_batches_partition_evaluated_interval():
    v = rng.random(12_345)
    rep = batch_mae(series(v), 30.0, skip_initial=10.0)
    assert sum(rep.batch_samples) == len(v) - 1000
    weighted = np.dot(rep.batch_mae, rep.batch_samples) / sum(rep.batch_samples)
    assert weighted == pytest.approx(rep.trial_mae, rel=1e-12)
    assert rep.boundaries[0][0] == pytest.approx(10.0)
    for (a, b), (c, d) in zip(rep.boundaries, rep.boundaries[1:]):
        assert b == c


def test_series_too_short():
    with pytest.raises(SeriesTooShort):
        batch_mae(series(np.ones(500)), 10.0, skip_initial=0.0)
    with pytest.raises(SeriesTooShort):
        batch_mae(series(np.ones(500)), 1.0, skip_initial=10.0)


def test_convergence_from_start():
    assert convergence_time(series(np.full(500, 0.001)), 0.02, 2.0) == 0.0


def test_convergence_after_step():
    v = np.where(np.arange(1000) < 400, 0.3, 0.005)
    assert convergence_time(series(v), 0.02, 2.0) == pytest.approx(4.0)


def test_convergence_requires_hold():
    v = np.full(1000, 0.3)
    v[100:150] = 0.001
    v[600:] = 0.001
    assert convergence_time(series(v), 0.02, 2.0) == pytest.approx(6.0)
    assert convergence_time(series(np.full(100, 0.3)), 0.02, 2.0) is None


def report(label, mae, batches=(1.0, 1.0)):
    return BatchReport(label, "orientation", [(0, 1), (1, 2)], list(batches), [1, 1], mae, 0.0)


def test_aggregate_single_trial():
    row = aggregate_trials([report("a", 0.7)])["a"]
    assert row.median == 0.7 and row.std == 0.0 and row.trials == 1


def test_aggregate_three_trials():
    row = aggregate_trials([report("a", m) for m in (1.0, 3.0, 2.0)])["a"]
    assert row.median == 2.0
    assert row.std == pytest.approx(np.std([1.0, 2.0, 3.0]))


def test_aggregate_order_independent():
    reps = [report(lbl, rng.random(), rng.random(2)) for lbl in "abc" for _ in range(5)]
    a = aggregate_trials(reps)
    b = aggregate_trials(list(reversed(reps)))
    assert {k: v.to_dict() for k, v in a.items()} == {k: v.to_dict() for k, v in b.items()}


def test_aggregate_empty():
    with pytest.raises(EmptyInput):
        aggregate_trials([])


def test_batch_report_round_trip():
    rep = batch_mae(series(rng.random(3000)), 10.0, skip_initial=0.0)
    assert BatchReport.from_dict(rep.to_dict()) == rep
