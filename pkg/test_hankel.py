import numpy as np
import pytest

from dd_hankel import (
    ExcitationError, ExtendedState, build_hankel, excitation_rank, extended_state,
    extended_trajectory, make_archive, pe_order_check, span_residual,
    window_to_trajectory,
)
from dd_plant import Trajectory, simulate


def test_scalar_hankel_layout():
    H = build_hankel([1, 2, 3, 4, 5], 2)
    np.testing.assert_array_equal(H.entries, [[1, 2, 3, 4], [2, 3, 4, 5]])
    assert H.shape == (2, 4)


def test_impulse_hankel_and_zero_samples():
    H = build_hankel([1, 0, 0, 0], 3)
    np.testing.assert_array_equal(H.entries, [[1, 0], [0, 0], [0, 0]])
    assert not build_hankel(np.zeros(6), 3).entries.any()


def test_vector_samples_stack_by_time():
    X = np.arange(8).reshape(4, 2)
    H = build_hankel(X, 2).entries
    np.testing.assert_array_equal(H[:, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(H[:, 2], [4, 5, 6, 7])


def test_hankel_needs_enough_samples():
    with pytest.raises(ValueError, match="at least L"):
        build_hankel([1.0, 2.0], 3)


def test_persistent_excitation_examples():
    assert not pe_order_check(np.full(10, 0.3), 2)
    assert excitation_rank([1, 0, 0, 0], 2) == (1, False)
    rng = np.random.default_rng(7)
    assert pe_order_check(rng.uniform(-0.5, 0.5, 200), 10)


def test_archive_shape_and_order(archive):
    assert archive.L == 8
    assert archive.stacked.shape == (16, 193)
    assert archive.order_estimate == 2
    assert archive.xi_dim == 4


def test_archive_rejects_short_horizon(dataset):
    with pytest.raises(ValueError, match="must exceed 2·T_ini"):
        make_archive(dataset, 2, 4)


def test_archive_rejects_zero_data(plant):
    zero = simulate(plant, np.zeros(2), np.zeros((200, 1)))
    with pytest.raises(ExcitationError, match="persistent excitation failed"):
        make_archive(zero, 2, 6)


def test_archive_rejects_short_dataset(dataset):
    with pytest.raises(ValueError, match="too short"):
        make_archive(dataset.window(0, 20), 2, 6)


def test_index_helpers_follow_the_stacked_layout(archive):
    np.testing.assert_array_equal(archive.u_index(-2), [0])
    np.testing.assert_array_equal(archive.u_index(5), [7])
    np.testing.assert_array_equal(archive.y_index(-2), [8])
    np.testing.assert_array_equal(archive.xi_index(0), [0, 1, 8, 9])
    np.testing.assert_array_equal(archive.xi_index(6), [6, 7, 14, 15])


def test_columns_are_in_the_span(archive):
    for j in (0, 57, 192):
        assert span_residual(archive, archive.stacked[:, j]) < 1e-10


def test_fresh_windows_in_span_and_perturbed_ones_not(archive, plant):
    rng = np.random.default_rng(11)
    for _ in range(100):
        x0 = rng.uniform(-1.0, 1.0, 2)
        w = simulate(plant, x0, rng.uniform(-0.5, 0.5, (archive.L, 1))).stacked()
        assert span_residual(archive, w) < 1e-8 * max(1.0, np.linalg.norm(w))
        w[archive.y_index(int(rng.integers(-2, 6)))] += 1.0
        assert span_residual(archive, w) > 1e-4


def test_extended_state_examples():
    assert not ExtendedState.at_rest(1, 1, 2).vector.any()
    history = Trajectory([0.0, 0.0], [4.0, 4.0])
    np.testing.assert_array_equal(extended_state(history, 2, 2).vector, [0, 0, 4, 4])
    const = Trajectory([0.1, 0.1], [0.3, 0.3])
    np.testing.assert_allclose(extended_state(const, 2, 2).vector, [0.1, 0.1, 0.3, 0.3])


def test_extended_state_needs_history():
    with pytest.raises(ValueError, match="T_ini=2"):
        extended_state(Trajectory([1.0], [1.0]), 1, 2)


def test_extended_trajectory_slides_one_step():
    a, b, c, d, e = 1.0, 2.0, 3.0, 4.0, 5.0
    v, w, x, y, z = 10.0, 20.0, 30.0, 40.0, 50.0
    xs = extended_trajectory(Trajectory([a, b, c, d, e], [v, w, x, y, z], -2), 2)
    assert len(xs) == 4
    np.testing.assert_array_equal(xs[0].vector, [a, b, v, w])
    np.testing.assert_array_equal(xs[3].vector, [d, e, y, z])
    for prev, nxt in zip(xs, xs[1:]):
        assert prev.u_past[1:].tolist() == nxt.u_past[:-1].tolist()


def test_window_to_trajectory_round_trip(archive):
    col = archive.stacked[:, 10]
    traj = window_to_trajectory(archive, col)
    assert traj.start_index == -2
    np.testing.assert_array_equal(traj.stacked(), col)


def test_span_is_an_orthonormal_basis_of_the_columns(archive):
    Q = archive.span
    assert Q.shape == (16, archive.rank)
    np.testing.assert_allclose(Q.T @ Q, np.eye(archive.rank), atol=1e-10)
    np.testing.assert_allclose(Q @ (Q.T @ archive.basis), archive.basis, atol=1e-8)


def test_span_reproduces_fresh_plant_windows(archive, plant):
    rng = np.random.default_rng(5)
    for _ in range(20):
        traj = simulate(plant, rng.uniform(-1.0, 1.0, 2), rng.uniform(-0.5, 0.5, archive.L))
        w = traj.stacked()
        np.testing.assert_allclose(archive.span @ (archive.span.T @ w), w, atol=1e-8)
