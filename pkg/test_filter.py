import numpy as np
import pytest

from dd_filter import (
    Excitation, FilterFailure, FilterProblem, assemble_filter_qp, check_backup, filter_step,
    run_rollout, sample_backups, save_rollout_log,
)
from dd_geometry import VRepSet
from dd_hankel import ExtendedState, span_residual
from dd_plant import PlantLoop, simulate

BOX_SLACK = 1e-7


@pytest.fixture
def origin():
    return ExtendedState.at_rest(1, 1, 2)


@pytest.fixture
def zero_target():
    return VRepSet.singleton(np.zeros(4))


def test_variable_count(archive, origin, zero_target, boxes):
    qp = assemble_filter_qp(FilterProblem(archive, origin, zero_target, [0.0], boxes))
    assert qp.n_vars == archive.rank + 16 + 1


def test_equilibrium_needs_no_intervention(archive, origin, zero_target, boxes):
    u, backup = filter_step(FilterProblem(archive, origin, zero_target, [0.0], boxes))
    np.testing.assert_array_equal(u, [0.0])
    np.testing.assert_allclose(backup.inputs, 0.0, atol=1e-7)
    np.testing.assert_allclose(backup.outputs, 0.0, atol=1e-7)
    assert backup.objective == pytest.approx(0.0, abs=1e-9)


def test_small_input_passes_unmodified(archive, origin, zero_target, boxes):
    u, backup = filter_step(FilterProblem(archive, origin, zero_target, [0.01], boxes))
    np.testing.assert_array_equal(u, [0.01])
    assert backup.objective < 1e-10
    # the applied input and the backup agree
    np.testing.assert_array_equal(backup.inputs[archive.T_ini], u)
    assert check_backup(backup, zero_target, boxes, archive.T_ini) == []


def test_backup_is_a_safe_plant_trajectory(archive, origin, zero_target, boxes, plant):
    u, backup = filter_step(FilterProblem(archive, origin, zero_target, [0.4], boxes))
    assert abs(u[0]) <= 0.5
    # the history is at rest, so the plant starts at the origin
    replay = simulate(plant, np.zeros(2), backup.inputs[2:])
    np.testing.assert_allclose(replay.outputs, backup.outputs[2:], atol=1e-6)
    assert np.all(np.abs(replay.outputs) <= 4.0 + BOX_SLACK)
    assert check_backup(backup, zero_target, boxes, archive.T_ini) == []
    np.testing.assert_allclose(backup.extended_states[-1].vector, 0.0, atol=1e-6)
    assert len(backup.extended_states) == archive.N + 1


def test_history_pinned_into_backup(archive, boxes, zero_target):
    xi = ExtendedState(np.array([[0.02], [-0.02]]), np.array([[0.0], [0.01]]))
    _, backup = filter_step(FilterProblem(archive, xi, zero_target, [0.0], boxes))
    np.testing.assert_allclose(backup.extended_states[0].vector, xi.vector, atol=1e-7)


def test_unreachable_history_fails(archive, boxes, zero_target):
    xi = ExtendedState(np.zeros((2, 1)), np.full((2, 1), 100.0))
    with pytest.raises(FilterFailure) as info:
        filter_step(FilterProblem(archive, xi, zero_target, [0.0], boxes))
    assert info.value.solution is not None
    assert not info.value.solution.ok


def test_problem_validates_dimensions(archive, origin, zero_target, boxes):
    with pytest.raises(ValueError, match="u_learning"):
        FilterProblem(archive, origin, zero_target, [0.0, 0.0], boxes)
    with pytest.raises(ValueError, match="target"):
        FilterProblem(archive, origin, VRepSet.singleton(np.zeros(3)), [0.0], boxes)


def test_zero_steps_give_no_backups(archive, origin, zero_target, boxes, plant):
    assert sample_backups(archive, origin, zero_target, 0, 3, PlantLoop(plant, np.zeros(2)),
                          boxes) == []


def test_sampled_backups_stay_in_the_boxes(archive, origin, zero_target, boxes, plant):
    backups = sample_backups(archive, origin, zero_target, 25, 3,
                             PlantLoop(plant, np.zeros(2)), boxes)
    assert len(backups) == 25
    lo, hi = boxes.window_bounds(2)
    for b in backups:
        xs = b.xi_matrix()
        assert np.all(xs >= lo - BOX_SLACK) and np.all(xs <= hi + BOX_SLACK)
        assert check_backup(b, zero_target, boxes, archive.T_ini) == []
        w = b.trajectory.stacked()
        assert span_residual(archive, w) < 1e-6 * max(1.0, np.linalg.norm(w))


def test_sampling_is_deterministic(archive, origin, zero_target, boxes, plant):
    runs = [sample_backups(archive, origin, zero_target, 5, 11, PlantLoop(plant, np.zeros(2)), boxes)
            for _ in range(2)]
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a.inputs, b.inputs)


@pytest.mark.slow
def test_random_inputs_never_break_the_output_box(archive, origin, zero_target, boxes, plant):
    rng = np.random.default_rng(21)
    rollout = run_rollout(archive, origin, zero_target, 200, PlantLoop(plant, np.zeros(2)),
                          Excitation(boxes, rng), boxes)
    assert not rollout.aborted
    assert len(rollout.records) == 200
    for r in rollout.records:
        assert boxes.contains(r.u_safe, r.y, slack=BOX_SLACK)
    for b in rollout.backups:
        assert check_backup(b, zero_target, boxes, archive.T_ini) == []


def test_held_excitation_repeats_draws(boxes):
    exc = Excitation(boxes, np.random.default_rng(0), kind="held", hold_max=4)
    draws = np.array([exc.draw()[0] for _ in range(40)])
    assert np.all(np.abs(draws) <= 0.5)
    assert len(np.unique(draws)) < 40
    fresh = Excitation(boxes, np.random.default_rng(0))
    assert len(np.unique([fresh.draw()[0] for _ in range(40)])) == 40


def test_unknown_excitation_kind(boxes):
    with pytest.raises(ValueError, match="excitation"):
        Excitation(boxes, np.random.default_rng(0), kind="chirp")


def test_rollout_log_columns(archive, origin, zero_target, boxes, plant, tmp_path):
    rollout = run_rollout(archive, origin, zero_target, 3, PlantLoop(plant, np.zeros(2)),
                          Excitation(boxes, np.random.default_rng(1)), boxes)
    path = save_rollout_log(rollout.records, tmp_path / "rollout.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,u_l,u_safe,y,objective,qp_status"
    assert len(lines) == 4
    assert lines[1].startswith("0,")


def test_modified_input_is_the_backup_first_input(archive, origin, zero_target, boxes):
    u, backup = filter_step(FilterProblem(archive, origin, zero_target, [0.5], boxes))
    assert backup.objective > 1e-10
    np.testing.assert_array_equal(backup.inputs[archive.T_ini], u)


def test_rollouts_into_a_grown_level_rarely_fall_back(archive, small_family, boxes, plant):
    origin = ExtendedState.at_rest(1, 1, archive.T_ini)
    rollout = run_rollout(archive, origin, small_family[1], 60, PlantLoop(plant, np.zeros(2)),
                          Excitation(boxes, np.random.default_rng(4), "held", 6), boxes)
    statuses = [r.qp_status for r in rollout.records]
    assert not rollout.aborted
    assert len(statuses) == 60
    assert set(statuses) <= {"optimal", "infeasible", "max_iter"}
    assert statuses.count("optimal") >= 57
    for b in rollout.backups:
        assert check_backup(b, small_family[1], boxes, archive.T_ini) == []
