import numpy as np
import pytest

from waynav.controller import (
    CTRL_PARAM_NAMES,
    ControllerParams,
    augment_rasters,
    branch_command_targets,
    command_index,
    command_onehot,
    command_targets,
    control_samples,
    controller_features,
    controller_forward,
    controller_loss_and_grad,
    controller_mse,
    init_controller,
    junction_laps,
    load_controller,
    mirror_command,
    mirror_samples,
    predict_steering,
    save_controller,
    train_controller,
)
from waynav.datastore import FrameRecord, Lap
from waynav.worldsim import ACTION_ORDER, Action, SegmentationError


def small_controller(init_seed=3):
    return init_controller(backbone_seed=21, init_seed=init_seed, raster_shape=(8, 8), feature_dim=24)


def steering_lap(steering, course_id="c", lap_id="lap", seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    frames = [
        FrameRecord(
            index=i,
            raster_left=rng.random((32, 32), dtype=np.float32),
            raster_right=rng.random((32, 32), dtype=np.float32),
            steering=float(s),
        )
        for i, s in enumerate(steering)
    ]
    return Lap(course_id=course_id, lap_id=lap_id, frames=frames)


class TestInit:
    def test_deterministic(self):
        a, b = small_controller(), small_controller()
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name], b.weights[name])

    def test_seeds_are_independent(self):
        a = small_controller(init_seed=3)
        b = small_controller(init_seed=4)
        np.testing.assert_array_equal(a.weights["fixed_w"], b.weights["fixed_w"])
        assert not np.array_equal(a.weights["proj_w"], b.weights["proj_w"])

    def test_shapes(self):
        p = small_controller()
        assert p.weights["fixed_w"].shape == (24, 2 * 8 * 8)
        assert p.weights["proj_w"].shape == (64, 24)
        assert p.weights["cmd_w"].shape == (32, 64 + 3)
        assert p.weights["out_w"].shape == (1, 32)


class TestForward:
    def test_feature_shape_check(self):
        p = small_controller()
        with pytest.raises(ValueError, match="camera pairs"):
            controller_features(p, np.zeros((4, 2, 8, 9)))

    def test_features_bounded(self):
        p = small_controller()
        feats = controller_features(p, np.random.default_rng(0).random((5, 2, 8, 8)))
        assert feats.shape == (5, 24)
        assert np.all(np.abs(feats) < 1.0)

    def test_output_in_unit_interval(self):
        p = small_controller()
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(40, 24))
        cmds = command_onehot(rng.integers(0, 3, size=40))
        out = controller_forward(p, feats, cmds)
        assert out.shape == (40,)
        assert np.all((out > 0) & (out < 1))

    def test_command_changes_output(self):
        p = small_controller()
        feats = np.random.default_rng(2).normal(size=(6, 24))
        outs = [
            controller_forward(p, feats, command_onehot(np.full(6, i))) for i in range(3)
        ]
        assert not np.allclose(outs[0], outs[1])
        assert not np.allclose(outs[1], outs[2])

    def test_predict_steering_scalar(self):
        p = small_controller()
        rng = np.random.default_rng(3)
        s = predict_steering(p, rng.random((8, 8)), rng.random((8, 8)), Action.LEFT)
        assert isinstance(s, float) and 0.0 < s < 1.0


class TestGradients:
    def test_matches_finite_differences(self):
        p = small_controller()
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(12, 24))
        cmds = command_onehot(rng.integers(0, 3, size=12))
        targets = rng.random(12)
        _, grads = controller_loss_and_grad(p, feats, cmds, targets)
        assert set(grads) == set(CTRL_PARAM_NAMES)
        h = 1e-6
        for name in CTRL_PARAM_NAMES:
            w = p.weights[name]
            flat = w.reshape(-1)
            for k in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + h
                up, _ = controller_loss_and_grad(p, feats, cmds, targets)
                flat[k] = orig - h
                dn, _ = controller_loss_and_grad(p, feats, cmds, targets)
                flat[k] = orig
                fd = (up - dn) / (2 * h)
                an = grads[name].reshape(-1)[k]
                if abs(fd - an) < 1e-9:
                    continue
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-5, (name, k)

    def test_fixed_projection_has_no_grad(self):
        p = small_controller()
        rng = np.random.default_rng(5)
        _, grads = controller_loss_and_grad(
            p, rng.normal(size=(4, 24)), command_onehot(rng.integers(0, 3, 4)), rng.random(4)
        )
        assert "fixed_w" not in grads and "fixed_b" not in grads


class TestMirror:
    def test_command_mirror(self):
        idx = np.array([command_index(a) for a in ACTION_ORDER])
        mirrored = mirror_command(idx)
        assert [ACTION_ORDER[i] for i in mirrored] == [Action.RIGHT, Action.STRAIGHT, Action.LEFT]
        np.testing.assert_array_equal(mirror_command(mirrored), idx)

    def test_involution(self):
        rng = np.random.default_rng(6)
        rasters = rng.random((7, 2, 8, 8))
        cmds = rng.integers(0, 3, size=7)
        steer = rng.random(7)
        r2, c2, s2 = mirror_samples(*mirror_samples(rasters, cmds, steer))
        np.testing.assert_array_equal(r2, rasters)
        np.testing.assert_array_equal(c2, cmds)
        np.testing.assert_allclose(s2, steer, atol=1e-15)

    def test_swaps_cameras_and_flips(self):
        rng = np.random.default_rng(7)
        rasters = rng.random((1, 2, 8, 8))
        m, _, _ = mirror_samples(rasters, np.zeros(1, dtype=int), np.full(1, 0.5))
        np.testing.assert_array_equal(m[0, 0], rasters[0, 1, :, ::-1])
        np.testing.assert_array_equal(m[0, 1], rasters[0, 0, :, ::-1])

    def test_steering_reflects(self):
        _, _, s = mirror_samples(
            np.zeros((3, 2, 8, 8)), np.zeros(3, dtype=int), np.array([0.2, 0.5, 0.9])
        )
        np.testing.assert_allclose(s, [0.8, 0.5, 0.1])


class TestAugment:
    def test_bounded_and_shape_preserving(self):
        rasters = np.random.default_rng(8).random((9, 2, 8, 8))
        out = augment_rasters(rasters, np.random.default_rng(0))
        assert out.shape == rasters.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert not np.array_equal(out, rasters)

    def test_deterministic_per_rng_state(self):
        rasters = np.random.default_rng(9).random((4, 2, 8, 8))
        a = augment_rasters(rasters, np.random.default_rng(3))
        b = augment_rasters(rasters, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_draws_multiply_samples_with_same_labels(self):
        lap = steering_lap([0.5, 0.6, 0.7, 0.8])
        cmd = np.array([0, 1, 1, 2])
        params = init_controller(backbone_seed=21, init_seed=3)
        feats, cmds, steer = control_samples(
            params, [(lap, cmd)], augment_draws=2, rng=np.random.default_rng(5)
        )
        # original + 2 draws, each mirrored
        assert feats.shape[0] == 4 * 3 * 2
        np.testing.assert_array_equal(cmds[:4], cmd)
        np.testing.assert_array_equal(cmds[8:12], cmd)
        np.testing.assert_allclose(steer[8:12], lap.steering())

    def test_draws_require_rng(self):
        lap = steering_lap([0.5, 0.6])
        params = init_controller(backbone_seed=21, init_seed=3)
        with pytest.raises(Exception, match="rng"):
            control_samples(params, [(lap, np.array([0, 0]))], augment_draws=1)


class TestCommandTargets:
    def test_synthetic_trace(self):
        steering = [0.5] * 20 + [0.85] * 5 + [0.5] * 15 + [0.15] * 4 + [0.5] * 10
        lap = steering_lap(steering)
        cmd = command_targets(lap, [Action.LEFT, Action.RIGHT])
        expected = np.full(len(steering), command_index(Action.STRAIGHT))
        expected[5:25] = command_index(Action.LEFT)
        expected[25:44] = command_index(Action.RIGHT)
        np.testing.assert_array_equal(cmd, expected)

    def test_count_mismatch(self):
        lap = steering_lap([0.5] * 10 + [0.9] * 5 + [0.5] * 10)
        with pytest.raises(SegmentationError, match="expected 2"):
            command_targets(lap, [Action.LEFT, Action.RIGHT])

    def test_real_lap_commands_cover_turns(self, mini_worlds, mini_dataset):
        from waynav.worldsim import steering_runs

        world = next(w for w in mini_worlds if w.role == "train")
        course = world.course("ccw")
        lap = mini_dataset.laps(course.course_id)[0]
        actions = [wp.action for wp in course.waypoints]
        cmd = command_targets(lap, actions)
        runs = steering_runs(lap.steering())
        assert len(runs) == course.n_waypoints
        for k, (start, end) in enumerate(runs):
            assert np.all(cmd[start:end] == command_index(actions[k]))
            assert np.all(cmd[start - 15 : start] == command_index(actions[k]))
        straight = cmd == command_index(Action.STRAIGHT)
        assert 0.2 < straight.mean() < 0.95


def training_pairs(mini_worlds, mini_dataset):
    world = next(w for w in mini_worlds if w.role == "train")
    pairs = []
    for direction in ("ccw", "cw"):
        course = world.course(direction)
        actions = [wp.action for wp in course.waypoints]
        lap = mini_dataset.laps(course.course_id)[0]
        pairs.append((lap, command_targets(lap, actions)))
        pairs.extend(junction_laps(world, course, seed=31))
    return world, pairs


@pytest.fixture(scope="module")
def trained(mini_worlds, mini_dataset):
    world, pairs = training_pairs(mini_worlds, mini_dataset)
    course = world.course("ccw")
    lap = mini_dataset.laps(course.course_id)[1]
    held_out = (lap, command_targets(lap, [wp.action for wp in course.waypoints]))
    params = init_controller(backbone_seed=21, init_seed=3)
    feats, cmds, steer = control_samples(params, pairs)
    history = train_controller(params, feats, cmds, steer, epochs=60, lr=1e-3, seed=0)
    return params, history, held_out


class TestJunctionLaps:
    def test_all_exits_recorded(self, mini_worlds, mini_dataset):
        world = next(w for w in mini_worlds if w.role == "train")
        course = world.course("ccw")
        pairs = junction_laps(world, course, seed=31, reps=1)
        # the four-corner mini world keeps every stub, so each corner offers
        # all three exits
        assert len(pairs) == 3 * course.n_waypoints
        by_cmd = {i: 0 for i in range(3)}
        for lap, cmd in pairs:
            assert lap.n_frames == len(cmd)
            active = set(np.unique(cmd)) - {command_index(Action.STRAIGHT)}
            assert len(active) <= 1
            for i in active or {command_index(Action.STRAIGHT)}:
                by_cmd[int(i)] += 1
        assert by_cmd[command_index(Action.LEFT)] == course.n_waypoints
        assert by_cmd[command_index(Action.RIGHT)] == course.n_waypoints

    def test_reps_fan_out_distinct_approaches(self, mini_worlds):
        world = next(w for w in mini_worlds if w.role == "train")
        course = world.course("ccw")
        pairs = junction_laps(world, course, seed=31, reps=2)
        assert len(pairs) == 2 * 3 * course.n_waypoints
        first, second = pairs[0][0], pairs[1][0]
        # same exit, different jittered start, so the frames differ
        assert first.rasters().shape[1:] == second.rasters().shape[1:]
        assert first.n_frames != second.n_frames or not np.array_equal(
            first.rasters()[0], second.rasters()[0]
        )

    def test_deterministic(self, mini_worlds):
        world = next(w for w in mini_worlds if w.role == "train")
        course = world.course("ccw")
        a = junction_laps(world, course, seed=31)
        b = junction_laps(world, course, seed=31)
        np.testing.assert_array_equal(a[0][0].rasters(), b[0][0].rasters())

    def test_branch_labels_reject_mismatch(self):
        turning = steering_lap([0.5] * 10 + [0.9] * 5 + [0.5] * 10)
        with pytest.raises(SegmentationError, match="contains a turn"):
            branch_command_targets(turning, Action.STRAIGHT)
        flat = steering_lap([0.5] * 20)
        with pytest.raises(SegmentationError, match="no turn"):
            branch_command_targets(flat, Action.LEFT)

    def test_branch_labels_merge_split_runs(self):
        steering = [0.5] * 20 + [0.8] * 5 + [0.65] * 2 + [0.7] * 4 + [0.6] * 3
        lap = steering_lap(steering)
        cmd = branch_command_targets(lap, Action.LEFT)
        expected = np.full(len(steering), command_index(Action.STRAIGHT))
        expected[5:31] = command_index(Action.LEFT)
        np.testing.assert_array_equal(cmd, expected)


class TestTraining:
    def test_loss_decreases(self, trained):
        _, history, _ = trained
        assert history[-1] < 0.25 * history[0]

    def test_held_out_mse(self, trained):
        params, _, (lap, cmd) = trained
        feats, cmds, steer = control_samples(params, [(lap, cmd)], mirror=False)
        mse = controller_mse(params, feats, cmds, steer)
        fresh = init_controller(backbone_seed=21, init_seed=3)
        untrained = controller_mse(fresh, feats, cmds, steer)
        assert mse < 0.01
        assert mse < 0.5 * untrained

    def test_command_conditioning(self, trained):
        params, _, (lap, cmd) = trained
        feats, cmds, _ = control_samples(params, [(lap, cmd)], mirror=False)
        turn_frames = feats[cmds != command_index(Action.STRAIGHT)]
        means = [
            controller_forward(params, turn_frames, command_onehot(np.full(len(turn_frames), i))).mean()
            for i in (command_index(Action.LEFT), command_index(Action.STRAIGHT), command_index(Action.RIGHT))
        ]
        # steering above half turns left, so forcing left raises the mean
        assert means[0] > means[1] > means[2]

    def test_deterministic(self, mini_dataset, mini_worlds, trained):
        _, history, _ = trained
        _, pairs = training_pairs(mini_worlds, mini_dataset)
        params = init_controller(backbone_seed=21, init_seed=3)
        feats, cmds, steer = control_samples(params, pairs)
        history2 = train_controller(params, feats, cmds, steer, epochs=60, lr=1e-3, seed=0)
        assert history2 == history


class TestStorage:
    def test_round_trip(self, tmp_path):
        params = small_controller()
        rng = np.random.default_rng(8)
        for name in CTRL_PARAM_NAMES:
            params.weights[name] += rng.normal(0, 0.01, size=params.weights[name].shape)
        path = tmp_path / "ctrl.ckpt"
        save_controller(params, path)
        loaded = load_controller(path)
        assert loaded.raster_shape == params.raster_shape
        rng2 = np.random.default_rng(9)
        feats = rng2.normal(size=(5, 24))
        cmds = command_onehot(rng2.integers(0, 3, 5))
        np.testing.assert_allclose(
            controller_forward(loaded, feats, cmds),
            controller_forward(params, feats, cmds),
            atol=1e-4,
        )

    def test_wrong_kind_rejected(self, tmp_path):
        from waynav.ckptio import CheckpointError, save_arrays

        path = tmp_path / "other.ckpt"
        save_arrays(path, {"kind": "detector"}, {"x": np.zeros(3)})
        with pytest.raises(CheckpointError, match="not a controller"):
            load_controller(path)
