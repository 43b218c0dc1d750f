import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereoloc import features, synth, training
from stereoloc.errors import ConfigError
from stereoloc.geometry import PlanarPose, apply, planar_to_se3
from stereoloc.training import (
    AdamState,
    LossConfig,
    TrainConfig,
    adam_step,
    keypoint_loss,
    pose_loss,
    split_dataset,
    total_loss,
    train,
)


def tiny_dataset(scene, count=8, seed=11):
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        synth.make_dataset(tmp, scene, count=count, seed=seed, size=(24, 32))
        samples, manifest = synth.load_dataset(tmp)
    return samples, synth.camera_from_dict(manifest["camera"])


@pytest.fixture(scope="module")
def small_data(scene):
    return tiny_dataset(scene)


class TestKeypointLoss:
    def test_zero_for_exact_transform(self):
        rng = np.random.default_rng(0)
        p_s = rng.normal(size=(6, 3))
        gt = PlanarPose(0.2, -0.1, 0.3)
        p_t = apply(planar_to_se3(gt), p_s)
        assert keypoint_loss(p_s, p_t, gt) == pytest.approx(0.0, abs=1e-18)

    def test_unit_x_offset_gives_unit_loss(self):
        rng = np.random.default_rng(1)
        p_s = rng.normal(size=(5, 3))
        gt = PlanarPose(0.0, 0.0, 0.0)
        p_t = p_s.copy()
        p_t[2, 0] += 1.0
        assert keypoint_loss(p_s, p_t, gt) == pytest.approx(1.0, abs=1e-12)

    def test_z_offsets_ignored(self):
        rng = np.random.default_rng(2)
        p_s = rng.normal(size=(5, 3))
        gt = PlanarPose(0.1, 0.2, -0.2)
        p_t = apply(planar_to_se3(gt), p_s)
        p_t[:, 2] += rng.normal(size=5) * 10
        assert keypoint_loss(p_s, p_t, gt) == pytest.approx(0.0, abs=1e-18)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-100, 100))
    def test_z_translation_invariance(self, dz):
        rng = np.random.default_rng(3)
        p_s = rng.normal(size=(4, 3))
        p_t = rng.normal(size=(4, 3))
        gt = PlanarPose(0.05, -0.02, 0.1)
        base = keypoint_loss(p_s, p_t, gt)
        shifted = p_t.copy()
        shifted[:, 2] += dz
        assert keypoint_loss(p_s, shifted, gt) == pytest.approx(base, abs=1e-9)


class TestPoseLoss:
    def test_identity_case(self):
        pp = PlanarPose(0.3, -0.4, 1.2)
        assert pose_loss(pp, pp, lam=1.0) == pytest.approx(0.0, abs=1e-15)

    def test_unit_translation(self):
        a = PlanarPose(1.0, 0.0, 0.0)
        b = PlanarPose(0.0, 0.0, 0.0)
        assert pose_loss(a, b, lam=1.0) == pytest.approx(1.0, abs=1e-15)

    def test_quarter_turn_rotation_term(self):
        a = PlanarPose(0.0, 0.0, math.pi / 2)
        b = PlanarPose(0.0, 0.0, 0.0)
        assert pose_loss(a, b, lam=1.0) == pytest.approx(4.0, abs=1e-12)

    def test_rotation_closed_form(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            ga, gb = rng.uniform(-math.pi, math.pi, 2)
            a = PlanarPose(0.0, 0.0, ga)
            b = PlanarPose(0.0, 0.0, gb)
            expected = 4.0 * (1.0 - math.cos(ga - gb))
            assert abs(pose_loss(a, b, 1.0) - expected) < 1e-12

    def test_rotation_term_depends_only_on_heading_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            ga, gb, shift = rng.uniform(-2, 2, 3)
            base = pose_loss(PlanarPose(0, 0, ga), PlanarPose(0, 0, gb), 1.0)
            moved = pose_loss(
                PlanarPose(0, 0, ga + shift), PlanarPose(0, 0, gb + shift), 1.0
            )
            assert abs(base - moved) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a = PlanarPose(*rng.uniform(-1, 1, 2), rng.uniform(-3, 3))
            b = PlanarPose(*rng.uniform(-1, 1, 2), rng.uniform(-3, 3))
            assert pose_loss(a, b, rng.uniform(0.1, 5.0)) >= 0.0

    def test_lambda_scales_rotation_term(self):
        a = PlanarPose(0.0, 0.0, 0.7)
        b = PlanarPose(0.0, 0.0, 0.0)
        assert pose_loss(a, b, 2.5) == pytest.approx(2.5 * pose_loss(a, b, 1.0), rel=1e-12)


class TestSampleLoss:
    def test_total_combines_components(self, small_data):
        samples, K = small_data
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=2))
        lcfg = LossConfig(keypoint_weight=2.5)
        mean, grads, stats = total_loss(samples[:2], w, lcfg, K)
        for s in stats:
            if not s.skipped:
                assert s.total == pytest.approx(2.5 * s.keypoint + s.pose, rel=1e-12)

    def test_tape_pose_component_matches_matrix_loss(self, small_data):
        samples, K = small_data
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=3))
        lcfg = LossConfig()
        _, _, stats = total_loss(samples[:3], w, lcfg, K, compute_grads=False)
        checked = 0
        for s, sample in zip(stats, samples[:3]):
            if s.skipped:
                continue
            checked += 1
            assert s.pose == pytest.approx(pose_loss(s.est, sample.gt, lcfg.lam), abs=1e-12)
        assert checked > 0

    def test_zero_keypoint_weight_leaves_pose_loss_alone(self, small_data):
        samples, K = small_data
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=4))
        mean, _, stats = total_loss(samples[:2], w, LossConfig(keypoint_weight=0.0), K,
                                    compute_grads=False)
        kept = [s for s in stats if not s.skipped]
        assert mean == pytest.approx(np.mean([s.pose for s in kept]), rel=1e-12)

    def test_all_samples_gated_out_gives_nan_and_zero_grads(self, small_data):
        samples, K = small_data
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=5))
        mean, grads, stats = total_loss(samples[:2], w, LossConfig(gate_threshold=1e-9), K)
        assert math.isnan(mean)
        assert all(s.skipped for s in stats)
        assert all(not g.any() for g in grads.values())

    def test_loss_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=0.0)
        with pytest.raises(ValueError):
            LossConfig(keypoint_weight=-0.1)
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)


class TestAdam:
    def test_zero_gradient_leaves_params_advances_step(self):
        params = {"a": np.array([1.0, -2.0])}
        before = params["a"].tobytes()
        state = AdamState.for_params(params)
        adam_step(params, {"a": np.zeros(2)}, state, lr=0.1)
        assert params["a"].tobytes() == before
        assert state.step == 1

    def test_first_step_magnitude_is_learning_rate(self):
        for g in (0.5, -3.0, 100.0):
            params = {"a": np.array([1.0])}
            state = AdamState.for_params(params)
            adam_step(params, {"a": np.array([g])}, state, lr=0.01)
            delta = params["a"][0] - 1.0
            assert delta == pytest.approx(-0.01 * np.sign(g), rel=1e-6)

    def test_zero_learning_rate_is_bitwise_noop(self):
        rng = np.random.default_rng(7)
        params = {"a": rng.normal(size=(3, 3))}
        before = params["a"].tobytes()
        state = AdamState.for_params(params)
        adam_step(params, {"a": rng.normal(size=(3, 3))}, state, lr=0.0)
        assert params["a"].tobytes() == before

    def test_converges_on_quadratic_and_matches_reference(self):
        # reference recurrence computed independently
        x = np.array([0.0])
        params = {"x": x}
        state = AdamState.for_params(params)
        m = v = 0.0
        xr = 0.0
        for t in range(1, 201):
            g = 2.0 * (params["x"][0] - 2.0)
            adam_step(params, {"x": np.array([g])}, state, lr=0.1)
            gr = 2.0 * (xr - 2.0)
            m = 0.9 * m + 0.1 * gr
            v = 0.999 * v + 0.001 * gr * gr
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            xr -= 0.1 * mh / (math.sqrt(vh) + 1e-8)
            assert params["x"][0] == pytest.approx(xr, abs=1e-12)
        assert abs(params["x"][0] - 2.0) < 0.05


class TestTrainLoop:
    def test_deterministic_curves(self, small_data):
        samples, K = small_data
        tr, va = split_dataset(samples, 0.25)

        def run():
            w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=6))
            tcfg = TrainConfig(learning_rate=1e-3, batch_size=2, max_epochs=2,
                               early_stop_patience=5, seed=3)
            return train(tr, va, w, tcfg, LossConfig(), K).curves

        assert run() == run()

    def test_patience_with_frozen_weights_stops_on_schedule(self, small_data, monkeypatch):
        samples, K = small_data
        tr, va = split_dataset(samples, 0.25)
        monkeypatch.setattr(training, "adam_step", lambda p, g, s, lr: (p, s))
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=7))
        tcfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=50,
                           early_stop_patience=3, seed=0)
        result = train(tr, va, w, tcfg, LossConfig(), K)
        assert result.stopped_epoch == 3
        assert result.best_epoch == 0
        assert [c["epoch"] for c in result.curves] == [0, 1, 2, 3]

    def test_training_reduces_validation_pose_error(self, scene):
        samples, K = tiny_dataset(scene, count=40, seed=21)
        tr, va = split_dataset(samples, 0.2)
        w = features.init_weights(features.ExtractorConfig(channels=(8, 16, 32), window=8, seed=5))
        tcfg = TrainConfig(learning_rate=2e-3, batch_size=4, max_epochs=3,
                           early_stop_patience=3, seed=0)
        result = train(tr, va, w, tcfg, LossConfig(), K)
        assert result.curves[-1]["val_pose_err"] < result.curves[0]["val_pose_err"]

    def test_outputs_written(self, small_data, tmp_path):
        samples, K = small_data
        tr, va = split_dataset(samples, 0.25)
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8, seed=8))
        tcfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=1,
                           early_stop_patience=2, seed=0)
        train(tr, va, w, tcfg, LossConfig(), K, out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "loss_curves.csv").is_file()
        loaded, extra = features.load_checkpoint(tmp_path / "run" / "checkpoint")
        assert loaded.config.channels == (2, 3, 4)
        assert extra["tau"] == LossConfig().tau
        header = (tmp_path / "run" / "loss_curves.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,val_loss,val_pose_err"

    def test_empty_split_rejected(self, small_data):
        samples, K = small_data
        w = features.init_weights(features.ExtractorConfig(channels=(2, 3, 4), window=8))
        with pytest.raises(ConfigError):
            train([], samples, w, TrainConfig(), LossConfig(), K)
        with pytest.raises(ConfigError):
            split_dataset(samples, 1.5)
        with pytest.raises(ConfigError):
            split_dataset(samples[:1], 0.5)

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(early_stop_patience=0)
