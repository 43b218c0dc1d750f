import numpy as np
import pytest

from stereoloc import autodiff as ad
from stereoloc import features
from stereoloc.autodiff import Tape, backward, finite_diff
from stereoloc.errors import ShapeError
from stereoloc.features import (
    ExtractorConfig,
    ExtractorWeights,
    analytic_features,
    detect_keypoints,
    extract_keypoints,
    forward,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)

from conftest import rel_err

TINY = ExtractorConfig(channels=(2, 3, 4), window=8, seed=1)


def run_forward(image, cfg=TINY, weights=None, trainable=False):
    tape = Tape()
    weights = weights or init_weights(cfg)
    params = weights.bind(tape, trainable=trainable)
    return forward(image, params, cfg, tape), tape, params, weights


class TestForward:
    def test_descriptor_dim_is_channel_sum(self):
        cfg = ExtractorConfig(channels=(8, 16, 32), window=16)
        img = np.random.default_rng(0).uniform(size=(48, 64))
        fmap, _, _, _ = run_forward(img, cfg, init_weights(cfg))
        assert fmap.descriptors.value.shape == (56, 48, 64)
        assert cfg.descriptor_dim == 56

    def test_zero_weights_give_half_scores(self):
        cfg = TINY
        weights = ExtractorWeights(
            cfg, {k: np.zeros(s) for k, s in cfg.layer_shapes().items()}
        )
        img = np.random.default_rng(1).uniform(size=(24, 32))
        fmap, _, _, _ = run_forward(img, cfg, weights)
        assert np.array_equal(fmap.scores.value, np.full((24, 32), 0.5))

    def test_seeded_determinism_bitwise(self):
        img = np.random.default_rng(2).uniform(size=(24, 32))
        a, _, _, _ = run_forward(img, TINY, init_weights(TINY))
        b, _, _, _ = run_forward(img, TINY, init_weights(TINY))
        assert a.descriptors.value.tobytes() == b.descriptors.value.tobytes()
        assert a.scores.value.tobytes() == b.scores.value.tobytes()
        assert a.keypoint_logits.value.tobytes() == b.keypoint_logits.value.tobytes()

    def test_scores_strictly_inside_unit_interval(self):
        img = np.random.default_rng(3).uniform(size=(24, 32))
        fmap, _, _, _ = run_forward(img)
        s = fmap.scores.value
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_indivisible_shape_rejected(self):
        img = np.zeros((20, 32))  # 20 not divisible by 8
        with pytest.raises(ShapeError):
            run_forward(img)

    def test_weight_init_bounds(self):
        w = init_weights(ExtractorConfig(channels=(4, 8, 8), seed=7))
        for name, tensor in w.tensors.items():
            if name.endswith(".bias"):
                assert not tensor.any()
            else:
                bound = np.sqrt(1.0 / np.prod(tensor.shape[1:]))
                assert np.abs(tensor).max() <= bound

    def test_forward_gradients_match_finite_differences(self):
        img = np.random.default_rng(4).uniform(size=(24, 32))
        up = {
            "d": np.random.default_rng(5).normal(size=(9, 24, 32)),
            "s": np.random.default_rng(6).normal(size=(24, 32)),
            "k": np.random.default_rng(7).normal(size=(24, 32)),
        }
        base = init_weights(TINY)
        names = sorted(base.tensors)

        def loss_from(weights, trainable):
            tape = Tape()
            params = weights.bind(tape, trainable=trainable)
            fmap = forward(img, params, TINY, tape)
            total = ad.add(
                ad.add(
                    ad.sum_(ad.mul(fmap.descriptors, tape.constant(up["d"]))),
                    ad.sum_(ad.mul(fmap.scores, tape.constant(up["s"]))),
                ),
                ad.sum_(ad.mul(fmap.keypoint_logits, tape.constant(up["k"]))),
            )
            return total, tape, params

        total, tape, params = loss_from(base, True)
        grads = backward(tape, total)
        analytic = np.concatenate(
            [grads[params[n].index].ravel() for n in names]
        )

        sizes = [base.tensors[n].size for n in names]
        splits = np.cumsum(sizes)[:-1]

        def f(flat):
            tensors = {
                n: part.reshape(base.tensors[n].shape)
                for n, part in zip(names, np.split(flat, splits))
            }
            val, _, _ = loss_from(ExtractorWeights(TINY, tensors), False)
            return float(val.value)

        flat0 = np.concatenate([base.tensors[n].ravel() for n in names])
        numeric = finite_diff(f, flat0)
        assert rel_err(analytic, numeric) < 1e-4


class TestDetectKeypoints:
    def test_uniform_logits_give_window_centers(self):
        t = Tape()
        coords = detect_keypoints(t.constant(np.zeros((32, 32))), 16).value
        assert coords.shape == (4, 2)
        assert np.allclose(coords[0], [7.5, 7.5], atol=1e-12)
        expected = {(7.5, 7.5), (23.5, 7.5), (7.5, 23.5), (23.5, 23.5)}
        assert {tuple(c) for c in coords} == expected

    def test_saturated_logit_pins_keypoint(self):
        logits = np.zeros((16, 16))
        logits[4, 3] = 50.0  # (u=3, v=4)
        t = Tape()
        coords = detect_keypoints(t.constant(logits), 16).value
        assert np.abs(coords[0] - [3.0, 4.0]).max() < 1e-3

    def test_window_16_on_64x48_gives_12_keypoints(self):
        t = Tape()
        logits = t.constant(np.random.default_rng(8).normal(size=(48, 64)))
        coords = detect_keypoints(logits, 16).value
        assert coords.shape == (12, 2)

    def test_keypoints_stay_inside_their_windows(self):
        rng = np.random.default_rng(9)
        t = Tape()
        coords = detect_keypoints(t.constant(rng.normal(size=(24, 40)) * 5), 8).value
        ny, nx = 3, 5
        grid = coords.reshape(ny, nx, 2)
        for iy in range(ny):
            for ix in range(nx):
                u, v = grid[iy, ix]
                assert ix * 8 <= u <= ix * 8 + 7
                assert iy * 8 <= v <= iy * 8 + 7

    def test_translation_consistency(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(24, 32)) * 3
        w = 8
        t = Tape()
        base = detect_keypoints(t.constant(logits), w).value.reshape(3, 4, 2)
        rolled = np.roll(logits, w, axis=1)
        shifted = detect_keypoints(Tape().constant(rolled), w).value.reshape(3, 4, 2)
        assert np.array_equal(shifted[:, 1:], base[:, :-1] + np.array([w, 0.0]))

    def test_window_must_divide_shape(self):
        with pytest.raises(ShapeError):
            detect_keypoints(Tape().constant(np.zeros((24, 30))), 8)

    def test_keypoint_count_invariant(self):
        t = Tape()
        coords = detect_keypoints(t.constant(np.zeros((40, 64))), 8).value
        assert len(coords) == (40 // 8) * (64 // 8)

    def test_detection_is_differentiable(self):
        rng = np.random.default_rng(11)
        logits0 = rng.normal(size=(16, 16))
        up = rng.normal(size=(4, 2))

        def build(t, x):
            return ad.sum_(ad.mul(detect_keypoints(x, 8), t.constant(up)))

        t = Tape()
        x = t.param(logits0)
        grads = backward(t, build(t, x))
        analytic = grads[x.index]

        def f(v):
            t2 = Tape()
            x2 = t2.param(v)
            return float(build(t2, x2).value)

        numeric = finite_diff(f, logits0)
        assert rel_err(analytic, numeric) < 1e-6


class TestAnalyticFeatures:
    def test_deterministic(self, noon_frame):
        a = analytic_features(noon_frame.left, Tape())
        b = analytic_features(noon_frame.left, Tape())
        assert a.descriptors.value.tobytes() == b.descriptors.value.tobytes()

    def test_gain_bias_invariant_descriptors(self, noon_frame):
        base = analytic_features(noon_frame.left, Tape()).descriptors.value
        scaled = analytic_features(2.0 * noon_frame.left + 5.0, Tape()).descriptors.value
        assert np.abs(base - scaled).max() < 1e-9

    def test_satisfies_feature_map_contract(self, noon_frame):
        fmap = analytic_features(noon_frame.left, Tape())
        d, h, w = fmap.descriptors.value.shape
        assert (h, w) == noon_frame.left.shape
        assert fmap.scores.value.shape == (h, w)
        assert fmap.keypoint_logits.value.shape == (h, w)
        assert fmap.scores.value.min() >= 0.0
        assert fmap.scores.value.max() <= 1.0
        assert np.isfinite(fmap.descriptors.value).all()


class TestCheckpoint:
    def test_roundtrip_identity_after_first_quantization(self, tmp_path):
        weights = init_weights(ExtractorConfig(channels=(2, 3, 4), window=8, seed=3))
        save_checkpoint(tmp_path / "a", weights, extra={"tau": 50.0})
        loaded, extra = load_checkpoint(tmp_path / "a")
        assert extra == {"tau": 50.0}
        assert loaded.config == weights.config
        save_checkpoint(tmp_path / "b", loaded)
        for f in sorted((tmp_path / "a").glob("*.f32")):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_loaded_weights_are_float32_quantized_originals(self, tmp_path):
        weights = init_weights(TINY)
        save_checkpoint(tmp_path / "ck", weights)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        for name, tensor in weights.tensors.items():
            assert np.array_equal(loaded.tensors[name], tensor.astype(np.float32))

    def test_rejects_wrong_kind(self, tmp_path):
        from stereoloc import storage

        storage.write_manifest(tmp_path / "x", {"kind": "pairs"})
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")

    def test_rejects_shape_mismatch(self, tmp_path):
        weights = init_weights(TINY)
        save_checkpoint(tmp_path / "ck", weights)
        import json

        manifest_path = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["channels"] = [4, 5, 6]
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck")


class TestExtractKeypoints:
    def test_sampled_fields_shapes(self, noon_frame):
        fmap = analytic_features(noon_frame.left, Tape())
        kps = extract_keypoints(fmap, 8)
        n = (48 // 8) * (64 // 8)
        d = fmap.descriptors.value.shape[0]
        assert kps.coords.value.shape == (n, 2)
        assert kps.descriptors.value.shape == (n, d)
        assert kps.scores.value.shape == (n,)

    def test_descriptor_sampling_matches_map_at_integer_points(self):
        rng = np.random.default_rng(12)
        t = Tape()
        desc = rng.normal(size=(5, 16, 16))
        logits = np.zeros((16, 16))
        logits[4, 3] = 1000.0  # saturate onto integer pixel (3, 4)
        fmap = features.DenseFeatureMap(
            t.constant(desc), t.constant(np.full((16, 16), 0.25)), t.constant(logits)
        )
        kps = extract_keypoints(fmap, 16)
        assert np.allclose(kps.descriptors.value[0], desc[:, 4, 3], atol=1e-9)
        assert np.allclose(kps.scores.value[0], 0.25, atol=1e-12)
