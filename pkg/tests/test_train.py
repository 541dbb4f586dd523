import numpy as np
import pytest

from waterfallpose import tensor as T
from waterfallpose import train as TR
from waterfallpose.backbone import PyramidConfig
from waterfallpose.dataio import save_checkpoint, load_checkpoint
from waterfallpose.model import init_model_weights, model_forward, model_backward
from waterfallpose.targets import Keypoint, PersonAnnotation
from waterfallpose.waterfall import WaterfallConfig


def toy_setup(k=2, seed=5):
    pyr = PyramidConfig(widths=(4, 8, 16, 32), stem_width=4)
    wf = WaterfallConfig(level_widths=(4, 8, 16, 32), low_level_width=4,
                         branch_width=8, out_width=16, keypoints=k, group_width=3)
    weights = init_model_weights(pyr, wf, seed=seed)
    return pyr, wf, weights


IDENTITY_AUG = dict(rotation_deg=0.0, scale_range=(1.0, 1.0), translate_px=0.0)


class TestSchedule:
    def test_published_plateaus(self):
        cfg = TR.TrainConfig()
        assert TR.lr_at_epoch(0, cfg) == 1e-3
        assert TR.lr_at_epoch(95, cfg) == pytest.approx(1e-4)
        assert TR.lr_at_epoch(125, cfg) == pytest.approx(1e-5)

    def test_boundaries(self):
        cfg = TR.TrainConfig()
        assert TR.lr_at_epoch(89, cfg) == 1e-3
        assert TR.lr_at_epoch(90, cfg) == pytest.approx(1e-4)
        assert TR.lr_at_epoch(119, cfg) == pytest.approx(1e-4)
        assert TR.lr_at_epoch(120, cfg) == pytest.approx(1e-5)


class TestLosses:
    def test_zero_when_equal(self, rng):
        x = rng.uniform(0, 1, size=(1, 3, 4, 4)).astype(np.float32)
        assert TR.heatmap_loss(x, x.copy())[0] == 0.0
        off = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        mask = np.ones_like(off)
        scale = np.ones((1, 1, 4, 4), dtype=np.float32)
        assert TR.offset_loss(off, off.copy(), mask, scale)[0] == 0.0

    def test_heatmap_mse_closed_form(self):
        pred = np.full((1, 2, 3, 3), 0.5, dtype=np.float32)
        target = np.zeros_like(pred)
        loss, _ = TR.heatmap_loss(pred, target)
        assert loss == pytest.approx(0.25, abs=1e-12)

    def test_smooth_l1_closed_form(self):
        pred = np.zeros((1, 2, 3, 3), dtype=np.float32)
        target = np.zeros_like(pred)
        mask = np.zeros_like(pred)
        scale = np.ones((1, 1, 3, 3), dtype=np.float32)
        pred[0, 0, 1, 1] = 0.5
        mask[0, 0, 1, 1] = 1.0
        loss, _ = TR.offset_loss(pred, target, mask, scale)
        assert loss == pytest.approx(0.125, abs=1e-9)

    def test_smooth_l1_linear_branch(self):
        pred = np.zeros((1, 2, 1, 1), dtype=np.float32)
        target = np.zeros_like(pred)
        mask = np.ones_like(pred)
        scale = np.ones((1, 1, 1, 1), dtype=np.float32)
        pred[0, 0] = 3.0
        loss, _ = TR.offset_loss(pred, target, mask, scale)
        assert loss == pytest.approx((3.0 - 0.5) / 2.0, abs=1e-7)

    def test_all_zero_mask_gives_zero_not_nan(self, rng):
        pred = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        loss, grad = TR.offset_loss(pred, np.zeros_like(pred), np.zeros_like(pred),
                                    np.ones((1, 1, 3, 3), dtype=np.float32))
        assert loss == 0.0 and not grad.any()

    def test_loss_gradients_match_numeric(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(1, 3, 4, 4))
        target = rng.uniform(0, 1, size=(1, 3, 4, 4))
        _, grad = TR.heatmap_loss(pred, target)
        num = T.numeric_gradient(lambda v: TR.heatmap_loss(v, target)[0], pred)
        assert T.relative_error(grad, num) <= 1e-6

        offp = rng.standard_normal((1, 4, 4, 4)) * 2
        offt = rng.standard_normal((1, 4, 4, 4))
        mask = (rng.uniform(size=offp.shape) < 0.5).astype(np.float64)
        scale = rng.uniform(0.5, 3.0, size=(1, 1, 4, 4))
        # keep |e| away from the smooth-L1 kink so central differences are clean
        e = np.abs((offp - offt) / scale)
        offp += ((e > 0.98) & (e < 1.02)) * 0.1
        _, grad = TR.offset_loss(offp, offt, mask, scale)
        num = T.numeric_gradient(lambda v: TR.offset_loss(v, offt, mask, scale)[0], offp)
        assert T.relative_error(grad, num) <= 1e-6


class TestAugmentation:
    def test_identity_transform(self, rng):
        cfg = TR.TrainConfig(**IDENTITY_AUG)
        img = rng.uniform(0, 1, size=(1, 3, 32, 32)).astype(np.float32)
        anns = [PersonAnnotation([Keypoint(4, 5, 2)], area=20.0, bbox=(1, 1, 8, 8))]
        img2, anns2 = TR.augment_sample(img, anns, np.random.default_rng(0), cfg)
        np.testing.assert_array_equal(img2, img)
        assert anns2[0].keypoints[0].x == 4.0 and anns2[0].keypoints[0].y == 5.0
        assert anns2[0].area == 20.0

    def test_center_is_fixed_point(self):
        for theta, scale in ((17.0, 1.0), (-30.0, 0.8), (5.0, 1.5)):
            m = TR.affine_matrix(theta, scale, 0.0, 0.0, 15.5, 15.5)
            out = m @ np.array([15.5, 15.5, 1.0])
            np.testing.assert_allclose(out[:2], [15.5, 15.5], atol=1e-9)

    def test_keypoints_match_matrix_oracle(self, rng):
        cfg = TR.TrainConfig()
        img = rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32)
        kps = [Keypoint(float(x), float(y), 2)
               for x, y in rng.uniform(5, 58, size=(6, 2))]
        anns = [PersonAnnotation(kps, area=30.0)]
        seed_rng = np.random.default_rng(99)
        img2, anns2 = TR.augment_sample(img, anns, seed_rng, cfg)
        # replay the same draws to rebuild the matrix independently
        replay = np.random.default_rng(99)
        theta, scale, tx, ty = TR.sample_affine_params(replay, cfg)
        t = np.deg2rad(theta)
        c = 63 / 2.0
        for kp, kp2 in zip(kps, anns2[0].keypoints):
            x0, y0 = kp.x - c, kp.y - c
            ex = np.cos(t) * scale * x0 - np.sin(t) * scale * y0 + c + tx
            ey = np.sin(t) * scale * x0 + np.cos(t) * scale * y0 + c + ty
            if kp2.v > 0:
                assert abs(kp2.x - ex) <= 1e-6 and abs(kp2.y - ey) <= 1e-6
            else:
                assert not (0 <= ex <= 63 and 0 <= ey <= 63)

    def test_sampled_params_stay_in_range(self):
        cfg = TR.TrainConfig()
        rng = np.random.default_rng(3)
        for _ in range(2000):
            theta, scale, tx, ty = TR.sample_affine_params(rng, cfg)
            assert -30.0 <= theta <= 30.0
            assert 0.75 <= scale <= 1.5
            assert -40.0 <= tx <= 40.0 and -40.0 <= ty <= 40.0

    def test_out_of_canvas_marked_unlabeled(self):
        cfg = TR.TrainConfig(rotation_deg=0.0, scale_range=(1.0, 1.0),
                             translate_px=40.0)
        img = np.zeros((1, 3, 32, 32), dtype=np.float32)
        anns = [PersonAnnotation([Keypoint(2, 2, 2), Keypoint(16, 16, 2)], area=9.0)]
        moved = None
        rng = np.random.default_rng(1)
        for _ in range(50):
            _, out = TR.augment_sample(img, anns, rng, cfg)
            if out[0].keypoints[0].v == 0:
                moved = out[0]
                break
        assert moved is not None
        x, y = moved.keypoints[0].x, moved.keypoints[0].y
        assert not (0 <= x <= 31 and 0 <= y <= 31)


class TestOptimizer:
    def test_zero_grads_no_change(self):
        w = {"p": np.array([1.0, -2.0], dtype=np.float32)}
        state = TR.init_optim_state(w)
        TR.optim_step(w, {"p": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
        np.testing.assert_array_equal(w["p"], [1.0, -2.0])

    def test_matches_hand_iterated_recurrence(self):
        w = {"p": np.array([0.5], dtype=np.float64)}
        state = TR.init_optim_state(w)
        g = np.array([0.3], dtype=np.float64)
        for _ in range(5):
            TR.optim_step(w, {"p": g}, state, lr=0.01)
        # scalar reference recurrence
        m = v = 0.0
        x = 0.5
        for t in range(1, 6):
            m = 0.9 * m + 0.1 * 0.3
            v = 0.999 * v + 0.001 * 0.09
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            x -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
        assert w["p"][0] == pytest.approx(x, rel=1e-12)
        assert state["step"] == 5

    def test_state_round_trips_through_checkpoint(self, rng):
        w = {"p.w": rng.standard_normal((1, 1, 2, 2)).astype(np.float32)}
        state = TR.init_optim_state(w)
        TR.optim_step(w, {"p.w": rng.standard_normal((1, 1, 2, 2)).astype(np.float32)},
                      state, lr=0.05)
        blob = save_checkpoint(w, state, 1, "fp")
        w2, state2, _, _ = load_checkpoint(blob)
        assert save_checkpoint(w2, state2, 1, "fp") == blob


class TestLoop:
    def test_zero_images_no_change(self):
        pyr, wf, weights = toy_setup()
        before = {k: v.copy() for k, v in weights.items()}
        cfg = TR.TrainConfig(epochs=1)
        w2, _, log = TR.train_loop([], weights, pyr, wf, cfg)
        assert len(log) == 1
        for k in before:
            np.testing.assert_array_equal(w2[k], before[k])

    def _tiny_samples(self, rng, n=2, k=2):
        samples = []
        for _ in range(n):
            img = rng.uniform(0, 1, size=(1, 3, 32, 32)).astype(np.float32)
            kps = [Keypoint(float(rng.uniform(8, 24)), float(rng.uniform(8, 24)), 2)
                   for _ in range(k)]
            samples.append((img, [PersonAnnotation(kps, area=64.0)]))
        return samples

    def test_determinism_bitwise(self, rng):
        samples = self._tiny_samples(rng)
        cfg = TR.TrainConfig(epochs=2, seed=11)
        pyr, wf, _ = toy_setup()
        runs = []
        for _ in range(2):
            weights = init_model_weights(pyr, wf, seed=7)
            w2, state, log = TR.train_loop(samples, weights, pyr, wf, cfg)
            runs.append(save_checkpoint(w2, state, cfg.epochs, "fp"))
        assert runs[0] == runs[1]

    def test_loss_decreases_and_log_format(self, rng):
        samples = self._tiny_samples(rng)
        cfg = TR.TrainConfig(epochs=8, seed=3, **IDENTITY_AUG)
        pyr, wf, weights = toy_setup()
        _, _, log = TR.train_loop(samples, weights, pyr, wf, cfg)
        assert len(log) == 8
        first = log[0].split("\t")
        assert len(first) == 5 and first[0] == "0"
        total_first = float(log[0].split("\t")[4])
        total_last = float(log[-1].split("\t")[4])
        assert total_last < total_first


class TestFullModelGradient:
    def test_total_loss_gradient_through_model(self, rng):
        pyr = PyramidConfig(widths=(2, 3, 2, 2), stem_width=2)
        wf = WaterfallConfig(level_widths=(2, 3, 2, 2), low_level_width=2,
                             branch_width=2, out_width=3, final_width=2,
                             keypoints=2, group_width=2)
        weights = init_model_weights(pyr, wf, seed=1, dtype=np.float64,
                                     offset_init="random")
        # random biases keep ReLU pre-activations off the exact kink, where
        # central differences and the subgradient disagree
        for name in weights:
            if name.endswith(".b") and "taps" not in name:
                weights[name] = rng.standard_normal(weights[name].shape) * 0.1
        img = rng.uniform(0, 1, size=(1, 3, 32, 32))
        anns = [PersonAnnotation([Keypoint(3.2, 4.1, 2), Keypoint(5.5, 2.2, 2)],
                                 area=16.0)]
        from waterfallpose.targets import render_keypoint_heatmaps, \
            render_offset_targets
        heat_t = render_keypoint_heatmaps(anns, 2, 8, 8).astype(np.float64)
        off_t, off_m, off_s = render_offset_targets(anns, 2, 8, 8)
        cfg = TR.TrainConfig()

        def loss_fn(wset):
            maps, _ = model_forward(img, wset, pyr, wf)
            total, _, _, _, _ = TR.total_loss(
                maps, heat_t, off_t.astype(np.float64), off_m.astype(np.float64),
                off_s.astype(np.float64), cfg)
            return total

        maps, cache = model_forward(img, weights, pyr, wf)
        _, _, _, gh, go = TR.total_loss(maps, heat_t, off_t.astype(np.float64),
                                        off_m.astype(np.float64),
                                        off_s.astype(np.float64), cfg)
        grads, _ = model_backward(cache, gh, go, weights, pyr, wf)
        for name in ("backbone.stem.0.w", "backbone.level1.0.w", "wf.branch2.w",
                     "llf.mid.w", "head.kp.out.b", "head.off.g0.adapt.w"):
            def f(v, name=name):
                trial = dict(weights)
                trial[name] = v.reshape(weights[name].shape)
                return loss_fn(trial)
            num = T.numeric_gradient(f, weights[name].reshape(1, 1, 1, -1), h=1e-6)
            assert T.relative_error(grads[name], num.reshape(weights[name].shape)) \
                <= 1e-6, name
