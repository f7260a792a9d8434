"""Loss, optimizer, schedule, training loop, and end-to-end gradient tests."""

import numpy as np
import pytest

from raymvs.kernels import Parameter
from raymvs.model import ModelConfig, init_model, model_forward
from raymvs.ray_field import LOCATION_LOW, LOCATION_SPAN
from raymvs.synth_scenes import SceneConfig, build_scene_data, generate_scene
from raymvs.training import (
    LOG_COLUMNS,
    LossWeights,
    TrainConfig,
    adam_step,
    consistency_loss,
    init_adam,
    location_loss,
    masked_l1,
    ray_labels,
    scene_step,
    schedule_lr,
    sdf_loss,
    total_loss,
    train,
)


def micro_config(**overrides):
    base = dict(image_height=16, image_width=16, n_views=2, samples_per_ray=4,
                depth_count=8)
    base.update(overrides)
    return ModelConfig(**base)


def micro_scene_data(seed, **scene_overrides):
    scene_kwargs = dict(image_size=(16, 16), n_views=2)
    scene_kwargs.update(scene_overrides)
    scene = generate_scene(SceneConfig(**scene_kwargs), seed)
    return build_scene_data(scene, f"scene_{seed:04d}")


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.w_s, w.w_l, w.w_sl) == (0.1, 0.8, 0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(w_l=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda_g=-1e-9)


class TestSdfLoss:
    def test_equal_inputs_zero(self):
        x = np.random.default_rng(0).normal(size=(5, 8))
        value, grad = sdf_loss(x, x)
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(x))

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(6, 16))
        value, _ = sdf_loss(gt + 0.25, gt)
        np.testing.assert_allclose(value, 16 * 0.25, rtol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pred = rng.normal(size=(4, 7))
            gt = rng.normal(size=(4, 7))
            value, grad = sdf_loss(pred, gt)
            expected = np.mean([sum(abs(pred[i, j] - gt[i, j]) for j in range(7))
                                for i in range(4)])
            np.testing.assert_allclose(value, expected, rtol=1e-12)
            np.testing.assert_allclose(grad, np.sign(pred - gt) / 4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            sdf_loss(np.zeros((3, 4)), np.zeros((3, 5)))
        with pytest.raises(ValueError):
            sdf_loss(np.zeros(4), np.zeros(4))


class TestLocationLoss:
    def test_single_pair(self):
        value, grad = location_loss(np.array([0.3]), np.array([0.7]))
        np.testing.assert_allclose(value, 0.4, rtol=1e-12)
        np.testing.assert_array_equal(grad, [-1.0])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pred = rng.uniform(size=20)
            gt = rng.uniform(size=20)
            value, grad = location_loss(pred, gt)
            np.testing.assert_allclose(value, np.mean(np.abs(pred - gt)), rtol=1e-12)
            np.testing.assert_allclose(grad, np.sign(pred - gt) / 20)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            location_loss(np.zeros(3), np.zeros(4))


class TestConsistencyLoss:
    def test_same_sign_pair(self):
        indicator, surrogate, grad = consistency_loss(np.array([[0.5, 0.5]]),
                                                      np.array([0.3]))
        assert indicator == 1.0
        np.testing.assert_allclose(surrogate, 0.25, rtol=1e-12)
        np.testing.assert_allclose(grad, [[0.5, 0.5]])

    def test_opposite_sign_pair(self):
        indicator, surrogate, grad = consistency_loss(np.array([[0.5, -0.5]]),
                                                      np.array([0.3]))
        assert indicator == 0.0
        assert surrogate == 0.0
        np.testing.assert_array_equal(grad, np.zeros((1, 2)))

    def test_pair_selection_mid_grid(self):
        sdf = np.zeros((1, 16))
        sdf[0, 7], sdf[0, 8] = 2.0, 3.0
        indicator, surrogate, grad = consistency_loss(sdf, np.array([0.5]))
        assert indicator == 1.0
        np.testing.assert_allclose(surrogate, 6.0, rtol=1e-12)
        assert grad[0, 7] == 3.0 and grad[0, 8] == 2.0

    def test_out_of_grid_uses_boundary_pair(self):
        sdf = np.array([[1.0, 2.0, 3.0, 4.0]])
        low = consistency_loss(sdf, np.array([-0.6]))
        high = consistency_loss(sdf, np.array([1.7]))
        np.testing.assert_allclose(low[1], 2.0, rtol=1e-12)
        np.testing.assert_allclose(high[1], 12.0, rtol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            sdf = rng.normal(size=(6, 5))
            loc = rng.uniform(-0.3, 1.3, size=6)
            indicator, surrogate, grad = consistency_loss(sdf, loc)
            hits, hinge = [], []
            expected_grad = np.zeros_like(sdf)
            for i in range(6):
                a = min(max(int(np.floor(loc[i] * 4)), 0), 3)
                prod = sdf[i, a] * sdf[i, a + 1]
                hits.append(1.0 if prod > 0 else 0.0)
                hinge.append(max(prod, 0.0))
                if prod > 0:
                    expected_grad[i, a] = sdf[i, a + 1] / 6
                    expected_grad[i, a + 1] = sdf[i, a] / 6
            np.testing.assert_allclose(indicator, np.mean(hits), rtol=1e-12)
            np.testing.assert_allclose(surrogate, np.mean(hinge), rtol=1e-12)
            np.testing.assert_allclose(grad, expected_grad)


class TestTotalLoss:
    def test_unit_parts_default_weights(self):
        value = total_loss((1.0, 1.0, 1.0, 1.0), LossWeights())
        np.testing.assert_allclose(value, 1.01, rtol=1e-12)

    def test_linear_in_each_weight(self):
        parts = (0.0, 0.37, 0.0, 0.0)
        single = total_loss(parts, LossWeights(w_s=0.0, w_l=0.8, w_sl=0.0, lambda_g=0.0))
        double = total_loss(parts, LossWeights(w_s=0.0, w_l=1.6, w_sl=0.0, lambda_g=0.0))
        assert double == 2.0 * single

    def test_wrong_part_count(self):
        with pytest.raises(ValueError):
            total_loss((1.0, 2.0, 3.0), LossWeights())


class TestMaskedL1:
    def test_masked_mean(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        gt = np.array([[1.5, 2.0], [0.0, 3.0]])
        mask = gt > 0
        value, grad = masked_l1(pred, gt, mask)
        np.testing.assert_allclose(value, (0.5 + 0.0 + 1.0) / 3, rtol=1e-12)
        np.testing.assert_allclose(grad, np.array([[-1, 0], [0, 1]]) / 3)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_l1(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


class TestSchedule:
    def test_stepped_decay(self):
        expected = [5e-4, 5e-4, 4.5e-4, 4.5e-4, 4.05e-4]
        got = [schedule_lr(5e-4, epoch) for epoch in range(5)]
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


class TestAdam:
    def test_quadratic_converges(self):
        p = Parameter(np.array([10.0]), "x")
        state = init_adam([p])
        target = 0.7
        for _ in range(500):
            grads = {"x": p.value - target}
            adam_step([p], grads, state, lr=0.1)
            if abs(p.value[0] - target) < 1e-3:
                break
        assert abs(p.value[0] - target) < 1e-3

    def test_first_step_closed_form(self):
        rng = np.random.default_rng(5)
        value = rng.normal(size=7)
        g = rng.normal(size=7)
        p = Parameter(value.copy(), "x")
        state = init_adam([p])
        adam_step([p], {"x": g}, state, lr=0.01)
        expected = value - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, expected, rtol=1e-12)

    def test_zero_gradient_no_op(self):
        value = np.array([1.5, -2.25, 0.0])
        p = Parameter(value.copy(), "x")
        state = init_adam([p])
        adam_step([p], {"x": np.zeros(3)}, state, lr=0.1)
        np.testing.assert_array_equal(p.value, value)

    def test_non_finite_gradient_rejected(self):
        p = Parameter(np.zeros(2), "weird")
        state = init_adam([p])
        with pytest.raises(ValueError, match="weird"):
            adam_step([p], {"weird": np.array([1.0, np.nan])}, state, lr=0.1)

    def test_step_counter(self):
        p = Parameter(np.zeros(1), "x")
        state = init_adam([p])
        for i in range(3):
            adam_step([p], {"x": np.ones(1)}, state, lr=0.01)
            assert state.step == i + 1


class TestRayLabels:
    def test_shapes_and_bounds(self):
        data = micro_scene_data(0)
        config = micro_config()
        params = init_model(np.random.default_rng(0), config)
        out, _ = model_forward(params, data.images, data.scene.cameras, config,
                               noise_seed=1)
        bundle = out.plan.bundle
        s_bar, l_target, keep, l_hat = ray_labels(data.scene, bundle)
        assert s_bar.shape == (bundle.count, bundle.k)
        assert l_target.shape == (bundle.count,)
        assert keep.dtype == bool
        assert l_target.min() >= LOCATION_LOW
        assert l_target.max() <= LOCATION_LOW + LOCATION_SPAN
        assert keep.sum() > 0
        assert np.isfinite(s_bar[keep]).all()
        inside = (l_hat >= LOCATION_LOW) & (l_hat <= LOCATION_LOW + LOCATION_SPAN)
        np.testing.assert_array_equal(l_target[inside], l_hat[inside])


class TestSceneStep:
    def test_parts_and_grad_coverage(self):
        data = micro_scene_data(1)
        config = micro_config()
        params = init_model(np.random.default_rng(1), config)
        parts, grads, out = scene_step(params, data, config, LossWeights(),
                                       rng=np.random.default_rng(2), batch_rays=64,
                                       noise_seed=3)
        for key in ("total", "sdf", "location", "consistency", "gate_density", "coarse"):
            assert key in parts and np.isfinite(parts[key])
        assert set(grads) == {p.name for p in params.all()}
        assert out.depth_map(config.image_size).shape == config.image_size

    def test_deterministic(self):
        data = micro_scene_data(1)
        config = micro_config()
        results = []
        for _ in range(2):
            params = init_model(np.random.default_rng(1), config)
            parts, grads, _ = scene_step(params, data, config, LossWeights(),
                                         rng=np.random.default_rng(2), batch_rays=64,
                                         noise_seed=3)
            results.append((parts, grads))
        assert results[0][0] == results[1][0]
        for name in results[0][1]:
            np.testing.assert_array_equal(results[0][1][name], results[1][1][name])

    def test_skip_gradients(self):
        data = micro_scene_data(1)
        config = micro_config()
        params = init_model(np.random.default_rng(1), config)
        parts, grads, _ = scene_step(params, data, config, LossWeights(),
                                     rng=np.random.default_rng(2), batch_rays=64,
                                     noise_seed=3, with_grads=False)
        assert grads is None
        assert np.isfinite(parts["total"])


class TestTrainLoop:
    def test_empty_dataset_rejected(self, tmp_path):
        config = micro_config()
        params = init_model(np.random.default_rng(0), config)
        with pytest.raises(ValueError):
            train([], params, config, TrainConfig(epochs=1), tmp_path)

    def test_same_seed_byte_identical(self, tmp_path):
        config = micro_config()
        dataset = [micro_scene_data(0), micro_scene_data(1)]
        blobs = []
        for run in range(2):
            params = init_model(np.random.default_rng(4), config)
            out_dir = tmp_path / f"run{run}"
            res = train(dataset, params, config,
                        TrainConfig(epochs=2, batch_rays=64, seed=9), out_dir)
            blobs.append((open(res.checkpoint_path, "rb").read(),
                          open(res.log_path, "rb").read()))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]

    def test_history_and_log_roundtrip(self, tmp_path):
        config = micro_config()
        dataset = [micro_scene_data(2)]
        params = init_model(np.random.default_rng(2), config)
        res = train(dataset, params, config,
                    TrainConfig(epochs=4, batch_rays=64, seed=1), tmp_path)
        assert len(res.history) == 4
        lrs = [row["learning_rate"] for row in res.history]
        np.testing.assert_allclose(lrs, [5e-4, 5e-4, 4.5e-4, 4.5e-4], rtol=1e-12)
        lines = open(res.log_path).read().strip().splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS)
        assert len(lines) == 5
        first = lines[1].split(",")
        assert int(first[0]) == 0
        np.testing.assert_allclose(float(first[1]), res.history[0]["sdf"], rtol=1e-15)

    def test_non_finite_loss_aborts_and_restores(self, tmp_path):
        config = micro_config()
        good = micro_scene_data(3)
        bad = micro_scene_data(4)
        bad.depths = bad.depths.copy()
        bad.depths[0, 5, 5] = np.inf
        params = init_model(np.random.default_rng(3), config)
        snapshot = {p.name: p.value.copy() for p in params.all()}
        res = train([good, bad], params, config,
                    TrainConfig(epochs=3, batch_rays=64, seed=1), tmp_path)
        assert res.aborted
        assert "scene_0004" in res.message
        for p in params.all():
            np.testing.assert_array_equal(p.value, snapshot[p.name])

    def test_single_scene_overfit(self, tmp_path):
        config = micro_config(depth_count=16, delta_frac=0.15)
        data = micro_scene_data(5, n_spheres=0, n_boxes=0)
        params = init_model(np.random.default_rng(5), config)
        weights = LossWeights(lambda_g=config.sparsity_weight)
        initial, _, _ = scene_step(params, data, config, weights,
                                   rng=np.random.default_rng(99), batch_rays=256,
                                   noise_seed=7, with_grads=False)
        # one unique scene, visited several times per epoch
        res = train([data] * 16, params, config,
                    TrainConfig(learning_rate=3e-3, epochs=50, batch_rays=256,
                                seed=5, decay_every=10), tmp_path)
        assert not res.aborted
        final = res.history[-1]["total"]
        assert final < 0.1 * initial["total"]


def fd_direction(params, name, rng):
    p = {q.name: q for q in params.all()}[name]
    v = rng.normal(size=p.value.shape)
    return p, v / np.linalg.norm(v)


class TestEndToEndGradient:
    def test_every_group_matches_finite_differences(self):
        eps, tol, floor = 3e-7, 1e-3, 1e-4
        for seed in range(3):
            data = micro_scene_data(10 + seed)
            config = micro_config(use_gumbel=False)
            params = init_model(np.random.default_rng(seed), config)
            # move off the init's exact relu kinks (zero biases meet zero inputs)
            jitter = np.random.default_rng(500 + seed)
            for p in params.all():
                p.value = p.value + 0.02 * jitter.standard_normal(p.value.shape)
            weights = LossWeights(lambda_g=config.sparsity_weight)
            out, _ = model_forward(params, data.images, data.scene.cameras, config,
                                   noise_seed=0)
            plan = out.plan
            labels = ray_labels(data.scene, plan.bundle)
            rows = np.arange(plan.bundle.count)

            def loss_only():
                parts, _, _ = scene_step(params, data, config, weights, rows=rows,
                                         noise_seed=0, plan=plan, labels=labels,
                                         with_grads=False)
                return parts["total"]

            _, grads, _ = scene_step(params, data, config, weights, rows=rows,
                                     noise_seed=0, plan=plan, labels=labels)
            rng = np.random.default_rng(100 + seed)
            worst = 0.0
            for name in sorted(grads):
                p, v = fd_direction(params, name, rng)
                analytic = float(np.sum(grads[name] * v))
                p.value += eps * v
                up = loss_only()
                p.value -= 2 * eps * v
                down = loss_only()
                p.value += eps * v
                numeric = (up - down) / (2 * eps)
                err = abs(analytic - numeric) / max(abs(numeric), floor)
                worst = max(worst, err)
                assert err < tol, f"{name}: analytic {analytic} vs numeric {numeric}"
            assert worst < tol
