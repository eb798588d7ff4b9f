import math

import numpy as np
import pytest

from scisplat.core import Intrinsics, look_at, se3_exp
from scisplat.errors import Diverged, ShapeMismatch, ValidationError
from scisplat.gaussians import PARAM_GROUPS, GaussianCloud
from scisplat.grad import CloudGradients
from scisplat.init_protocol import PoseSet
from scisplat.render import render_views
from scisplat.sci_forward import Measurement, generate_masks, synthesize_measurement
from scisplat.train import (
    TrainConfig,
    TrainState,
    adam_step,
    exp_schedule,
    gaussian_rates,
    mcmc_densify,
    pose_rate,
    train,
)

K = Intrinsics(24.0, 24.0, 8.0, 8.0)


def blob(color=(0.5, 0.5, 0.5), n=1, seed=0):
    rng = np.random.default_rng(seed)
    means = np.zeros((n, 3)) if n == 1 else rng.uniform(-0.5, 0.5, (n, 3)) * [1, 1, 0.1]
    return GaussianCloud.from_attributes(
        means, np.full((n, 3), 0.6 if n == 1 else 0.2), np.tile([1.0, 0, 0, 0], (n, 1)),
        np.full(n, 0.9), np.tile(color, (n, 1)),
    )


def cameras(n):
    return PoseSet([look_at([0.05 * i, 0.0, -3.0], [0.0, 0.0, 0.0]) for i in range(n)], K)


class TestSchedules:
    def test_pose_rate_endpoints(self):
        cfg = TrainConfig(iterations=3000)
        assert pose_rate(cfg, 0) == pytest.approx(5e-4, rel=1e-12)
        assert pose_rate(cfg, 2999) == pytest.approx(2.5e-7, rel=0.01)

    def test_exp_schedule_is_geometric(self):
        mid = exp_schedule(1e-2, 1e-4, 50, 101)
        assert mid == pytest.approx(1e-3, rel=1e-12)
        assert exp_schedule(1.0, 0.5, 0, 1) == 1.0

    def test_sqrt_batch_scaling(self):
        cfg = TrainConfig()
        r8, r1 = gaussian_rates(cfg, 0, 8), gaussian_rates(cfg, 0, 1)
        for name in PARAM_GROUPS:
            assert r8[name] == pytest.approx(math.sqrt(8) * r1[name], rel=1e-12)
        assert gaussian_rates(TrainConfig(sqrt_batch_scaling=False), 0, 8) == r1


class TestAdam:
    def test_zero_gradients_change_nothing(self):
        cloud = blob(n=4)
        poses = cameras(2)
        state = TrainState.create(cloud.copy(), poses.copy())
        adam_step(state, CloudGradients.zeros(4), np.zeros((2, 6)), TrainConfig(), 2)
        for name in PARAM_GROUPS:
            np.testing.assert_allclose(getattr(state.cloud, name), getattr(cloud, name), atol=1e-15)
        for a, b in zip(state.poses.poses, poses.poses):
            assert a.allclose(b, atol=0)

    def test_first_step_moves_by_rate(self):
        cloud = blob(n=3)
        state = TrainState.create(cloud.copy(), cameras(1))
        grads = CloudGradients.zeros(3)
        grads.color_logits[:] = 0.7
        grads.color_logits[1] = -3.0
        cfg = TrainConfig()
        adam_step(state, grads, None, cfg, 1)
        step = state.cloud.color_logits - cloud.color_logits
        np.testing.assert_allclose(np.abs(step), cfg.lr_color, rtol=1e-6)
        assert (step[1] > 0).all() and (step[0] < 0).all()

    def test_pose_update_is_left_multiplied(self):
        poses = cameras(1)
        state = TrainState.create(blob(), poses.copy())
        g = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
        cfg = TrainConfig()
        adam_step(state, CloudGradients.zeros(1), g, cfg, 1)
        expected = se3_exp([0, 0, 0, -cfg.pose_lr_start, 0, 0]) @ poses.poses[0]
        assert state.poses.poses[0].allclose(expected, atol=1e-10)

    def test_frozen_poses(self):
        poses = cameras(1)
        state = TrainState.create(blob(), poses.copy())
        adam_step(state, CloudGradients.zeros(1), np.ones((1, 6)), TrainConfig(optimize_poses=False), 1)
        assert state.poses.poses[0] == poses.poses[0]

    def test_quaternions_stay_normalized(self):
        state = TrainState.create(blob(n=5), cameras(1))
        grads = CloudGradients.zeros(5)
        grads.quats[:] = np.random.default_rng(0).normal(size=(5, 4))
        adam_step(state, grads, None, TrainConfig(lr_quats=0.2), 1)
        np.testing.assert_allclose(np.linalg.norm(state.cloud.quats, axis=1), 1.0, atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"lambda_dssim": 1.5}, {"lr_means": 0.0}, {"loss_mode": "huber"}, {"densify": "split"}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(iterations=10, seed=4)
        assert TrainConfig(**cfg.to_dict()) == cfg


def toy_problem(n=2, color=(0.2, 0.7, 0.4), size=16):
    target = blob(color)
    poses = cameras(n)
    frames, _ = render_views(target, poses.poses, K, size, size)
    masks = generate_masks(size, size, n, 0.5, 0)
    return synthesize_measurement(np.stack(frames), masks), masks, poses


class TestTrain:
    def test_zero_iterations_returns_inputs(self):
        y, masks, poses = toy_problem()
        cloud = blob()
        state = train(y, masks, cloud, poses, TrainConfig(iterations=0))
        np.testing.assert_array_equal(state.cloud.means, cloud.means)
        assert state.loss_history == []
        assert state.poses.poses == poses.poses

    def test_does_not_mutate_inputs(self):
        y, masks, poses = toy_problem()
        cloud = blob()
        before = cloud.copy()
        train(y, masks, cloud, poses, TrainConfig(iterations=5, densify="none"))
        np.testing.assert_array_equal(cloud.color_logits, before.color_logits)

    def test_single_gaussian_color_recovery(self):
        y, masks, poses = toy_problem()
        cfg = TrainConfig(
            iterations=300, densify="none", optimize_poses=False, lr_color=2e-2, lr_means=1e-9,
            lr_means_final=1e-9, lr_log_scales=1e-9, lr_quats=1e-9, lr_opacity=1e-9, lambda_o=0.0, lambda_s=0.0,
        )
        state = train(y, masks, blob(), poses, cfg)
        np.testing.assert_allclose(state.cloud.colors[0], [0.2, 0.7, 0.4], atol=0.01)
        assert state.loss_history[-1] < 0.1 * state.loss_history[0]

    def test_deterministic(self):
        y, masks, poses = toy_problem()
        cfg = TrainConfig(iterations=30, densify="mcmc", densify_from=10, densify_interval=10, seed=3)
        a = train(y, masks, blob(n=6), poses, cfg)
        b = train(y, masks, blob(n=6), poses, cfg)
        np.testing.assert_array_equal(a.cloud.means, b.cloud.means)
        assert a.loss_history == b.loss_history

    def test_nan_measurement_diverges(self):
        y, masks, poses = toy_problem()
        bad = y.image.copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises(Diverged):
            train(Measurement(bad), masks, blob(), poses, TrainConfig(iterations=3))

    def test_pose_count_mismatch(self):
        y, masks, poses = toy_problem()
        with pytest.raises(ShapeMismatch):
            train(y, masks, blob(), cameras(3), TrainConfig(iterations=1))

    def test_empty_cloud(self):
        y, masks, poses = toy_problem()
        with pytest.raises(ValidationError):
            train(y, masks, GaussianCloud.empty(), poses, TrainConfig(iterations=1))

    @pytest.mark.parametrize("mode", ["mcmc", "adc"])
    def test_cap_and_state_shapes(self, mode):
        y, masks, poses = toy_problem()
        counts = []
        cfg = TrainConfig(
            iterations=40, densify=mode, densify_from=5, densify_until=40, densify_interval=5, max_gaussians=12,
            adc_grad_threshold=1e-12, growth_fraction=0.2,
        )

        def check(state):
            counts.append(len(state.cloud))
            for name in PARAM_GROUPS:
                assert state.m[name].shape == getattr(state.cloud, name).shape

        train(y, masks, blob(n=8), poses, cfg, callback=check)
        assert max(counts) <= 12
        assert max(counts) > 8


def test_mcmc_densify_resets_moved_state():
    state = TrainState.create(blob(n=10), cameras(1), seed=0)
    for name in PARAM_GROUPS:
        state.m[name][:] = 1.0
        state.v[name][:] = 1.0
    state.cloud.opacity_logits[:3] = -10.0
    mcmc_densify(state, TrainConfig(max_gaussians=20))
    assert len(state.cloud) == 10  # floor(1.05 * 10) adds nothing
    for name in PARAM_GROUPS:
        assert not state.m[name][:3].any()
    assert state.densify_log[-1]["relocated"] >= 3
