import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_render, random_cloud
from scipy.spatial.transform import Rotation

from scisplat.core import Intrinsics, Pose, look_at
from scisplat.errors import Culled
from scisplat.gaussians import (
    GaussianCloud,
    covariance_from_scale_rotation,
    logit,
    quat_to_rotmat,
)
from scisplat.render import (
    BLUR,
    composite_dense,
    project_cloud,
    project_gaussian,
    rasterize,
    render_views,
)


@pytest.fixture
def camera():
    return look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]), Intrinsics(20.0, 20.0, 8.0, 8.0)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(covariance_from_scale_rotation(np.zeros(3), np.array([1.0, 0, 0, 0])), np.eye(3))

    def test_axis_permutation(self):
        q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
        cov = covariance_from_scale_rotation(np.log([1.0, 2.0, 3.0]), q)
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 9.0]), atol=1e-12)

    def test_random_spd(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((1000, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        cov = covariance_from_scale_rotation(rng.uniform(-3, 1, (1000, 3)), q)
        np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12)
        assert (np.linalg.eigvalsh(cov).min(axis=1) > 0).all()

    def test_quat_matches_scipy(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((50, 4))
        ref = Rotation.from_quat(np.roll(q, -1, axis=1)).as_matrix()
        np.testing.assert_allclose(quat_to_rotmat(q), ref, atol=1e-12)


class TestProjectGaussian:
    def test_isotropic_on_axis(self):
        s, z, f = 0.1, 2.0, 50.0
        cloud = GaussianCloud.from_attributes([[0.0, 0, 0]], [[s, s, s]], [[1.0, 0, 0, 0]], [0.5], [[0.5] * 3])
        pose = Pose(np.eye(3), [0.0, 0.0, z])
        proj = project_gaussian(cloud, 0, pose, Intrinsics(f, f, 10.0, 10.0))
        np.testing.assert_allclose(proj.cov2d, ((f * s / z) ** 2 + BLUR) * np.eye(2), atol=1e-12)
        np.testing.assert_allclose(proj.center, [10.0, 10.0])
        assert proj.depth == z
        assert proj.radius == pytest.approx(3 * np.sqrt((f * s / z) ** 2 + BLUR))

    def test_focal_scaling(self):
        cloud = GaussianCloud.from_attributes([[0.0, 0, 0]], [[0.2, 0.2, 0.2]], [[1.0, 0, 0, 0]], [0.5], [[0.5] * 3])
        pose = Pose(np.eye(3), [0.0, 0.0, 2.0])
        a = project_gaussian(cloud, 0, pose, Intrinsics(30.0, 30.0, 0.0, 0.0)).cov2d[0, 0] - BLUR
        b = project_gaussian(cloud, 0, pose, Intrinsics(60.0, 30.0, 0.0, 0.0)).cov2d[0, 0] - BLUR
        assert np.sqrt(b) == pytest.approx(2 * np.sqrt(a))

    @pytest.mark.parametrize("z", [-1.0, 0.0, 0.01])
    def test_behind_near_plane_culled(self, z):
        cloud = GaussianCloud.from_attributes([[0.0, 0, z]], [[0.1] * 3], [[1.0, 0, 0, 0]], [0.5], [[0.5] * 3])
        with pytest.raises(Culled):
            project_gaussian(cloud, 0, Pose.identity(), Intrinsics(10.0, 10.0, 0.0, 0.0))

    def test_tiny_gaussian_keeps_blur_footprint(self):
        # the blur floor alone gives a 3 * sqrt(0.3) px radius, above the cull limit
        cloud = GaussianCloud.from_attributes([[0.0, 0, 1.0]], [[1e-6] * 3], [[1.0, 0, 0, 0]], [0.5], [[0.5] * 3])
        proj = project_gaussian(cloud, 0, Pose.identity(), Intrinsics(0.5, 0.5, 0.0, 0.0))
        assert proj.radius == pytest.approx(3 * np.sqrt(BLUR))


class TestRasterize:
    def test_empty_cloud(self, camera):
        pose, k = camera
        img, aux = rasterize(GaussianCloud.empty(), pose, k, 16, 16)
        assert img.shape == (16, 16, 3) and not img.any()
        assert (aux.final_t == 1).all()

    def test_transparent_cloud(self, camera):
        pose, k = camera
        cloud = random_cloud(np.random.default_rng(0), 5)
        cloud.opacity_logits[:] = -50.0
        assert not rasterize(cloud, pose, k, 16, 16)[0].any()

    def test_single_gaussian_center(self):
        k = Intrinsics(20.0, 20.0, 8.0, 8.0)
        pose = Pose(np.eye(3), [0.0, 0.0, 3.0])
        # centered exactly on pixel (8, 8)'s center
        cloud = GaussianCloud.from_attributes([[0.5 * 3 / 20, 0.5 * 3 / 20, 0.0]], [[0.2] * 3], [[1.0, 0, 0, 0]], [0.8], [[0.3, 0.6, 0.9]])
        img, _ = rasterize(cloud, pose, k, 16, 16)
        np.testing.assert_allclose(img[8, 8], 0.8 * np.array([0.3, 0.6, 0.9]), atol=1e-12)

    def test_front_occludes(self):
        k = Intrinsics(20.0, 20.0, 8.0, 8.0)
        pose = Pose(np.eye(3), [0.0, 0.0, 3.0])
        cloud = GaussianCloud(
            np.array([[0.0, 0, 0.0], [0.0, 0, 0.5]]),
            np.log(np.full((2, 3), 0.5)),
            np.array([[1.0, 0, 0, 0]] * 2),
            logit(np.array([0.9999, 0.9])),
            logit(np.array([[1 - 1e-9, 1e-9, 1e-9], [1e-9, 1e-9, 1 - 1e-9]])),
        )
        cloud.means[:, :2] = 0.5 * 3 / 20  # on pixel (8, 8)'s center
        cloud.means[1, :2] *= 3.5 / 3
        img, _ = rasterize(cloud, pose, k, 16, 16)
        np.testing.assert_allclose(img[8, 8], [1.0, 0.0, 0.0], atol=1e-3 + 1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed, camera):
        pose, k = camera
        cloud = random_cloud(np.random.default_rng(seed), 8)
        img, _ = rasterize(cloud, pose, k, 16, 16)
        np.testing.assert_allclose(img, brute_force_render(cloud, pose, k, 16, 16), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_tiled_equals_dense(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 40, spread=1.5)
        pose = look_at(rng.normal(0, 0.3, 3) + [0, 0, -3.5], [0.0, 0.0, 0.0])
        k = Intrinsics(30.0, 28.0, 20.0, 17.0)
        img, aux = rasterize(cloud, pose, k, 37, 41, tile_size=16)
        dense, final_t = composite_dense(aux.proj, 37, 41)
        assert np.abs(img - dense).max() <= 1e-12
        np.testing.assert_allclose(aux.final_t, final_t, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 12)
        pose, k = look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]), Intrinsics(20.0, 20.0, 8.0, 8.0)
        perm = rng.permutation(12)
        a, _ = rasterize(cloud, pose, k, 16, 16)
        b, _ = rasterize(cloud.subset(perm), pose, k, 16, 16)
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 15)
        img, aux = rasterize(cloud, look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]), Intrinsics(20.0, 20.0, 8.0, 8.0), 16, 16)
        assert img.min() >= 0 and img.max() <= 1
        assert (aux.final_t >= 0).all() and (aux.final_t <= 1).all()
        # weights sum to 1 - T, never above 1
        _, t = composite_dense(aux.proj, 16, 16)
        np.testing.assert_allclose(t, aux.final_t, atol=1e-12)

    def test_tile_size_invisible(self, camera):
        pose, k = camera
        cloud = random_cloud(np.random.default_rng(3), 20)
        ref, _ = rasterize(cloud, pose, k, 16, 16, tile_size=16)
        for tile in (1, 4, 7):
            np.testing.assert_allclose(rasterize(cloud, pose, k, 16, 16, tile_size=tile)[0], ref, atol=1e-12)


class TestRenderViews:
    def test_one_pose(self, camera):
        pose, k = camera
        cloud = random_cloud(np.random.default_rng(0), 5)
        frames, auxes = render_views(cloud, [pose], k, 16, 16)
        assert len(frames) == 1
        np.testing.assert_array_equal(frames[0], rasterize(cloud, pose, k, 16, 16)[0])

    def test_identical_poses(self, camera):
        pose, k = camera
        cloud = random_cloud(np.random.default_rng(1), 5)
        frames, _ = render_views(cloud, [pose] * 8, k, 16, 16)
        assert len(frames) == 8
        for f in frames[1:]:
            np.testing.assert_array_equal(f, frames[0])

    def test_threads_do_not_change_output(self, camera):
        _, k = camera
        cloud = random_cloud(np.random.default_rng(2), 30)
        poses = [look_at([0.1 * i, 0.0, -3.0], [0.0, 0.0, 0.0]) for i in range(4)]
        a, _ = render_views(cloud, poses, k, 16, 16, threads=1)
        b, _ = render_views(cloud, poses, k, 16, 16, threads=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_projected_sorted(self, camera):
        pose, k = camera
        proj = project_cloud(random_cloud(np.random.default_rng(4), 30), pose, k)
        assert (np.diff(proj.depths) >= 0).all()
