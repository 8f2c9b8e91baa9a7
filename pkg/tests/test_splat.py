import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import random_splat_scene, splat_fd_errors
from rawsplat.camera import CameraModel
from rawsplat.errors import FormatError, ValidationError
from rawsplat.splat import (
    EXACT,
    GaussianCloud,
    RenderSettings,
    anisotropy_stats,
    covariance3d,
    densify_and_prune,
    load_cloud,
    render,
    render_backward,
    save_cloud,
)
from rawsplat.splat.gaussians import inverse_softplus, logit, quat_to_rotmat
from rawsplat.splat.project import perspective_jacobian, project, project_points


def _cam(size=16, f=20.0, rot=np.eye(3), t=(0.0, 0.0, 3.0)):
    return CameraModel(rot, np.asarray(t, float), f, f, (size - 1) / 2, (size - 1) / 2, size, size)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


# -- parameterization -------------------------------------------------------------


def test_covariance_examples():
    ident = np.array([[1.0, 0, 0, 0]])
    np.testing.assert_allclose(covariance3d(ident, np.log([[1.0, 2.0, 3.0]]))[0],
                               np.diag([1.0, 4.0, 9.0]), atol=1e-14)
    q = np.random.default_rng(0).normal(size=(1, 4))
    np.testing.assert_allclose(covariance3d(q, np.log([[0.7] * 3]))[0], 0.49 * np.eye(3),
                               atol=1e-14)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_covariance_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    q, s = rng.normal(size=(1, 4)), rng.uniform(0.05, 3.0, (1, 3))
    cov = covariance3d(q, np.log(s))[0]
    assert np.allclose(cov, cov.T, atol=1e-14)
    np.testing.assert_allclose(np.linalg.eigvalsh(cov), np.sort(s[0] ** 2), rtol=1e-9)


def test_activations():
    cloud = GaussianCloud.from_activated(np.zeros((2, 3)), 0.5, [[0.0], [3.0]], [0.2, 0.9])
    np.testing.assert_allclose(cloud.opacities, [0.2, 0.9])
    np.testing.assert_allclose(cloud.colors[:, 0], [0.0, 3.0], atol=1e-7)
    assert np.all(np.isfinite(cloud.params["color_raw"]))
    np.testing.assert_allclose(cloud.scales, 0.5)
    assert logit(0.5) == 0.0 and inverse_softplus(np.log(2.0)) == pytest.approx(0.0, abs=1e-15)


# -- projection -----------------------------------------------------------------


def test_project_on_axis():
    cam = _cam(f=25.0)
    s, z = 0.1, 3.0
    proj = project(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0, 0, 0]]),
                   np.log([[s, s, s]]), cam)
    np.testing.assert_allclose(proj.mean2d[0], [cam.cx, cam.cy], atol=1e-12)
    expect = np.diag([(25 * s / z) ** 2, (25 * s / z) ** 2]) + 0.3 * np.eye(2)
    np.testing.assert_allclose(proj.cov2d[0], expect, rtol=1e-12)
    assert proj.depth[0] == pytest.approx(z)


def test_project_culls_behind_camera():
    proj = project(np.array([[0.0, 0.0, -4.0]]), np.array([[1.0, 0, 0, 0]]),
                   np.zeros((1, 3)), _cam())
    assert not proj.visible[0]
    cloud = GaussianCloud.from_activated([[0.0, 0.0, -4.0]], 0.2, [[1.0]], 0.9)
    res = render(cloud, _cam())
    assert np.all(res.image == 0) and len(res.trace.order) == 0


def test_perspective_jacobian_fd():
    cam = _cam(f=30.0)
    p = np.random.default_rng(1).uniform([-1, -1, 1], [1, 1, 4], (5, 3))
    jac = perspective_jacobian(p, cam.fx, cam.fy)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (project_points(p + e, cam) - project_points(p - e, cam)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, rtol=1e-6, atol=1e-6)


# -- rendering --------------------------------------------------------------------


def test_empty_cloud_renders_zeros():
    cloud = GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                          np.zeros((0, 1)), np.zeros(0))
    res = render(cloud, _cam())
    assert res.image.shape == (1, 16, 16) and np.all(res.image == 0)


def test_non_finite_rejected():
    cloud = GaussianCloud.from_activated([[0.0, 0.0, 0.0]], 0.2, [[1.0]], 0.5)
    cloud.params["mu"][0, 0] = np.nan
    with pytest.raises(ValidationError):
        render(cloud, _cam())


def test_opaque_gaussian_at_mean():
    cam = _cam()
    # mean projects onto the pixel center (7.5 + 0.5, 7.5 + 0.5) = (8, 8)
    mu = [[0.5 * 3.0 / 20.0, 0.5 * 3.0 / 20.0, 0.0]]
    cloud = GaussianCloud(mu, [[1.0, 0, 0, 0]], np.log([[0.3] * 3]), inverse_softplus([[0.6]]),
                          [20.0])
    img = render(cloud, cam).plane
    assert img[8, 8] == pytest.approx(0.6 * 0.999, rel=1e-9)


def test_two_gaussian_compositing_oracle():
    cam = _cam()
    mu = np.array([[0.05, 0.0, -0.5], [-0.05, 0.05, 0.4]])
    rot = np.array([[1.0, 0, 0, 0], [0.9, 0.1, -0.2, 0.3]])
    log_scale = np.log([[0.3, 0.2, 0.25], [0.25, 0.35, 0.2]])
    colors = np.array([[0.7], [0.2]])
    opac = np.array([0.6, 0.8])
    cloud = GaussianCloud(mu, rot, log_scale, inverse_softplus(colors), logit(opac))
    img = render(cloud, cam, EXACT).plane
    proj = project(mu, rot, log_scale, cam)
    for (v, u) in [(7, 7), (5, 9), (10, 6)]:
        alphas = []
        for i in range(2):
            d = np.array([u, v]) - proj.mean2d[i]
            a, b, c = proj.conic[i]
            alphas.append(opac[i] * math.exp(-0.5 * (a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2)))
        near, far = np.argsort(proj.depth)
        expect = colors[near, 0] * alphas[near] + colors[far, 0] * alphas[far] * (1 - alphas[near])
        assert img[v, u] == pytest.approx(expect, rel=1e-12)


def test_storage_order_invariance():
    cloud, cam = random_splat_scene(3, n=8)
    perm = np.random.default_rng(0).permutation(8)
    shuffled = GaussianCloud(*(cloud.params[k][perm] for k in
                               ("mu", "rot", "log_scale", "color_raw", "opacity")))
    a, b = render(cloud, cam), render(shuffled, cam)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.alpha, b.alpha)


def test_weights_sum_at_most_one_and_non_negative():
    cloud, cam = random_splat_scene(4, n=12)
    cloud.params["color_raw"][:] = inverse_softplus(np.ones((12, 1)))
    res = render(cloud, cam)
    # with unit colors the image is the per-pixel sum of compositing weights
    assert np.all(res.image <= 1.0 + 1e-12) and np.all(res.image >= 0.0)
    np.testing.assert_allclose(res.plane, res.alpha, atol=1e-12)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    cloud, cam = random_splat_scene(seed % 1000, n=5)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    r = quat_to_rotmat(q[None])[0]
    t = rng.normal(size=3)
    p = cloud.params
    moved = GaussianCloud(p["mu"] @ r.T + t,
                          np.array([_quat_mul(q, qi / np.linalg.norm(qi)) for qi in p["rot"]]),
                          p["log_scale"], p["color_raw"], p["opacity"])
    cam2 = CameraModel(cam.rotation @ r.T, cam.translation - cam.rotation @ r.T @ t,
                       cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    a = render(cloud, cam, EXACT).plane
    b = render(moved, cam2, EXACT).plane
    assert np.max(np.abs(a - b)) < 1e-6


def test_render_deterministic():
    cloud, cam = random_splat_scene(5, n=10)
    assert np.array_equal(render(cloud, cam).image, render(cloud, cam).image)


# -- backward ---------------------------------------------------------------------


def test_backward_zero_upstream():
    cloud, cam = random_splat_scene(6)
    res = render(cloud, cam)
    grads = render_backward(cloud, res.trace, np.zeros((16, 16)))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_stale_trace():
    cloud, cam = random_splat_scene(7)
    res = render(cloud, cam)
    cloud.touch()
    with pytest.raises(ValidationError):
        render_backward(cloud, res.trace, np.ones((16, 16)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_finite_difference(seed):
    cloud, cam = random_splat_scene(seed, n=3)
    errs = splat_fd_errors(cloud, cam, EXACT, h=1e-4)
    assert max(errs.values()) < 1e-3, errs


def test_backward_finite_difference_two_channels():
    cloud, cam = random_splat_scene(9, n=4, channels=2)
    errs = splat_fd_errors(cloud, cam, EXACT, h=1e-4)
    assert max(errs.values()) < 1e-3, errs


def test_backward_alpha_gradient():
    cloud, cam = random_splat_scene(10, n=3)
    w = np.random.default_rng(1).normal(size=(16, 16))
    res = render(cloud, cam, EXACT)
    grads = render_backward(cloud, res.trace, np.zeros((1, 16, 16)), w, accumulate_stats=False)
    old = cloud.params["opacity"][1]
    h = 1e-5
    vals = []
    for d in (h, -h):
        cloud.params["opacity"][1] = old + d
        cloud.touch()
        vals.append(float(np.sum(w * render(cloud, cam, EXACT).alpha)))
    cloud.params["opacity"][1] = old
    fd = (vals[0] - vals[1]) / (2 * h)
    assert grads["opacity"][1] == pytest.approx(fd, rel=1e-5)


def test_occluded_gaussian_gets_no_gradient():
    cam = _cam()
    big = np.log([[50.0, 50.0, 0.05]])
    cloud = GaussianCloud(
        [[0, 0, -1.0], [0, 0, -0.8], [0, 0, 0.5]],
        np.tile([1.0, 0, 0, 0], (3, 1)),
        np.concatenate([big, big, np.log([[0.2] * 3])]),
        [[0.5], [0.5], [1.0]],
        [20.0, 20.0, 0.0],
    )
    res = render(cloud, cam)
    grads = render_backward(cloud, res.trace, 2 * res.image)
    for name in grads:
        assert np.all(np.abs(grads[name][2]) < 1e-6), name


def test_backward_accumulates_stats():
    cloud, cam = random_splat_scene(11, n=4)
    res = render(cloud, cam)
    render_backward(cloud, res.trace, np.ones((16, 16)))
    assert np.all(cloud.grad_count[res.trace.order] == 1)
    assert np.all(cloud.grad_accum[res.trace.order] > 0)


# -- density control -------------------------------------------------------------


def test_densify_noop_thresholds():
    cloud, _ = random_splat_scene(12, n=5)
    cloud.grad_accum[:] = 1.0
    cloud.grad_count[:] = 1
    before = {k: v.copy() for k, v in cloud.params.items()}
    densify_and_prune(cloud, math.inf, 1.0, 0.0)
    assert all(np.array_equal(before[k], cloud.params[k]) for k in before)
    assert np.all(cloud.grad_accum == 0)


def test_split_into_two_children():
    cloud = GaussianCloud.from_activated([[0.0, 0.0, 0.0]], [[0.5, 0.4, 0.3]], [[0.5]], 0.7)
    cloud.grad_accum[:] = 10.0
    cloud.grad_count[:] = 1
    densify_and_prune(cloud, 1e-3, 0.1, 0.005)
    assert len(cloud) == 2
    np.testing.assert_allclose(cloud.params["log_scale"], np.log([[0.5, 0.4, 0.3]] * 2) - math.log(1.6))


def test_clone_small_gaussian():
    cloud = GaussianCloud.from_activated([[0.0, 0.0, 0.0]], 0.01, [[0.5]], 0.7)
    cloud.grad_accum[:] = 10.0
    cloud.grad_count[:] = 1
    cloud.mu_grad_accum[:] = [1.0, 0.0, 0.0]
    densify_and_prune(cloud, 1e-3, 0.1, 0.005)
    assert len(cloud) == 2
    assert np.array_equal(cloud.params["log_scale"][0], cloud.params["log_scale"][1])
    assert cloud.params["mu"][1, 0] < 0  # nudged against the positional gradient


def test_prune_threshold():
    cloud = GaussianCloud.from_activated(np.zeros((2, 3)), 0.1, [[0.5], [0.5]], [0.005, 0.02])
    densify_and_prune(cloud, math.inf, 1.0, 0.01)
    assert len(cloud) == 1 and cloud.opacities[0] == pytest.approx(0.02)


def test_max_count_caps_growth():
    cloud, _ = random_splat_scene(13, n=6)
    cloud.grad_accum[:] = np.arange(6) + 1.0
    cloud.grad_count[:] = 1
    densify_and_prune(cloud, 0.0, 10.0, 0.0, max_count=8)
    assert len(cloud) == 8


# -- diagnostics and storage ------------------------------------------------------


def test_anisotropy_examples():
    iso = GaussianCloud.from_activated(np.zeros((4, 3)), 0.3, [[1.0]] * 4, 0.5)
    assert anisotropy_stats(iso)[0] == pytest.approx(1.0)
    one = GaussianCloud.from_activated(np.zeros((1, 3)), [[1.0, 1.0, 10.0]], [[1.0]], 0.5)
    assert anisotropy_stats(one) == pytest.approx((10.0, 10.0, 1))
    with pytest.raises(ValidationError):
        anisotropy_stats(GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                                       np.zeros((0, 1)), np.zeros(0)))


def test_anisotropy_oracle():
    rng = np.random.default_rng(14)
    scales = rng.uniform(0.01, 1.0, (101, 3))
    cloud = GaussianCloud.from_activated(np.zeros((101, 3)), scales, np.ones((101, 1)), 0.5)
    ratios = sorted(max(s) / min(s) for s in scales)
    med, p95, m = anisotropy_stats(cloud)
    assert med == pytest.approx(ratios[50], rel=1e-12)
    pos = 0.95 * 100
    lo = int(pos)
    assert p95 == pytest.approx(ratios[lo] + (pos - lo) * (ratios[lo + 1] - ratios[lo]), rel=1e-12)
    assert m == 101


def test_cloud_round_trip(tmp_path):
    cloud, _ = random_splat_scene(15, n=7, channels=2)
    save_cloud(cloud, tmp_path / "c.gcld")
    back = load_cloud(tmp_path / "c.gcld")
    assert len(back) == 7 and back.channels == 2
    for k, v in cloud.params.items():
        assert np.array_equal(back.params[k], v)
    (tmp_path / "bad.gcld").write_bytes(b"XXXX" + (tmp_path / "c.gcld").read_bytes()[4:])
    with pytest.raises(FormatError):
        load_cloud(tmp_path / "bad.gcld")


def test_rotation_renormalized_by_trainer_helper():
    cloud, _ = random_splat_scene(16, n=4)
    cloud.renormalize_rotations()
    np.testing.assert_allclose(np.linalg.norm(cloud.params["rot"], axis=1), 1.0, atol=1e-12)


def test_truncation_settings():
    cloud, cam = random_splat_scene(17, n=5)
    a = render(cloud, cam, RenderSettings()).plane
    b = render(cloud, cam, EXACT).plane
    # the 3-sigma cutoff drops at most exp(-4.5) of each contribution
    assert np.max(np.abs(a - b)) < 0.05 and not np.array_equal(a, b)
