import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lensfield.grad import (
    StaleTapeError,
    aperture_gradient,
    aperture_gradients,
    backward_pixels,
    backward_ray,
    fd_oracle,
    focus_direction_jacobian,
    focus_gradient,
    pixel_loss_closure,
    relative_error,
    ring_identity,
    write_gradcheck_csv,
)
from lensfield.gradcheck import TOLERANCE, run_probes
from lensfield.optics import (
    Ray,
    RayBounds,
    concentric_disk,
    disk_offsets,
    lens_rays,
    pixel_seeds,
    ring_offsets,
)
from lensfield.render import RenderConfig, render_pixel, render_pixels, render_ray, trace_rays

from conftest import axis_camera, random_field

CFG = RenderConfig(rays_per_pixel=8, step_size=0.02, bounds=RayBounds(0.0, 8.0))


def tape_loss(field, ray, g, offset=0.3):
    return float(render_ray(field, ray, CFG, stratum=(0, 1, offset)).color @ g)


def raw_loss(field, o, d, g, offset=0.3):
    # the marcher accepts any direction; sample distances stay fixed in t
    return float(trace_rays(field, o[None], d[None], [offset], CFG).rgb[0] @ g)


def test_backward_ray_matches_fd_on_parameters(rfield):
    rng = np.random.default_rng(0)
    ray = Ray(np.array([0.05, -0.1, -3.0]), np.array([0.02, 0.03, 1.0]) / np.linalg.norm([0.02, 0.03, 1.0]))
    g = rng.normal(size=3)
    tape = render_ray(rfield, ray, CFG, stratum=(0, 1, 0.3))
    grads = backward_ray(tape, g, rfield)
    flat = np.abs(grads.params).reshape(-1)
    live = np.flatnonzero(flat > 1e-3 * flat.max())
    for k in rng.choice(live, 20, replace=False):
        idx = np.unravel_index(k, rfield.params.shape)

        def fn(v):
            f2 = rfield.copy()
            f2.params[idx] = v
            return tape_loss(f2, ray, g)

        fd = fd_oracle(fn, float(rfield.params[idx]), 1e-5)
        assert relative_error(grads.params[idx], fd) < 1e-4


def test_backward_ray_ray_gradients_match_fd(rfield):
    g = np.array([0.3, -1.0, 0.6])
    o = np.array([0.1, 0.05, -3.0])
    d = np.array([-0.01, 0.02, 1.0])
    d /= np.linalg.norm(d)
    tape = render_ray(rfield, Ray(o, d), CFG, stratum=(0, 1, 0.3))
    grads = backward_ray(tape, g, rfield)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd_o = (raw_loss(rfield, o + e, d, g) - raw_loss(rfield, o - e, d, g)) / (2 * h)
        fd_d = (raw_loss(rfield, o, d + e, g) - raw_loss(rfield, o, d - e, g)) / (2 * h)
        assert grads.d_origin[a] == pytest.approx(fd_o, rel=1e-3, abs=1e-6)
        assert grads.d_direction[a] == pytest.approx(fd_d, rel=1e-3, abs=1e-6)


def test_fused_pass_agrees_with_per_tape_pass(rfield):
    cam = axis_camera()
    g = np.array([[1.0, -0.5, 0.25]])
    pc = render_pixel(rfield, cam, (30, 34), CFG, view=2)
    ref = np.zeros_like(rfield.params)
    d_dirs = []
    for tape in pc.rays:
        r = backward_ray(tape, g[0] / len(pc.rays), rfield, out=ref)
        d_dirs.append(r.d_direction)
    seeds = pixel_seeds(2, [30], [34])
    batch = render_pixels(rfield, cam, [30.5], [34.5], seeds, CFG)
    np.testing.assert_array_equal(batch.colors[0], pc.rgb)
    grad, _, dd = backward_pixels(rfield, batch, g, CFG)
    np.testing.assert_allclose(grad, ref, atol=1e-12)
    np.testing.assert_allclose(dd[0], np.array(d_dirs), atol=1e-12)


def test_empty_field_has_zero_gradient():
    f = random_field()
    f.params[..., 0] = -60.0
    batch = render_pixels(f, axis_camera(), [31.5], [30.5], pixel_seeds(0, [31], [30]), CFG)
    grad, do, dd = backward_pixels(f, batch, np.ones((1, 3)), CFG)
    assert np.abs(grad).max() < 1e-20
    assert np.abs(dd).max() < 1e-20


def test_stale_tape_rejected(rfield):
    tape = render_ray(rfield, Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0])), CFG)
    rfield.params[0, 0, 0, 0] += 1.0
    rfield.touch()
    with pytest.raises(StaleTapeError):
        backward_ray(tape, np.ones(3), rfield)


def test_zero_adjoint_short_circuits(rfield):
    tape = render_ray(rfield, Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0])), CFG)
    r = backward_ray(tape, np.zeros(3), rfield)
    assert not r.params.any()


# -- focus distance -------------------------------------------------------------


def test_focus_jacobian_matches_fd():
    rng = np.random.default_rng(3)
    o = rng.normal(size=(5, 3))
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ap = o[:, None, :] + rng.normal(scale=0.1, size=(5, 4, 3))
    zf = 2.7
    jac = focus_direction_jacobian(o, d, ap, zf)
    bo = np.broadcast_to(o[:, None], ap.shape)
    bd = np.broadcast_to(d[:, None], ap.shape)
    h = 1e-6
    fd = (lens_rays(bo, bd, ap, zf + h)[1] - lens_rays(bo, bd, ap, zf - h)[1]) / (2 * h)
    np.testing.assert_allclose(jac, fd, atol=1e-8)


def test_centre_ray_has_no_focus_dependence():
    o = np.zeros((1, 3))
    d = np.array([[0.0, 0.0, 1.0]])
    jac = focus_direction_jacobian(o, d, o[:, None, :], 3.0)
    assert not jac.any()


def test_focus_gradient_matches_fd(rfield):
    cam = axis_camera(aperture=0.3, focus=3.2)
    cfg = CFG.replace(rays_per_pixel=16)
    g = np.array([0.7, -0.2, 1.1])
    for px in ((26, 30), (36, 33)):
        loss, seeds = pixel_loss_closure(rfield, cam, px, cfg, g)
        b = render_pixels(rfield, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg)
        _, _, dd = backward_pixels(rfield, b, g[None], cfg)
        ana = focus_gradient(cam, b.base_origins, b.base_dirs, b.apoints, dd)[0]
        fd = fd_oracle(lambda z: loss(cam.replace(focus_distance=z)), cam.focus_distance, 1e-4)
        assert relative_error(ana, fd) < TOLERANCE["focus"]


# -- aperture radius --------------------------------------------------------------


def test_ring_identity_on_a_paraboloid():
    # f = x^2 + y^2: disk mean R^2/2, ring mean R^2, d/dR(disk mean) = R
    for r in (0.1, 0.7, 2.0):
        assert float(ring_identity(r * r, r * r / 2, r)) == pytest.approx(r, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 3))
def test_ring_identity_matches_derivative_of_disk_average(radius, kx, ky, w):
    # polar-grid quadrature of the disk average for a smooth non-radial function
    def fn(x, y):
        return np.sin(kx * x + 0.3) * np.cos(ky * y) + np.exp(-w * x * x)

    th = (np.arange(256) + 0.5) * 2 * np.pi / 256
    nodes, weights = np.polynomial.legendre.leggauss(48)

    def disk_mean(rad):
        rho = (nodes + 1) / 2 * rad
        wr = weights / 2 * rad
        vals = fn(rho[:, None] * np.cos(th), rho[:, None] * np.sin(th)).mean(axis=1)
        return float(np.sum(vals * rho * wr) * 2 / rad**2)

    ring_mean = float(fn(radius * np.cos(th), radius * np.sin(th)).mean())
    fd = fd_oracle(disk_mean, radius, 1e-5)
    ana = float(ring_identity(ring_mean, disk_mean(radius), radius))
    assert ana == pytest.approx(fd, abs=1e-6)


def test_ring_identity_with_sampler_points():
    # the same identity estimated with the package's own disk and ring samplers
    seeds = pixel_seeds(0, [3], [4])
    def fn(p):
        return np.sin(2 * p[..., 0] + 0.1) + p[..., 1] ** 2 * np.cos(p[..., 0])

    r = 0.8
    n = 4096
    disk = fn(r * disk_offsets(seeds, n)[0]).mean()
    ring = fn(r * ring_offsets(seeds, n)[0]).mean()
    disk_up = fn((r + 1e-4) * disk_offsets(seeds, n)[0]).mean()
    disk_dn = fn((r - 1e-4) * disk_offsets(seeds, n)[0]).mean()
    fd = (disk_up - disk_dn) / 2e-4
    assert float(ring_identity(ring, disk, r)) == pytest.approx(fd, rel=2e-2)
    assert concentric_disk(0.5, 0.5) == (0.0, 0.0)


def test_aperture_gradient_matches_fd(rfield):
    cam = axis_camera(aperture=0.25, focus=3.0)
    cfg = CFG.replace(rays_per_pixel=8192)
    g = np.array([1.0, 0.4, -0.3])
    px = (27, 31)
    loss, seeds = pixel_loss_closure(rfield, cam, px, cfg, g)
    b = render_pixels(rfield, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg)
    ana = aperture_gradients(rfield, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg, b.colors,
                             g[None])[0]
    fd = fd_oracle(lambda a: loss(cam.replace(aperture_radius=a)), cam.aperture_radius, 2.5e-4)
    assert abs(fd) > 1e-3
    assert relative_error(ana, fd) < TOLERANCE["aperture"]


def test_scalar_and_batched_aperture_gradient_agree(rfield):
    cam = axis_camera(aperture=0.2)
    pc = render_pixel(rfield, cam, (29, 29), CFG, view=1)
    seeds = pixel_seeds(1, [29], [29])
    g = np.array([0.2, 0.5, -1.0])
    one = aperture_gradient(rfield, cam, (29, 29), CFG, pc, g, view=1)
    many = aperture_gradients(rfield, cam, [29.5], [29.5], seeds, CFG, pc.rgb[None], g[None])[0]
    assert one == pytest.approx(many, rel=1e-12)


def test_zero_aperture_gradient_warns(rfield):
    cam = axis_camera(aperture=0.0)
    pc = render_pixel(rfield, cam, (29, 29), CFG)
    with pytest.warns(RuntimeWarning):
        assert aperture_gradient(rfield, cam, (29, 29), CFG, pc) == 0.0
    with pytest.warns(RuntimeWarning):
        out = aperture_gradients(rfield, cam, [29.5], [29.5], pixel_seeds(0, [29], [29]), CFG,
                                 pc.rgb[None], np.ones((1, 3)))
    assert out.tolist() == [0.0]


# -- oracle helpers ----------------------------------------------------------------


def test_fd_oracle_exact_on_quadratic():
    assert fd_oracle(lambda x: 3 * x * x - x, 2.0, 0.1) == pytest.approx(11.0, rel=1e-12)
    with pytest.raises(ValueError):
        fd_oracle(lambda x: x, 0.0, 0.0)


def test_probe_subset_passes(tmp_path):
    probes = run_probes(3, seed=11, aperture={"n": 4096, "screen_n": 128})
    assert len(probes) == 9
    assert all(p.passed for p in probes), [p.row() for p in probes if not p.passed]
    write_gradcheck_csv(tmp_path / "g.csv", [p.row() for p in probes])
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "probe_id,kind,analytic,fd,rel_err"
    assert len(lines) == 10
