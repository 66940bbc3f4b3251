import csv

import numpy as np
import pytest

from lensfield.field import VoxelField
from lensfield.recon import (
    METRIC_COLUMNS,
    ReconConfig,
    TrainData,
    clamp_defocus,
    current_rpp,
    init_state,
    lr_at,
    make_batch,
    run_reconstruction,
    smooth_l1,
    smooth_l1_grad,
    train_step,
    upsample_state,
)
from lensfield.scenegen import dataset_render_config

SMALL = ReconConfig(steps=12, resolution=16, coarse_resolution=8, upsample_fraction=0.5,
                    pixels_per_batch=64, log_every=4, occupancy_warmup=4, occupancy_every=4)


def test_smooth_l1_examples():
    np.testing.assert_allclose(smooth_l1([[0.5, -2.0, 0.0]]), [0.25 + 2.0])
    np.testing.assert_allclose(smooth_l1([[1.0, -1.0, 0.1]]), [2.01])
    np.testing.assert_allclose(smooth_l1_grad([0.5, -2.0, 0.0, 3.0]), [1.0, -1.0, 0.0, 1.0])


def test_smooth_l1_grad_matches_fd_away_from_the_kink():
    x = np.array([-3.2, -0.7, 0.3, 0.99, 1.5])
    h = 1e-7
    fd = np.array([(smooth_l1([[v + h]])[0] - smooth_l1([[v - h]])[0]) / (2 * h) for v in x])
    np.testing.assert_allclose(smooth_l1_grad(x), fd, rtol=1e-6)


def test_lr_schedule():
    cfg = ReconConfig(steps=100, lr=0.3)
    assert cfg.boundaries == (60, 80)
    assert lr_at(0, cfg) == 0.3
    assert lr_at(59, cfg) == 0.3
    assert lr_at(60, cfg) == pytest.approx(0.3 * 0.33)
    assert lr_at(80, cfg) == pytest.approx(0.3 * 0.33**2)
    assert lr_at(99, cfg, base=1e-3) == pytest.approx(1e-3 * 0.33**2)


@pytest.mark.parametrize("bad", [dict(steps=0), dict(rays_per_pixel=0), dict(lr=-1.0),
                                 dict(camera_model="fisheye"), dict(rpp_schedule="random")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ReconConfig(**bad)


def test_batch_size_follows_sample_target(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    cfg = ReconConfig(sample_point_target=262144, rays_per_pixel=16, max_pixels_per_batch=10**6)
    state = init_state(data, cfg)
    state.samples_per_ray = 16.0
    assert len(make_batch(data, state, cfg)) == 1024
    cfg1 = cfg.replace(camera_model="pinhole")
    st1 = init_state(data, cfg1)
    st1.samples_per_ray = 16.0
    assert len(make_batch(data, st1, cfg1)) == 16384


def test_batches_are_seeded(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    a = make_batch(data, init_state(data, SMALL), SMALL)
    b = make_batch(data, init_state(data, SMALL), SMALL)
    assert np.array_equal(a.xs, b.xs) and np.array_equal(a.views, b.views)
    c = make_batch(data, init_state(data, SMALL.replace(seed=1)), SMALL)
    assert not np.array_equal(a.xs, c.xs)
    np.testing.assert_array_equal(a.targets, data.images[a.views, a.ys, a.xs])


def test_doubling_rpp_schedule(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    cfg = SMALL.replace(rpp_schedule="doubling", rays_per_pixel=8)
    state = init_state(data, cfg)
    seen = []
    for epoch in range(6):
        state.pixels_seen = epoch * data.pixel_count
        seen.append(current_rpp(state, data, cfg))
    assert seen == [1, 2, 4, 8, 8, 8]


def test_zero_lr_leaves_parameters_unchanged(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    cfg = SMALL.replace(lr=0.0, defocus_lr=0.0)
    state = init_state(data, cfg)
    before = state.field.params.copy()
    d0 = state.defocus.copy()
    base = dataset_render_config(tiny_dataset)
    train_step(state, make_batch(data, state, cfg), data, cfg, base)
    assert np.array_equal(state.field.params, before)
    assert np.array_equal(state.defocus, d0)


def test_perfect_fit_does_not_drift(tiny_dataset):
    # an empty field renders the background; against background targets the
    # loss and every gradient vanish, so nothing may move
    data = TrainData.from_dataset(tiny_dataset)
    bg = np.array(dataset_render_config(tiny_dataset).background)
    data.images = np.broadcast_to(bg, data.images.shape).copy()
    cfg = SMALL.replace(coarse_resolution=None, use_occupancy=False)
    state = init_state(data, cfg)
    state.field.params[..., 0] = -200.0
    before = state.field.params.copy()
    d0 = state.defocus.copy()
    base = dataset_render_config(tiny_dataset)
    for _ in range(3):
        res = train_step(state, make_batch(data, state, cfg), data, cfg, base)
        assert res.loss == 0.0
    np.testing.assert_array_equal(state.field.params, before)
    np.testing.assert_array_equal(state.defocus, d0)


def test_defocus_clamps():
    class S:
        defocus = np.array([-0.1, 0.01])

    clamp_defocus(S, 0.05)
    assert S.defocus[0] == 0.0
    assert S.defocus[1] > 0.05


def test_non_finite_loss_names_the_pixel(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    cfg = SMALL.replace(use_occupancy=False)
    state = init_state(data, cfg)
    batch = make_batch(data, state, cfg)
    batch.targets[3] = np.nan
    with pytest.raises(FloatingPointError, match=rf"view {batch.views[3]} pixel"):
        train_step(state, batch, data, cfg, dataset_render_config(tiny_dataset))


def test_upsample_keeps_the_render(tiny_dataset):
    data = TrainData.from_dataset(tiny_dataset)
    state = init_state(data, SMALL)
    state.field.params[:] = np.random.default_rng(0).normal(size=state.field.params.shape)
    x = np.random.default_rng(1).uniform(-1, 1, (200, 3))
    s0, c0 = state.field.query(x)
    upsample_state(state, 16)
    assert state.field.resolution == (16, 16, 16)
    assert state.m.size == state.field.params.size
    s1, c1 = state.field.query(x)
    np.testing.assert_allclose(s1, s0, rtol=1e-9)
    np.testing.assert_allclose(c1, c0, rtol=1e-9)


def test_short_run_reduces_loss_and_writes_outputs(tiny_dataset, tmp_path):
    cfg = SMALL.replace(steps=40, pixels_per_batch=256, log_every=1)
    res = run_reconstruction(tiny_dataset, cfg, tmp_path)
    losses = [r["loss"] for r in res.metrics]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])
    assert res.field.resolution == (16, 16, 16)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[-1][0] == "40" and rows[-1][5] != ""
    assert VoxelField.load(tmp_path / "field.lfvf").resolution == (16, 16, 16)
    assert "focus_distance" in (tmp_path / "defocus.txt").read_text()


def test_serial_reruns_are_bitwise_identical(tiny_dataset, tmp_path):
    a = run_reconstruction(tiny_dataset, SMALL, tmp_path / "a")
    b = run_reconstruction(tiny_dataset, SMALL, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "field.lfvf").read_bytes() == (tmp_path / "b" / "field.lfvf").read_bytes()
    for x, y in zip(a.val.images, b.val.images):
        assert np.array_equal(x, y)
