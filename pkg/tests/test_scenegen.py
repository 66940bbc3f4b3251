import numpy as np
import pytest

from lensfield.field import softplus
from lensfield.optics import coc_pixels
from lensfield.scenegen import (
    EMPTY_DENSITY,
    Box,
    DatasetSpec,
    SceneSpec,
    Sphere,
    bake_scene,
    checker_tiles,
    dataset_render_config,
    hemisphere_positions,
    load_dataset,
    look_at,
    make_hemisphere_cameras,
    occluder_scene,
)


def test_bake_box_interior_and_exterior():
    spec = SceneSpec("box", primitives=[Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 50.0,
                                            (0.2, 0.4, 0.6))])
    f = bake_scene(spec, 8)
    sigma = softplus(f.params[..., 0])
    assert sigma[4, 4, 4] == pytest.approx(50.0, rel=1e-9)
    assert sigma[0, 0, 0] == pytest.approx(EMPTY_DENSITY, rel=1e-9)
    color = 1 / (1 + np.exp(-f.params[4, 4, 4, 1:]))
    np.testing.assert_allclose(color, [0.2, 0.4, 0.6], rtol=1e-9)


def test_partial_coverage_scales_density():
    # box face through corner plane x = 0 covers half the sub-samples of that layer
    spec = SceneSpec("half", primitives=[Box((0.0, -1, -1), (1, 1, 1), 80.0, (0.5, 0.5, 0.5))])
    f = bake_scene(spec, 8)
    sigma = softplus(f.params[..., 0])
    assert sigma[4, 4, 4] == pytest.approx(40.0, rel=1e-9)
    assert sigma[6, 4, 4] == pytest.approx(80.0, rel=1e-9)


def test_later_primitives_win():
    a = Box((-1, -1, -1), (1, 1, 1), 10.0, (1.0, 0.0, 0.0))
    b = Sphere((0, 0, 0), 0.5, 30.0, (0.0, 0.0, 1.0))
    f = bake_scene(SceneSpec("x", primitives=[a, b]), 8)
    assert softplus(f.params[4, 4, 4, 0]) == pytest.approx(30.0, rel=1e-9)
    assert softplus(f.params[1, 1, 1, 0]) == pytest.approx(10.0, rel=1e-9)


def test_scene_validation():
    with pytest.raises(ValueError):
        bake_scene(SceneSpec("x", primitives=[Box((0, 0, 0), (2, 0.5, 0.5), 1.0, (1, 1, 1))]), 4)
    with pytest.raises(ValueError):
        bake_scene(SceneSpec("x", primitives=[Sphere((0, 0, 0), 0.2, -1.0, (1, 1, 1))]), 4)


def test_checker_tiles_cover_the_rectangle():
    tiles = checker_tiles((0, 0, 0), (1, 2, 0.1), 4, [(1, 0, 0), (0, 1, 0)], 5.0)
    assert len(tiles) == 16
    area = sum((t.hi[0] - t.lo[0]) * (t.hi[1] - t.lo[1]) for t in tiles)
    assert area == pytest.approx(2.0)
    assert tiles[0].color != tiles[1].color


def test_look_at_frame():
    c = np.array([3.0, -2.0, 1.5])
    r = look_at(c)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    np.testing.assert_allclose(r[:, 2], -c / np.linalg.norm(c), atol=1e-12)
    # image +y points down in world
    assert r[2, 1] < 0


def test_hemisphere_band():
    p = hemisphere_positions(40, 4.0, 15.0, 75.0)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 4.0)
    elev = np.degrees(np.arcsin(p[:, 2] / 4.0))
    assert elev.min() >= 15.0 and elev.max() <= 75.0
    assert len({tuple(np.round(x, 9)) for x in p}) == 40


def test_dataset_aperture_from_f_number():
    assert DatasetSpec(aperture_radius=None, f_number=2.0).aperture == pytest.approx(0.0125)
    with pytest.raises(ValueError):
        DatasetSpec(aperture_radius=None).aperture
    with pytest.raises(ValueError):
        DatasetSpec(n_train=0)


def test_occluder_scene_defocus_reaches_a_few_pixels():
    spec = DatasetSpec()
    scene = occluder_scene()
    pts = []
    for p in scene.primitives:
        lo, hi = p.bounds()
        pts += [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    pts = np.array(pts)
    worst = []
    for cam in make_hemisphere_cameras(spec):
        depth = (pts - cam.center) @ cam.rotation[:, 2]
        worst.append(coc_pixels(cam, depth).max())
    assert 3.0 <= max(worst) <= 7.0


def test_fabricated_dataset_layout(tiny_dataset):
    ds = tiny_dataset
    assert len(ds.split("train")) == 4
    assert len(ds.split("train_sharp")) == 4
    assert len(ds.split("val")) == 2
    for v in ds.views:
        assert v.image.shape == (24, 24, 3)
        assert np.isfinite(v.image).all()
        assert (v.camera.aperture_radius == 0.0) == (v.split != "train")
    assert (ds.root / "images" / "val_000_gt.png").exists()
    cfg = dataset_render_config(ds)
    assert cfg.step_size == 0.01 and cfg.bounds.t_far == 6.5
    again = load_dataset(ds.root)
    for a, b in zip(ds.views, again.views):
        assert np.array_equal(a.image, b.image)


def test_training_views_are_blurrier_than_sharp_twins(tiny_dataset):
    def gradient_energy(img):
        return np.mean(np.abs(np.diff(img, axis=0))) + np.mean(np.abs(np.diff(img, axis=1)))

    blurred = [gradient_energy(v.image) for v in tiny_dataset.split("train")]
    sharp = [gradient_energy(v.image) for v in tiny_dataset.split("train_sharp")]
    assert np.mean(blurred) < np.mean(sharp)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
