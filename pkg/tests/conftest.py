import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from lensfield.field import VoxelField, rebuild_occupancy
from lensfield.optics import Camera, RayBounds
from lensfield.render import RenderConfig
from lensfield.scenegen import (
    DatasetSpec,
    fabricate_dataset,
    load_dataset,
    look_at,
    occluder_scene,
)

# the full-size training set used by the reconstruction tests
OCCLUDER_RENDER = RenderConfig(step_size=0.01, bounds=RayBounds(2.0, 6.5), use_occupancy=True)
OCCLUDER_DATASET = DatasetSpec()


def axis_camera(size=64, f_px=60.0, z=-3.5, aperture=0.3, focus=3.0):
    return Camera(size, size, f_px, f_px, size / 2, size / 2, np.eye(3), [0.0, 0.0, z],
                  aperture_radius=aperture, focal_length=0.05, focus_distance=focus)


def random_field(seed=0, res=6, fade=True):
    rng = np.random.default_rng(seed)
    f = VoxelField((res,) * 3)
    f.params[..., 0] = rng.normal(0.5, 1.0, f.params.shape[:3])
    f.params[..., 1:] = rng.normal(0.0, 1.5, f.params.shape[:3] + (3,))
    if fade:
        d = f.params[..., 0]
        d[[0, -1]] = -12.0
        d[:, [0, -1]] = -12.0
        d[:, :, [0, -1]] = -12.0
    return f


@pytest.fixture
def camera():
    return axis_camera()


@pytest.fixture
def rfield():
    return random_field()


def _source_digest():
    # datasets depend on the renderer and scene code; editing them invalidates the cache
    import lensfield

    pkg = Path(lensfield.__file__).parent
    h = hashlib.sha1()
    for name in ("scenegen.py", "render.py", "optics.py", "field.py", "_kernels.py"):
        h.update((pkg / name).read_bytes())
    return h.hexdigest()


def _cached_dataset(request, key, scene, dataset, cfg):
    blob = json.dumps([key, repr(dataset), repr(cfg), _source_digest()])
    tag = hashlib.sha1(blob.encode()).hexdigest()[:12]
    root = Path(request.config.cache.mkdir(f"lensfield-{key}-{tag}"))
    if not (root / "manifest.txt").exists():
        fabricate_dataset(scene, dataset, cfg, root, log=lambda m: None)
    return load_dataset(root)


@pytest.fixture(scope="session")
def occluder_dataset(request):
    """Full 40-view occluder set, rendered once and kept in the pytest cache."""
    return _cached_dataset(request, "occluder", occluder_scene(), OCCLUDER_DATASET,
                           OCCLUDER_RENDER)


@pytest.fixture(scope="session")
def tiny_dataset(request):
    spec = DatasetSpec(n_train=4, n_val=2, width=24, height=24, gt_rays_per_pixel=8)
    return _cached_dataset(request, "tiny", occluder_scene(), spec, OCCLUDER_RENDER)


@pytest.fixture(scope="session")
def recon_cache():
    """Reconstruction results shared between test modules, keyed by config."""
    return {}


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
