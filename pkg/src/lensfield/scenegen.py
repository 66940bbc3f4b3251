"""Synthetic scenes and defocused multi-view datasets."""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import VoxelField, logit, rebuild_occupancy, softplus_inv
from .imageio import save_image_pair, load_linear
from .optics import Camera, load_cameras, save_cameras
from .render import RenderConfig, render_image

EMPTY_DENSITY = 1e-4


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    density: float
    color: tuple

    def contains(self, x):
        return np.all((x >= np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=-1)

    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    density: float
    color: tuple

    def contains(self, x):
        return np.sum((x - np.asarray(self.center)) ** 2, axis=-1) <= self.radius**2

    def bounds(self):
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius


@dataclass
class SceneSpec:
    name: str
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    primitives: list = dc_field(default_factory=list)

    def validate(self):
        bmin, bmax = np.asarray(self.bbox_min, float), np.asarray(self.bbox_max, float)
        for p in self.primitives:
            if p.density < 0:
                raise ValueError(f"{p}: negative density")
            lo, hi = p.bounds()
            if np.any(lo < bmin - 1e-12) or np.any(hi > bmax + 1e-12):
                raise ValueError(f"{p}: primitive extends outside the scene bbox")


def bake_scene(spec: SceneSpec, resolution=64, empty_density: float = EMPTY_DENSITY) -> VoxelField:
    """Rasterize primitives into corner parameters by 8-point supersampled coverage.

    Later primitives take precedence where they overlap. Corner density is the
    covered fraction times the primitive density; corner color is the mean
    color of the covered sub-samples.
    """
    spec.validate()
    field = VoxelField(resolution, spec.bbox_min, spec.bbox_max)
    shape = field.params.shape[:3]
    cell = field.cell_size
    density = np.zeros(shape)
    color = np.zeros(shape + (3,))
    covered = np.zeros(shape)
    subs = np.array(np.meshgrid([-0.25, 0.25], [-0.25, 0.25], [-0.25, 0.25],
                                indexing="ij")).reshape(3, -1).T
    for sub in subs:
        sd = np.zeros(shape)
        sc = np.zeros(shape + (3,))
        hit = np.zeros(shape, dtype=bool)
        for p in spec.primitives:
            lo, hi = p.bounds()
            # corner index block whose sub-sample can fall inside the primitive
            i0 = np.maximum(np.floor((lo - field.bbox_min) / cell - sub).astype(int), 0)
            i1 = np.minimum(np.ceil((hi - field.bbox_min) / cell - sub).astype(int) + 1, shape)
            if np.any(i1 <= i0):
                continue
            block = tuple(slice(a, b) for a, b in zip(i0, i1))
            axes = [field.bbox_min[k] + (np.arange(i0[k], i1[k]) + sub[k]) * cell[k]
                    for k in range(3)]
            x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            inside = p.contains(x)
            sd[block][inside] = p.density
            sc[block][inside] = p.color
            hit[block] |= inside
        density += sd / 8.0
        color += sc
        covered += hit
    color = np.where(covered[..., None] > 0, color / np.maximum(covered, 1)[..., None], 0.5)
    field.params[..., 0] = softplus_inv(np.maximum(density, empty_density))
    field.params[..., 1:] = logit(np.clip(color, 1e-4, 1.0 - 1e-4))
    return field


def checker_tiles(lo, hi, n, colors, density, axis_pair=(0, 1)):
    """Checkerboard of boxes tiling ``[lo, hi]`` with ``n`` tiles along each of two axes."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    a, b = axis_pair
    out = []
    for i in range(n):
        for j in range(n):
            tlo, thi = lo.copy(), hi.copy()
            tlo[a] = lo[a] + (hi[a] - lo[a]) * i / n
            thi[a] = lo[a] + (hi[a] - lo[a]) * (i + 1) / n
            tlo[b] = lo[b] + (hi[b] - lo[b]) * j / n
            thi[b] = lo[b] + (hi[b] - lo[b]) * (j + 1) / n
            out.append(Box(tuple(tlo), tuple(thi), density, colors[(i + j) % len(colors)]))
    return out


def occluder_scene(density: float = 200.0) -> SceneSpec:
    """Textured floor with an occluding pillar and sphere in front of it.

    The floor checker is fine enough that a few pixels of defocus wipe it out,
    and the pillar edges sit at very different depths than the floor behind them.
    """
    prims = []
    prims += checker_tiles((-0.95, -0.95, -0.95), (0.95, 0.95, -0.8), 12,
                           [(0.9, 0.85, 0.2), (0.1, 0.2, 0.6), (0.8, 0.2, 0.15)], density)
    prims += checker_tiles((-0.3, -0.3, -0.8), (0.0, 0.0, 0.7), 6,
                           [(0.95, 0.95, 0.95), (0.15, 0.5, 0.15)], density, axis_pair=(0, 2))
    prims.append(Box((-0.29, -0.29, -0.8), (-0.01, -0.01, 0.69), density, (0.9, 0.9, 0.9)))
    prims.append(Sphere((0.5, 0.45, -0.45), 0.35, density, (0.85, 0.3, 0.6)))
    prims += checker_tiles((0.3, -0.7, -0.8), (0.7, -0.3, -0.2), 4,
                           [(0.2, 0.8, 0.8), (0.05, 0.05, 0.05)], density, axis_pair=(0, 2))
    return SceneSpec("occluder", (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), prims)


@dataclass
class DatasetSpec:
    n_train: int = 40
    n_val: int = 8
    radius: float = 4.0
    width: int = 128
    height: int = 128
    fov_deg: float = 34.0
    focal_length: float = 0.05
    focus_distance: float = 3.5
    aperture_radius: float | None = 0.25
    f_number: float | None = None
    min_elevation_deg: float = 15.0
    max_elevation_deg: float = 75.0
    gt_rays_per_pixel: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_val < 0 or self.radius <= 0:
            raise ValueError("invalid dataset counts or radius")

    @property
    def aperture(self) -> float:
        if self.aperture_radius is not None:
            return float(self.aperture_radius)
        if self.f_number is None:
            raise ValueError("need aperture_radius or f_number")
        return self.focal_length / (2.0 * self.f_number)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with +z toward ``target`` and +y pointing down."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def hemisphere_positions(count: int, radius: float, min_elev: float, max_elev: float,
                         phase: float = 0.0) -> np.ndarray:
    """Fibonacci spiral on a band of the upper hemisphere."""
    k = np.arange(count) + 0.5
    zlo, zhi = np.sin(np.radians(min_elev)), np.sin(np.radians(max_elev))
    z = zlo + (zhi - zlo) * k / count
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * np.arange(count) + phase
    r = np.sqrt(1.0 - z**2)
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def make_hemisphere_cameras(dataset: DatasetSpec, count: int | None = None,
                            phase: float = 0.0) -> list[Camera]:
    count = dataset.n_train if count is None else count
    fx = 0.5 * dataset.width / np.tan(np.radians(dataset.fov_deg) / 2)
    cams = []
    for c in hemisphere_positions(count, dataset.radius, dataset.min_elevation_deg,
                                  dataset.max_elevation_deg, phase):
        cams.append(Camera(dataset.width, dataset.height, fx, fx, dataset.width / 2,
                           dataset.height / 2, look_at(c), c, dataset.aperture,
                           dataset.focal_length, dataset.focus_distance))
    return cams


# ---------------------------------------------------------------------------
# on-disk datasets


@dataclass
class View:
    name: str
    camera: Camera
    image: np.ndarray
    split: str


@dataclass
class Dataset:
    root: Path
    views: list
    meta: dict

    def split(self, name: str) -> list:
        return [v for v in self.views if v.split == name]

    @property
    def train(self):
        return self.split("train")


def gt_render_config(scene_cfg: RenderConfig, dataset: DatasetSpec) -> RenderConfig:
    return scene_cfg.replace(rays_per_pixel=dataset.gt_rays_per_pixel)


def fabricate_dataset(spec: SceneSpec, dataset: DatasetSpec, cfg: RenderConfig, out_dir,
                      resolution: int = 128, field: VoxelField | None = None,
                      log=print, occupancy_threshold: float = 1e-3) -> Dataset:
    """Render defocused training views plus all-in-focus validation views to ``out_dir``.

    Splits written: ``train`` (defocused), ``train_sharp`` (same poses, pinhole)
    and ``val`` (held-out poses, pinhole).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if field is None:
        field = bake_scene(spec, resolution)
    if cfg.use_occupancy and field.occupancy is None:
        field.occupancy = rebuild_occupancy(field, occupancy_threshold)
    gt_cfg = gt_render_config(cfg, dataset)
    train = make_hemisphere_cameras(dataset)
    val = make_hemisphere_cameras(dataset, dataset.n_val, phase=0.5 + dataset.seed)
    jobs = []
    for k, cam in enumerate(train):
        jobs.append((f"train_{k:03d}", cam, "train"))
        jobs.append((f"train_sharp_{k:03d}", cam.replace(aperture_radius=0.0), "train_sharp"))
    for k, cam in enumerate(val):
        jobs.append((f"val_{k:03d}", cam.replace(aperture_radius=0.0), "val"))
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "scene": spec.name,
        "spec": json.dumps(dataclasses.asdict(dataset)),
        "aperture_radius": repr(dataset.aperture),
        "focus_distance": repr(dataset.focus_distance),
        "focal_length": repr(dataset.focal_length),
        "step_size": repr(cfg.step_size),
        "t_near": repr(cfg.bounds.t_near),
        "t_far": repr(cfg.bounds.t_far),
        "background": " ".join(repr(float(c)) for c in cfg.background),
        "bbox_min": " ".join(repr(float(c)) for c in spec.bbox_min),
        "bbox_max": " ".join(repr(float(c)) for c in spec.bbox_max),
    }
    views = []
    for view_id, (name, cam, split) in enumerate(jobs):
        img, _ = render_image(field, cam, gt_cfg, view=view_id, salt=dataset.seed + 7919)
        try:
            paths = save_image_pair(out / "images", name, "gt", img)
        except OSError as exc:
            raise OSError(f"failed writing images for {name} under {out / 'images'}: {exc}") from exc
        cp[name] = {"split": split, "camera_file": "cameras.txt", "camera": name,
                    "image": str(paths[1].relative_to(out)), "encoding": "linear",
                    "image_png": str(paths[0].relative_to(out)), "png_encoding": "srgb"}
        views.append(View(name, cam, img, split))
        log(f"rendered {name} ({split})")
    save_cameras(out / "cameras.txt", [j[1] for j in jobs], [j[0] for j in jobs])
    with open(out / "manifest.txt", "w", encoding="utf-8") as fh:
        cp.write(fh)
    return Dataset(out, views, dict(cp["dataset"]))


def load_dataset(root) -> Dataset:
    root = Path(root)
    cp = configparser.ConfigParser()
    if not cp.read(root / "manifest.txt", encoding="utf-8"):
        raise FileNotFoundError(root / "manifest.txt")
    views = []
    camera_files = {}
    for name in cp.sections():
        if name == "dataset":
            continue
        sec = cp[name]
        cfile = sec["camera_file"]
        if cfile not in camera_files:
            camera_files[cfile] = load_cameras(root / cfile)
        cam = camera_files[cfile][sec["camera"]]
        views.append(View(name, cam, load_linear(root / sec["image"]), sec["split"]))
    return Dataset(root, views, dict(cp["dataset"]))


def dataset_render_config(ds: Dataset, **kw) -> RenderConfig:
    from .optics import RayBounds

    m = ds.meta
    return RenderConfig(step_size=float(m["step_size"]),
                        bounds=RayBounds(float(m["t_near"]), float(m["t_far"])),
                        background=tuple(float(v) for v in m["background"].split()), **kw)
