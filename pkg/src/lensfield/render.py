"""Forward volume rendering through pinhole and thin-lens cameras.

All color math is in linear RGB. A pixel's color is the equal-weight mean of
its aperture rays; with a zero aperture radius a pixel is rendered by exactly
one pinhole ray, so both code paths produce identical bits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .field import VoxelField
from .optics import (
    DEGENERATE_EPS,
    Camera,
    Ray,
    RayBounds,
    aperture_points,
    disk_offsets,
    lens_rays,
    pinhole_rays,
    pixel_jitter,
    pixel_seeds,
    ring_offsets,
    stratum_offsets,
)

_NO_OCC = np.zeros(1, dtype=np.uint8)


@dataclass(frozen=True)
class RenderConfig:
    rays_per_pixel: int = 1
    step_size: float = 0.01
    bounds: RayBounds = RayBounds(0.0, 10.0)
    max_samples_per_ray: int = 1024
    background: tuple = (0.0, 0.0, 0.0)
    use_occupancy: bool = False
    cutoff: float = 1e-4

    def __post_init__(self):
        if self.rays_per_pixel < 1:
            raise ValueError("rays_per_pixel must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_samples_per_ray < 1:
            raise ValueError("max_samples_per_ray must be >= 1")

    def replace(self, **kw) -> "RenderConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class RayTape:
    """Quadrature record of one ray, enough to run the reverse pass."""

    origin: np.ndarray
    direction: np.ndarray
    offset: float
    t: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    color: np.ndarray
    opacity: float
    step: float
    version: int

    @property
    def x(self) -> np.ndarray:
        return self.origin + self.t[:, None] * self.direction


@dataclass
class PixelColor:
    rgb: np.ndarray
    alpha: float
    rays: list = dc_field(default_factory=list)
    apertures: np.ndarray | None = None


@dataclass
class RayBatch:
    rgb: np.ndarray
    alpha: np.ndarray
    count: np.ndarray


@dataclass
class PixelBatch:
    """Rays of a set of pixels from one camera, shape ``(B, n, ...)``."""

    colors: np.ndarray
    alpha: np.ndarray
    ray_rgb: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    offsets: np.ndarray
    base_origins: np.ndarray
    base_dirs: np.ndarray
    apoints: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.origins.shape[1]


def _occupancy_flags(field: VoxelField, cfg: RenderConfig):
    occ = getattr(field, "occupancy", None)
    if cfg.use_occupancy and occ is not None:
        return occ.kernel_flags(), True
    return _NO_OCC, False


def _geometry(field: VoxelField):
    return (field.params.reshape(-1), field.dims, field.bbox_min, field.bbox_max,
            1.0 / field.cell_size)


def trace_rays(field: VoxelField, origins, dirs, offsets, cfg: RenderConfig,
               record: bool = False):
    """Composite a flat list of rays. Returns a :class:`RayBatch` (and tapes)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64).reshape(-1)
    nr = origins.shape[0]
    rgb = np.empty((nr, 3))
    alpha = np.empty(nr)
    count = np.empty(nr, dtype=np.int64)
    bad = np.zeros((nr, 4))
    m = cfg.max_samples_per_ray if record else 1
    rows = nr if record else 1
    rec = (np.zeros((rows, m)), np.zeros((rows, m)), np.zeros((rows, m, 3)),
           np.zeros((rows, m)), np.zeros((rows, m)))
    occ, use_occ = _occupancy_flags(field, cfg)
    bg = np.asarray(cfg.background, dtype=np.float64)
    _kernels.march_forward(*_geometry(field), occ, use_occ, origins, dirs, offsets,
                           float(cfg.bounds.t_near), float(cfg.bounds.t_far),
                           float(cfg.step_size), int(cfg.max_samples_per_ray), bg,
                           float(cfg.cutoff), rgb, alpha, count, bad, record, *rec)
    if bad[:, 0].any():
        r = int(np.flatnonzero(bad[:, 0])[0])
        raise FloatingPointError(f"non-finite field value at sample position {bad[r, 1:].tolist()}")
    batch = RayBatch(rgb, alpha, count)
    if not record:
        return batch
    tapes = []
    for r in range(nr):
        k = count[r]
        tapes.append(RayTape(origins[r].copy(), dirs[r].copy(), float(offsets[r]),
                             rec[0][r, :k].copy(), rec[1][r, :k].copy(), rec[2][r, :k].copy(),
                             rec[3][r, :k].copy(), rec[4][r, :k].copy(), rgb[r].copy(),
                             float(alpha[r]), float(cfg.step_size), field.version))
    return batch, tapes


def render_ray(field: VoxelField, ray: Ray, cfg: RenderConfig, stratum=(0, 1, 0.0)) -> RayTape:
    """Render one ray; ``stratum = (i, n, jitter)`` sets its marching offset."""
    i, n, jitter = stratum
    offset = (i + jitter) / n
    _, tapes = trace_rays(field, ray.origin[None], ray.direction[None], [offset], cfg,
                          record=True)
    return tapes[0]


def pixel_rays(camera: Camera, xs, ys, seeds, n: int, ring: bool = False):
    """Base rays, aperture points, lens rays and marching offsets for pixels.

    ``xs``/``ys`` are continuous pixel coordinates. Returns arrays shaped
    ``(B, 3)`` for base rays and ``(B, n, ...)`` for per-ray quantities. With a
    zero aperture (and no ring) ``n`` collapses to 1.
    """
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    o, d = pinhole_rays(camera, np.reshape(xs, -1), np.reshape(ys, -1))
    if ring:
        if camera.aperture_radius <= 0:
            raise ValueError("ring rendering needs a positive aperture radius")
        unit = ring_offsets(seeds, n)
    elif camera.aperture_radius == 0:
        n = 1
        unit = np.zeros((seeds.size, 1, 2))
    else:
        unit = disk_offsets(seeds, n)
    offsets = stratum_offsets(seeds, n)
    apoints = aperture_points(camera, unit) if camera.aperture_radius > 0 else \
        np.broadcast_to(o[:, None, :], unit.shape[:2] + (3,)).copy()
    apoints = _redraw_degenerate(camera, o, d, apoints, seeds, n, ring)
    bo = np.broadcast_to(o[:, None, :], apoints.shape)
    bd = np.broadcast_to(d[:, None, :], apoints.shape)
    lo, ld = lens_rays(bo, bd, apoints, camera.focus_distance)
    return o, d, apoints, lo, ld, offsets


def _redraw_degenerate(camera, o, d, apoints, seeds, n, ring):
    focus = o[:, None, :] + d[:, None, :] * camera.focus_distance
    dist = np.linalg.norm(focus - apoints, axis=-1)
    bad = np.argwhere(dist < DEGENERATE_EPS)
    for b, i in bad:
        k = n
        while True:
            unit = ring_offsets(seeds[b], k + 1)[k] if ring else disk_offsets(seeds[b], 1, start=k)[0]
            p = aperture_points(camera, unit)
            if np.linalg.norm(focus[b, 0] - p) >= DEGENERATE_EPS:
                apoints[b, i] = p
                break
            k += 1
    return apoints


def render_pixels(field: VoxelField, camera: Camera, xs, ys, seeds, cfg: RenderConfig,
                  ring: bool = False) -> PixelBatch:
    o, d, apoints, lo, ld, offsets = pixel_rays(camera, xs, ys, seeds, cfg.rays_per_pixel, ring)
    b, n = offsets.shape
    rays = trace_rays(field, lo, ld, offsets, cfg)
    ray_rgb = rays.rgb.reshape(b, n, 3)
    return PixelBatch(
        colors=ray_rgb.mean(axis=1),
        alpha=rays.alpha.reshape(b, n).mean(axis=1),
        ray_rgb=ray_rgb,
        origins=lo.reshape(b, n, 3),
        dirs=ld.reshape(b, n, 3),
        offsets=offsets,
        base_origins=o,
        base_dirs=d,
        apoints=apoints,
        counts=rays.count.reshape(b, n),
    )


def render_pixel_set(field: VoxelField, cameras, views, xs, ys, seeds, cfg: RenderConfig,
                     ring: bool = False) -> PixelBatch:
    """Like :func:`render_pixels` for pixels spread over several cameras.

    ``cameras[v]`` is used for entries with ``views == v``. All cameras must
    agree on whether the aperture is degenerate so every pixel has the same
    ray count. Rays are traced in one kernel call in input order.
    """
    views = np.asarray(views).reshape(-1)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    parts = {}
    for v in np.unique(views):
        sel = np.flatnonzero(views == v)
        parts[v] = (sel, pixel_rays(cameras[v], xs[sel], ys[sel], seeds[sel],
                                    cfg.rays_per_pixel, ring))
    n = {p[1][5].shape[1] for p in parts.values()}
    if len(n) != 1:
        raise ValueError("cameras disagree on the number of rays per pixel")
    n = n.pop()
    b = views.size
    o = np.empty((b, 3))
    d = np.empty((b, 3))
    ap = np.empty((b, n, 3))
    lo = np.empty((b, n, 3))
    ld = np.empty((b, n, 3))
    off = np.empty((b, n))
    for sel, (po, pd, pap, plo, pld, poff) in parts.values():
        o[sel], d[sel], ap[sel], lo[sel], ld[sel], off[sel] = po, pd, pap, plo, pld, poff
    rays = trace_rays(field, lo, ld, off, cfg)
    ray_rgb = rays.rgb.reshape(b, n, 3)
    return PixelBatch(ray_rgb.mean(axis=1), rays.alpha.reshape(b, n).mean(axis=1), ray_rgb,
                      lo, ld, off, o, d, ap, rays.count.reshape(b, n))


def _pixel(field, camera, px, cfg, view, salt, ring):
    ix, iy = int(px[0]), int(px[1])
    if not (0 <= ix < camera.width and 0 <= iy < camera.height):
        raise ValueError(f"pixel {px} outside the image")
    seed = pixel_seeds(view, [ix], [iy], salt)
    o, d, apoints, lo, ld, offsets = pixel_rays(camera, [ix + 0.5], [iy + 0.5], seed,
                                                cfg.rays_per_pixel, ring)
    rays, tapes = trace_rays(field, lo.reshape(-1, 3), ld.reshape(-1, 3), offsets.reshape(-1),
                             cfg, record=True)
    return PixelColor(rays.rgb.mean(axis=0), float(rays.alpha.mean()), tapes, apoints[0])


def render_pixel(field: VoxelField, camera: Camera, px, cfg: RenderConfig, view: int = 0,
                 salt: int = 0) -> PixelColor:
    """Aperture-averaged color of integer pixel ``px = (col, row)`` with per-ray tapes."""
    return _pixel(field, camera, px, cfg, view, salt, ring=False)


def render_ring_pixel(field: VoxelField, camera: Camera, px, cfg: RenderConfig, view: int = 0,
                      salt: int = 0) -> PixelColor:
    """Like :func:`render_pixel` but with rays from the aperture boundary."""
    if camera.aperture_radius <= 0:
        raise ValueError("ring rendering needs a positive aperture radius")
    return _pixel(field, camera, px, cfg, view, salt, ring=True)


def _image_rows(field, camera, cfg, view, salt, rows, ring=False):
    ys, xs = np.meshgrid(rows, np.arange(camera.width), indexing="ij")
    seeds = pixel_seeds(view, xs.ravel(), ys.ravel(), salt)
    batch = render_pixels(field, camera, xs.ravel() + 0.5, ys.ravel() + 0.5, seeds, cfg, ring)
    return batch.colors.reshape(len(rows), camera.width, 3), batch.alpha.reshape(len(rows), -1)


def render_image(field: VoxelField, camera: Camera, cfg: RenderConfig, view: int = 0,
                 salt: int = 0, workers: int = 1, rows_per_chunk: int = 16):
    """Render a full image in row-major order. Returns ``(rgb (H, W, 3), alpha (H, W))``.

    ``workers > 1`` renders row chunks on threads; pixels are independent so the
    result is the same as in serial mode.
    """
    chunks = [np.arange(s, min(s + rows_per_chunk, camera.height))
              for s in range(0, camera.height, rows_per_chunk)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda r: _image_rows(field, camera, cfg, view, salt, r), chunks))
    else:
        parts = [_image_rows(field, camera, cfg, view, salt, r) for r in chunks]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def render_pinhole_image(field: VoxelField, camera: Camera, cfg: RenderConfig, view: int = 0,
                         salt: int = 0):
    """Single ray per pixel through the lens center, ignoring the aperture entirely."""
    ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    seeds = pixel_seeds(view, xs.ravel(), ys.ravel(), salt)
    o, d = pinhole_rays(camera, xs.ravel() + 0.5, ys.ravel() + 0.5)
    rays = trace_rays(field, o, d, pixel_jitter(seeds), cfg)
    return rays.rgb.reshape(camera.height, camera.width, 3), rays.alpha.reshape(camera.height, -1)


# ---------------------------------------------------------------------------
# sRGB transfer


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.power(v, 1.0 / 2.4) - 0.055)


def srgb_to_linear(s):
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))
