"""Randomized analytic-vs-finite-difference probes for the backward pass.

Probe scenes are small random voxel fields whose density fades to zero at the
bounding box, so moving a ray never makes a sample pop in or out of the
volume with finite weight. Finite differences always reuse the pixel seed of
the analytic evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField
from .grad import (
    aperture_gradients,
    backward_pixels,
    fd_oracle,
    focus_gradient,
    relative_error,
)
from .optics import Camera, RayBounds, pixel_seeds
from .render import RenderConfig, render_pixels
from .scenegen import look_at

TOLERANCE = {"field": 1e-3, "focus": 1e-2, "aperture": 5e-2}


@dataclass
class Probe:
    probe_id: int
    kind: str
    analytic: float
    fd: float

    @property
    def rel_err(self) -> float:
        return relative_error(self.analytic, self.fd)

    @property
    def passed(self) -> bool:
        return self.rel_err < TOLERANCE[self.kind]

    def row(self) -> dict:
        return {"probe_id": self.probe_id, "kind": self.kind, "analytic": self.analytic,
                "fd": self.fd, "rel_err": self.rel_err}


def probe_field(rng: np.random.Generator, resolution: int = 6) -> VoxelField:
    f = VoxelField((resolution,) * 3)
    f.params[..., 0] = rng.normal(0.5, 1.0, f.params.shape[:3])
    f.params[..., 1:] = rng.normal(0.0, 1.5, f.params.shape[:3] + (3,))
    for axis in range(3):
        sl = [slice(None)] * 3
        for end in (0, -1):
            sl[axis] = end
            f.params[tuple(sl) + (0,)] = -12.0
    return f


def probe_camera(rng: np.random.Generator, size: int = 48) -> Camera:
    elev = rng.uniform(-0.6, 0.6)
    azim = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(3.0, 4.0)
    center = dist * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim),
                              np.sin(elev)])
    return Camera(size, size, 45.0, 45.0, size / 2, size / 2, look_at(center), center,
                  aperture_radius=rng.uniform(0.15, 0.35), focal_length=0.05,
                  focus_distance=dist + rng.uniform(-1.0, 1.0))


def probe_config(n: int) -> RenderConfig:
    return RenderConfig(rays_per_pixel=n, step_size=0.02, bounds=RayBounds(0.0, 8.0))


def _pick_pixel(field, cam, rng, cfg, score, candidates=12):
    """Random candidate pixel whose screening score is largest."""
    xs = rng.integers(cam.width // 4, 3 * cam.width // 4, candidates)
    ys = rng.integers(cam.height // 4, 3 * cam.height // 4, candidates)
    best = int(np.argmax([score(x, y) for x, y in zip(xs, ys)]))
    return int(xs[best]), int(ys[best])


def _loss(field, cam, px, seeds, cfg, g):
    b = render_pixels(field, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg)
    return float(b.colors[0] @ g)


def field_probe(rng, probe_id: int, n: int = 8) -> Probe:
    f = probe_field(rng)
    cam = probe_camera(rng)
    cfg = probe_config(n)
    g = rng.normal(size=3)
    px = (int(rng.integers(cam.width // 4, 3 * cam.width // 4)),
          int(rng.integers(cam.height // 4, 3 * cam.height // 4)))
    seeds = pixel_seeds(probe_id, [px[0]], [px[1]])
    b = render_pixels(f, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg)
    grad, _, _ = backward_pixels(f, b, g[None], cfg, spatial=False)
    flat = np.abs(grad.reshape(-1))
    # random parameter among those the pixel actually depends on
    live = np.flatnonzero(flat > 1e-3 * flat.max())
    k = int(rng.choice(live))
    idx = np.unravel_index(k, grad.shape)

    def fn(v):
        f2 = f.copy()
        f2.params[idx] = v
        return _loss(f2, cam, px, seeds, cfg, g)

    return Probe(probe_id, "field", float(grad[idx]), fd_oracle(fn, float(f.params[idx]), 1e-5))


def focus_probe(rng, probe_id: int, n: int = 32) -> Probe:
    f = probe_field(rng)
    cam = probe_camera(rng)
    cfg = probe_config(n)
    g = rng.normal(size=3)

    def analytic(x, y):
        seeds = pixel_seeds(probe_id, [x], [y])
        b = render_pixels(f, cam, [x + 0.5], [y + 0.5], seeds, cfg)
        _, _, dd = backward_pixels(f, b, g[None], cfg)
        return float(focus_gradient(cam, b.base_origins, b.base_dirs, b.apoints, dd)[0])

    px = _pick_pixel(f, cam, rng, cfg, lambda x, y: abs(analytic(x, y)))
    seeds = pixel_seeds(probe_id, [px[0]], [px[1]])
    h = 1e-4 * cam.focus_distance
    fd = fd_oracle(lambda z: _loss(f, cam.replace(focus_distance=z), px, seeds, cfg, g),
                   cam.focus_distance, h)
    return Probe(probe_id, "focus", analytic(*px), fd)


def aperture_probe(rng, probe_id: int, n: int = 16384, screen_n: int = 256) -> Probe:
    f = probe_field(rng)
    cam = probe_camera(rng)
    cfg = probe_config(n)
    g = rng.normal(size=3)

    def analytic(x, y, c):
        seeds = pixel_seeds(probe_id, [x], [y])
        b = render_pixels(f, cam, [x + 0.5], [y + 0.5], seeds, c)
        return float(aperture_gradients(f, cam, [x + 0.5], [y + 0.5], seeds, c, b.colors,
                                        g[None])[0])

    screen = probe_config(screen_n)
    px = _pick_pixel(f, cam, rng, screen, lambda x, y: abs(analytic(x, y, screen)))
    seeds = pixel_seeds(probe_id, [px[0]], [px[1]])
    h = 1e-3 * cam.aperture_radius
    fd = fd_oracle(lambda a: _loss(f, cam.replace(aperture_radius=a), px, seeds, cfg, g),
                   cam.aperture_radius, h)
    return Probe(probe_id, "aperture", analytic(*px, cfg), fd)


PROBES = {"field": field_probe, "focus": focus_probe, "aperture": aperture_probe}


def run_probes(count: int = 50, seed: int = 0, kinds=("field", "focus", "aperture"),
               **kw) -> list[Probe]:
    """``count`` probes of every kind, each from its own random scene."""
    out = []
    for kind in kinds:
        rng = np.random.default_rng([seed, list(PROBES).index(kind)])
        for k in range(count):
            opts = kw.get(kind, {})
            out.append(PROBES[kind](rng, len(out), **opts))
    return out
