"""Thin-lens camera, ray generation and aperture/depth sampling.

Conventions: camera frame is x right, y down, z forward (optical axis).
``Camera.rotation`` maps camera-frame vectors to world, ``translation`` is the
lens center in world coordinates. Continuous pixel coordinates put the center
of pixel ``(i, j)`` at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import configparser
import dataclasses
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEGENERATE_EPS = 1e-12


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    aperture_radius: float = 0.0
    focal_length: float = 0.05
    focus_distance: float = 3.5

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        for name in ("fx", "fy", "cx", "cy", "aperture_radius", "focal_length", "focus_distance"):
            setattr(self, name, float(getattr(self, name)))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths in pixels must be positive")
        if not self.aperture_radius >= 0:
            raise ValueError(f"aperture_radius must be >= 0, got {self.aperture_radius}")
        if not (self.focus_distance > self.focal_length > 0):
            raise ValueError(
                f"need focus_distance > focal_length > 0, got "
                f"z_f={self.focus_distance}, f={self.focal_length}"
            )
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def aperture_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Exactly orthonormal in-plane axes of the aperture disk."""
        ex = self.rotation[:, 0] / np.linalg.norm(self.rotation[:, 0])
        ey = self.rotation[:, 1] - ex * (ex @ self.rotation[:, 1])
        return ex, ey / np.linalg.norm(ey)

    def replace(self, **changes) -> "Camera":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class ApertureSample:
    point: np.ndarray
    index: int
    count: int


@dataclass(frozen=True)
class RayBounds:
    t_near: float
    t_far: float

    def __post_init__(self):
        if not (0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")


# ---------------------------------------------------------------------------
# ray generation


def pinhole_rays(camera: Camera, xs, ys) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pinhole rays for continuous pixel coordinates."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if np.any((xs < 0) | (xs > camera.width) | (ys < 0) | (ys > camera.height)):
        raise ValueError("pixel coordinates outside the image")
    d = np.stack(
        [(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], axis=-1
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d = d @ camera.rotation.T
    # renormalize so the world-frame direction is unit to machine precision
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.translation, d.shape).copy()
    return o, d


def pinhole_ray(camera: Camera, px: Sequence[float]) -> Ray:
    o, d = pinhole_rays(camera, [px[0]], [px[1]])
    return Ray(o[0], d[0])


def lens_rays(origins, directions, apoints, focus_distance: float):
    """Rays from aperture points toward each base ray's focus point.

    Where an aperture point equals the base origin the base ray is returned
    unchanged, bit for bit.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    apoints = np.asarray(apoints, dtype=np.float64)
    focus = origins + directions * focus_distance
    v = focus - apoints
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < DEGENERATE_EPS):
        raise FloatingPointError("aperture sample coincides with the focus point")
    new_dir = v / norm
    at_center = np.all(apoints == origins, axis=-1, keepdims=True)
    return apoints.copy(), np.where(at_center, directions, new_dir)


def lens_ray(camera: Camera, base: Ray, sample: ApertureSample) -> Ray:
    o, d = lens_rays(base.origin[None], base.direction[None], sample.point[None],
                     camera.focus_distance)
    return Ray(o[0], d[0])


def circle_of_confusion(camera: Camera, z) -> float | np.ndarray:
    """Sensor-side blur radius (meters) of a point at depth ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    f, zf = camera.focal_length, camera.focus_distance
    if zf <= f:
        raise ValueError("focus distance must exceed focal length")
    coc = camera.aperture_radius * np.abs(z - zf) / z * f / (zf - f)
    return float(coc) if coc.ndim == 0 else coc


def coc_pixels(camera: Camera, z):
    """Circle of confusion expressed in pixels along x.

    The sensor sits at the thin-lens image distance f*z_f/(z_f - f), which sets
    the pixel pitch to that distance divided by ``fx``.
    """
    f, zf = camera.focal_length, camera.focus_distance
    image_distance = f * zf / (zf - f)
    return circle_of_confusion(camera, z) * camera.fx / image_distance


# ---------------------------------------------------------------------------
# Sobol sequence


def _sobol_directions(bits: int = 32) -> np.ndarray:
    v = np.zeros((2, bits), dtype=np.uint64)
    # dimension 1: van der Corput
    for k in range(bits):
        v[0, k] = 1 << (bits - 1 - k)
    # dimension 2: primitive polynomial x + 1, m_1 = 1
    m = 1
    for k in range(bits):
        if k > 0:
            m = (m << 1) ^ m
        v[1, k] = m << (bits - 1 - k)
    return v.astype(np.uint32)


_SOBOL_V = _sobol_directions()


def sobol_ints(indices) -> np.ndarray:
    """32-bit integer Sobol points (Gray-code order), shape ``(..., 2)``."""
    idx = np.asarray(indices, dtype=np.uint64)
    if np.any(np.asarray(indices) < 0):
        raise ValueError("sobol index must be >= 0")
    gray = idx ^ (idx >> np.uint64(1))
    out = np.zeros(idx.shape + (2,), dtype=np.uint32)
    for k in range(32):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        out[bit] ^= _SOBOL_V[:, k]
    return out


def sobol_2d(index: int) -> tuple[float, float]:
    p = sobol_ints([int(index)])[0].astype(np.float64) * 2.0**-32
    return float(p[0]), float(p[1])


@functools.lru_cache(maxsize=64)
def _sobol_prefix(n: int) -> np.ndarray:
    out = sobol_ints(np.arange(n))
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# per-pixel hashing


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(x) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def pixel_seeds(view, xs, ys, salt: int = 0) -> np.ndarray:
    """Deterministic 64-bit seed per (view, pixel, salt)."""
    view = np.asarray(view, dtype=np.uint64)
    xs = np.asarray(xs, dtype=np.uint64)
    ys = np.asarray(ys, dtype=np.uint64)
    h = splitmix64(view ^ (np.uint64(salt) << np.uint64(24)))
    return splitmix64(h ^ ((ys << np.uint64(20)) | xs))


def _stream(seeds, k: int) -> np.ndarray:
    return splitmix64(np.asarray(seeds, dtype=np.uint64) ^ np.uint64(0xA24BAED4963EE407 * k % 2**64))


def _unit_float(bits64) -> np.ndarray:
    return (bits64 >> np.uint64(11)).astype(np.float64) * 2.0**-53


def pixel_jitter(seeds) -> np.ndarray:
    """Per-pixel depth jitter in [0, 1)."""
    return _unit_float(_stream(seeds, 1))


def ring_phase(seeds) -> np.ndarray:
    return _unit_float(_stream(seeds, 2))


def scramble_words(seeds) -> np.ndarray:
    """Per-pixel random digital shift for both Sobol dimensions, shape ``(..., 2)``."""
    h = _stream(seeds, 3)
    lo = (h & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    hi = (h >> np.uint64(32)).astype(np.uint32)
    return np.stack([lo, hi], axis=-1)


# ---------------------------------------------------------------------------
# aperture sampling


def concentric_disk(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Shirley-Chiu low-distortion map from the unit square to the unit disk."""
    a = 2.0 * np.asarray(u, dtype=np.float64) - 1.0
    b = 2.0 * np.asarray(v, dtype=np.float64) - 1.0
    use_a = np.abs(a) > np.abs(b)
    r = np.where(use_a, a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(use_a, (np.pi / 4) * (b / a), np.pi / 2 - (np.pi / 4) * (a / b))
    phi = np.where(r == 0, 0.0, phi)
    return r * np.cos(phi), r * np.sin(phi)


def disk_offsets(seeds, n: int, start: int = 0) -> np.ndarray:
    """Unit-disk coordinates of samples ``start..start+n-1`` for each pixel seed.

    Returns shape ``seeds.shape + (n, 2)``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    base = _sobol_prefix(start + n)[start:]
    pts = base ^ scramble_words(seeds)[..., None, :]
    uv = pts.astype(np.float64) * 2.0**-32
    x, y = concentric_disk(uv[..., 0], uv[..., 1])
    return np.stack([x, y], axis=-1)


def ring_offsets(seeds, n: int) -> np.ndarray:
    """Unit-circle coordinates with angles stratified over [0, 2*pi)."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    theta = 2.0 * np.pi * (np.arange(n) + ring_phase(seeds)[..., None]) / n
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def aperture_points(camera: Camera, offsets: np.ndarray) -> np.ndarray:
    """Map unit-disk offsets into world points on the aperture plane."""
    ex, ey = camera.aperture_basis()
    scaled = offsets * camera.aperture_radius
    return camera.translation + scaled[..., 0:1] * ex + scaled[..., 1:2] * ey


def _check_index(i: int, n: int):
    if not (0 <= i < n):
        raise ValueError(f"sample index {i} outside [0, {n})")


def sample_aperture_disk(camera: Camera, pixel_seed: int, i: int, n: int) -> ApertureSample:
    _check_index(i, n)
    off = disk_offsets(np.uint64(pixel_seed), 1, start=i)[0]
    return ApertureSample(aperture_points(camera, off), i, n)


def sample_aperture_ring(camera: Camera, pixel_seed: int, i: int, n: int) -> ApertureSample:
    _check_index(i, n)
    if camera.aperture_radius <= 0:
        raise ValueError("ring sampling needs a positive aperture radius")
    off = ring_offsets(np.uint64(pixel_seed), n)[i]
    return ApertureSample(aperture_points(camera, off), i, n)


def stratified_t(i: int, n: int, t_start: float, t_end: float, jitter: float) -> float:
    """Offset of the ``i``-th of ``n`` rays inside one marching interval.

    Each ray owns the stratum ``[i/n, (i+1)/n)`` of the interval; ``jitter``
    places it within the stratum.
    """
    _check_index(i, n)
    if not t_start < t_end:
        raise ValueError("need t_start < t_end")
    if not 0 <= jitter < 1:
        raise ValueError("jitter must lie in [0, 1)")
    t = t_start + (i + jitter) / n * (t_end - t_start)
    return min(t, math.nextafter(t_end, t_start))


def stratum_offsets(seeds, n: int) -> np.ndarray:
    """Fractional marching offsets, shape ``seeds.shape + (n,)``."""
    u = pixel_jitter(seeds)
    return (np.arange(n) + u[..., None]) / n


# ---------------------------------------------------------------------------
# serialization


_CAMERA_SCALARS = ("fx", "fy", "cx", "cy", "aperture_radius", "focal_length", "focus_distance")


def _fmt(x: float) -> str:
    return repr(float(x))


def camera_to_section(camera: Camera) -> dict[str, str]:
    out = {"width": str(camera.width), "height": str(camera.height)}
    for name in _CAMERA_SCALARS:
        out[name] = _fmt(getattr(camera, name))
    out["rotation"] = " ".join(_fmt(v) for v in camera.rotation.reshape(-1))
    out["translation"] = " ".join(_fmt(v) for v in camera.translation)
    return out


def camera_from_section(section) -> Camera:
    kwargs = {name: float(section[name]) for name in _CAMERA_SCALARS}
    return Camera(
        width=int(section["width"]),
        height=int(section["height"]),
        rotation=[float(v) for v in section["rotation"].split()],
        translation=[float(v) for v in section["translation"].split()],
        **kwargs,
    )


def save_cameras(path, cameras: Iterable[Camera], names: Iterable[str] | None = None):
    cameras = list(cameras)
    names = list(names) if names is not None else [f"camera_{k:03d}" for k in range(len(cameras))]
    cp = configparser.ConfigParser()
    for name, cam in zip(names, cameras):
        cp[name] = camera_to_section(cam)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_cameras(path) -> dict[str, Camera]:
    cp = configparser.ConfigParser()
    if not cp.read(Path(path), encoding="utf-8"):
        raise FileNotFoundError(path)
    return {name: camera_from_section(cp[name]) for name in cp.sections()}
