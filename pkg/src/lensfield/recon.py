"""Joint reconstruction of a voxel field, aperture radius and focus distance.

Each step samples pixels across all training images, renders them through the
thin-lens model, and applies ADAM to the field parameters. The aperture radius
and focus distance are shared by all training cameras and optimized with their
own ADAM moments in units of their initial values.
"""

from __future__ import annotations

import csv
import dataclasses
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .field import VoxelField, rebuild_occupancy, resample_corners
from .grad import backward_pixels, focus_gradient, ring_identity
from .metrics import psnr, ssim
from .optics import Camera, pixel_seeds
from .render import RenderConfig, render_image, render_pixel_set
from .scenegen import Dataset, dataset_render_config

METRIC_COLUMNS = ("step", "loss", "lr", "a_R", "z_f", "val_psnr", "val_ssim")


@dataclass
class ReconConfig:
    lr: float = 0.3
    steps: int = 600
    decay_factor: float = 0.33
    decay_fractions: tuple = (0.6, 0.8)
    sample_point_target: int = 262144
    rays_per_pixel: int = 4
    # a fixed pixel count overrides the sample-point target
    pixels_per_batch: int | None = None
    max_pixels_per_batch: int = 16384
    rpp_schedule: str = "fixed"
    camera_model: str = "lens"
    optimize_aperture: bool = True
    optimize_focus: bool = True
    defocus_lr: float = 1e-3
    aperture_scale: float = 1.0
    focus_scale: float = 1.0
    resolution: int = 64
    # train on a coarser grid first, then upsample (None disables)
    coarse_resolution: int | None = 32
    upsample_fraction: float = 0.3
    step_size: float | None = 0.02
    max_samples_per_ray: int = 512
    use_occupancy: bool = True
    occupancy_threshold: float = 0.1
    occupancy_every: int = 16
    occupancy_warmup: int = 32
    eval_every: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.sample_point_target < self.max_samples_per_ray:
            raise ValueError("sample_point_target must be >= max_samples_per_ray")
        if self.rays_per_pixel < 1:
            raise ValueError("rays_per_pixel must be >= 1")
        if self.rpp_schedule not in ("fixed", "doubling"):
            raise ValueError(f"unknown rpp_schedule {self.rpp_schedule!r}")
        if self.camera_model not in ("lens", "pinhole"):
            raise ValueError(f"unknown camera_model {self.camera_model!r}")
        if self.pixels_per_batch is not None and self.pixels_per_batch < 1:
            raise ValueError("pixels_per_batch must be >= 1")
        if len(self.decay_fractions) != 2:
            raise ValueError("schedule needs exactly two decay boundaries")
        if self.coarse_resolution is not None and self.coarse_resolution < 1:
            raise ValueError("coarse_resolution must be >= 1")
        if self.lr < 0 or self.defocus_lr < 0:
            raise ValueError("learning rates must be >= 0")

    def replace(self, **kw) -> "ReconConfig":
        return dataclasses.replace(self, **kw)

    @property
    def boundaries(self) -> tuple[int, int]:
        return tuple(int(round(f * self.steps)) for f in self.decay_fractions)


# ---------------------------------------------------------------------------
# loss and schedule


def smooth_l1(residual):
    """x^2 below |x| = 1 and |x| above, summed over the last axis."""
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    return np.sum(np.where(a <= 1.0, r * r, a), axis=-1)


def smooth_l1_grad(residual):
    r = np.asarray(residual, dtype=np.float64)
    return np.where(np.abs(r) <= 1.0, 2.0 * r, np.sign(r))


def lr_at(step: int, cfg: ReconConfig, base: float | None = None) -> float:
    base = cfg.lr if base is None else base
    passed = sum(step >= b for b in cfg.boundaries)
    return base * cfg.decay_factor**passed


# ---------------------------------------------------------------------------
# state


@dataclass
class Batch:
    views: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.views.size


@dataclass
class TrainData:
    cameras: list
    images: np.ndarray  # (V, H, W, 3) linear
    aperture_radius: float
    focus_distance: float
    focal_length: float

    @classmethod
    def from_dataset(cls, ds: Dataset, split: str = "train") -> "TrainData":
        views = ds.split(split)
        if not views:
            raise ValueError(f"dataset has no {split!r} views")
        cams = [v.camera for v in views]
        return cls(cams, np.stack([v.image for v in views]), cams[0].aperture_radius,
                   cams[0].focus_distance, cams[0].focal_length)

    @property
    def pixel_count(self) -> int:
        return int(np.prod(self.images.shape[:3]))


@dataclass
class TrainState:
    field: VoxelField
    m: np.ndarray
    v: np.ndarray
    defocus: np.ndarray  # (a_R, z_f)
    defocus_scale: np.ndarray
    dm: np.ndarray
    dv: np.ndarray
    rng: np.random.Generator
    step: int = 0
    samples_per_ray: float = 0.0
    running_loss: float = float("nan")
    pixels_seen: int = 0

    @property
    def aperture_radius(self) -> float:
        return float(self.defocus[0])

    @property
    def focus_distance(self) -> float:
        return float(self.defocus[1])


def init_state(data: TrainData, cfg: ReconConfig, bbox_min=(-1.0,) * 3,
               bbox_max=(1.0,) * 3) -> TrainState:
    res = cfg.coarse_resolution or cfg.resolution
    field = VoxelField((res,) * 3, bbox_min, bbox_max)
    a0 = data.aperture_radius * cfg.aperture_scale if cfg.camera_model == "lens" else 0.0
    z0 = data.focus_distance * cfg.focus_scale
    defocus = np.array([a0, z0])
    scale = np.array([a0 if a0 > 0 else 1.0, z0])
    return TrainState(field, np.zeros(field.params.size), np.zeros(field.params.size), defocus,
                      scale, np.zeros(2), np.zeros(2), np.random.default_rng(cfg.seed),
                      samples_per_ray=float(cfg.max_samples_per_ray))


def current_rpp(state: TrainState, data: TrainData, cfg: ReconConfig) -> int:
    if cfg.rpp_schedule == "fixed":
        return cfg.rays_per_pixel
    # one epoch = as many sampled pixels as the training set holds
    epoch = state.pixels_seen // data.pixel_count
    return int(min(cfg.rays_per_pixel, 2 ** min(epoch, 30)))


def make_batch(data: TrainData, state: TrainState, cfg: ReconConfig, n: int | None = None) -> Batch:
    """Pixels drawn uniformly over all training images.

    The count aims the expected number of quadrature samples at
    ``cfg.sample_point_target`` using the running samples-per-ray estimate.
    """
    n = current_rpp(state, data, cfg) if n is None else n
    if cfg.camera_model == "pinhole" or state.defocus[0] == 0:
        n = 1
    if cfg.pixels_per_batch is not None:
        count = cfg.pixels_per_batch
    else:
        per_pixel = max(state.samples_per_ray, 1.0) * n
        count = int(np.clip(cfg.sample_point_target // per_pixel, 1, cfg.max_pixels_per_batch))
    nv, h, w = data.images.shape[:3]
    views = state.rng.integers(0, nv, count)
    xs = state.rng.integers(0, w, count)
    ys = state.rng.integers(0, h, count)
    order = np.argsort(views, kind="stable")
    views, xs, ys = views[order], xs[order], ys[order]
    return Batch(views, xs, ys, data.images[views, ys, xs])


def train_cameras(data: TrainData, state: TrainState, cfg: ReconConfig) -> list[Camera]:
    a = state.aperture_radius if cfg.camera_model == "lens" else 0.0
    return [c.replace(aperture_radius=a, focus_distance=state.focus_distance)
            for c in data.cameras]


# ---------------------------------------------------------------------------
# optimization


@dataclass
class StepResult:
    loss: float
    lr: float
    d_aperture: float
    d_focus: float
    pixels: int
    rays_per_pixel: int


def _adam_defocus(state: TrainState, g: np.ndarray, lr: float, cfg: ReconConfig, mask):
    t = state.step + 1
    gs = g * state.defocus_scale  # gradient w.r.t. the normalized parameter
    state.dm[:] = np.where(mask, cfg.beta1 * state.dm + (1 - cfg.beta1) * gs, state.dm)
    state.dv[:] = np.where(mask, cfg.beta2 * state.dv + (1 - cfg.beta2) * gs * gs, state.dv)
    mhat = state.dm / (1 - cfg.beta1**t)
    vhat = state.dv / (1 - cfg.beta2**t)
    upd = np.where(mask, lr * mhat / (np.sqrt(vhat) + cfg.eps), 0.0)
    state.defocus -= upd * state.defocus_scale


def upsample_step(cfg: ReconConfig) -> int:
    if not cfg.coarse_resolution or cfg.coarse_resolution == cfg.resolution:
        return -1
    return max(1, int(round(cfg.upsample_fraction * cfg.steps)))


def upsample_state(state: TrainState, resolution: int):
    """Move the field and its ADAM moments to a finer grid."""
    old = state.field
    shape = old.params.shape
    state.field = old.upsample((resolution,) * 3)
    state.field.version = old.version + 1
    for name in ("m", "v"):
        moment = resample_corners(getattr(state, name).reshape(shape), state.field.resolution)
        setattr(state, name, np.ascontiguousarray(moment.reshape(-1)))
    if old.occupancy is not None:
        state.field.occupancy = rebuild_occupancy(state.field, old.occupancy.threshold)


def clamp_defocus(state: TrainState, focal_length: float):
    state.defocus[0] = max(state.defocus[0], 0.0)
    state.defocus[1] = max(state.defocus[1], np.nextafter(focal_length, np.inf) * (1 + 1e-9))


def step_render_config(base: RenderConfig, cfg: ReconConfig, n: int) -> RenderConfig:
    return base.replace(rays_per_pixel=n, use_occupancy=cfg.use_occupancy,
                        max_samples_per_ray=cfg.max_samples_per_ray,
                        step_size=cfg.step_size or base.step_size)


def train_step(state: TrainState, batch: Batch, data: TrainData, cfg: ReconConfig,
               base_cfg: RenderConfig) -> StepResult:
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = current_rpp(state, data, cfg)
    rcfg = step_render_config(base_cfg, cfg, n)
    cams = train_cameras(data, state, cfg)
    lens = cfg.camera_model == "lens" and state.defocus[0] > 0
    salt = (cfg.seed * 1_000_003 + state.step) & 0xFFFFFFFFFF
    seeds = pixel_seeds(batch.views, batch.xs, batch.ys, salt)
    xs, ys = batch.xs + 0.5, batch.ys + 0.5
    pb = render_pixel_set(state.field, cams, batch.views, xs, ys, seeds, rcfg)

    resid = pb.colors - batch.targets
    per_pixel = smooth_l1(resid)
    if not np.all(np.isfinite(per_pixel)):
        k = int(np.flatnonzero(~np.isfinite(per_pixel))[0])
        raise FloatingPointError(
            f"non-finite loss at view {int(batch.views[k])} pixel ({int(batch.xs[k])}, "
            f"{int(batch.ys[k])})")
    loss = float(per_pixel.mean())
    adjoint = smooth_l1_grad(resid) / len(batch)

    opt_focus = lens and cfg.optimize_focus
    opt_aperture = lens and cfg.optimize_aperture
    grad = np.zeros_like(state.field.params)
    _, _, d_dir = backward_pixels(state.field, pb, adjoint, rcfg, grad, spatial=opt_focus)
    d_focus = 0.0
    if opt_focus:
        d_focus = float(focus_gradient(cams[0], pb.base_origins, pb.base_dirs, pb.apoints,
                                       d_dir).sum())
    d_aperture = 0.0
    if opt_aperture:
        ring = render_pixel_set(state.field, cams, batch.views, xs, ys, seeds, rcfg, ring=True)
        per_channel = ring_identity(ring.colors, pb.colors, state.aperture_radius)
        d_aperture = float(np.sum(per_channel * adjoint))

    lr = lr_at(state.step, cfg)
    t = state.step + 1
    _kernels.adam_update(state.field.params.reshape(-1), grad.reshape(-1), state.m, state.v, lr,
                         cfg.beta1, cfg.beta2, cfg.eps, 1 - cfg.beta1**t, 1 - cfg.beta2**t)
    state.field.touch()
    if opt_aperture or opt_focus:
        mask = np.array([opt_aperture, opt_focus])
        _adam_defocus(state, np.array([d_aperture, d_focus]), lr_at(state.step, cfg, cfg.defocus_lr),
                      cfg, mask)
        clamp_defocus(state, data.focal_length)

    state.samples_per_ray = 0.8 * state.samples_per_ray + 0.2 * float(pb.counts.mean())
    state.running_loss = loss if np.isnan(state.running_loss) else \
        0.9 * state.running_loss + 0.1 * loss
    state.pixels_seen += len(batch)
    state.step += 1
    if state.step == upsample_step(cfg) and state.field.resolution[0] != cfg.resolution:
        upsample_state(state, cfg.resolution)
    if (rcfg.use_occupancy and state.step >= cfg.occupancy_warmup
            and (state.step - cfg.occupancy_warmup) % cfg.occupancy_every == 0):
        state.field.occupancy = rebuild_occupancy(state.field, cfg.occupancy_threshold)
    return StepResult(loss, lr, d_aperture, d_focus, len(batch), n)


# ---------------------------------------------------------------------------
# evaluation and the full loop


@dataclass
class EvalResult:
    psnr: list
    ssim: list
    images: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def evaluate_views(field: VoxelField, views, base_cfg: RenderConfig, cfg: ReconConfig) -> EvalResult:
    """All-in-focus renders of ``views`` scored against their stored images."""
    rcfg = step_render_config(base_cfg, cfg, 1)
    ps, ss, imgs = [], [], []
    for k, view in enumerate(views):
        cam = view.camera.replace(aperture_radius=0.0)
        img, _ = render_image(field, cam, rcfg, view=k, salt=0)
        imgs.append(img)
        ps.append(psnr(img, view.image))
        ss.append(ssim(img, view.image))
    return EvalResult(ps, ss, imgs)


@dataclass
class ReconResult:
    field: VoxelField
    aperture_radius: float
    focus_distance: float
    metrics: list
    val: EvalResult | None
    seconds: float
    state: TrainState


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_reconstruction(ds: Dataset, cfg: ReconConfig, out_dir=None, log=None,
                       eval_split: str = "val") -> ReconResult:
    """Train from ``ds``'s defocused views and score the all-in-focus ``eval_split``."""
    t0 = time.perf_counter()
    data = TrainData.from_dataset(ds)
    base_cfg = dataset_render_config(ds)
    bmin = tuple(float(v) for v in ds.meta.get("bbox_min", "-1 -1 -1").split())
    bmax = tuple(float(v) for v in ds.meta.get("bbox_max", "1 1 1").split())
    state = init_state(data, cfg, bmin, bmax)
    val_views = ds.split(eval_split)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(cfg.steps):
            batch = make_batch(data, state, cfg)
            res = train_step(state, batch, data, cfg, base_cfg)
            last = state.step == cfg.steps
            do_eval = val_views and (last or (cfg.eval_every and state.step % cfg.eval_every == 0))
            if do_eval or last or state.step % cfg.log_every == 0:
                ev = evaluate_views(state.field, val_views, base_cfg, cfg) if do_eval else None
                rows.append({"step": state.step, "loss": res.loss, "lr": res.lr,
                             "a_R": state.aperture_radius, "z_f": state.focus_distance,
                             "val_psnr": ev.mean_psnr if ev else None,
                             "val_ssim": ev.mean_ssim if ev else None})
                if log is not None:
                    msg = (f"step {state.step:5d} loss {res.loss:.5f} px {res.pixels} "
                           f"n {res.rays_per_pixel} spr {state.samples_per_ray:.1f} a_R {state.aperture_radius:.5f} "
                           f"z_f {state.focus_distance:.5f}")
                    if ev:
                        msg += f" psnr {ev.mean_psnr:.3f} ssim {ev.mean_ssim:.4f}"
                    log(msg)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                state.field.save(out / f"field_{state.step:06d}.lfvf")
    final = ev if val_views else None
    if out is not None:
        write_metrics(out / "metrics.csv", rows)
        state.field.save(out / "field.lfvf")
        with open(out / "defocus.txt", "w", encoding="utf-8") as fh:
            fh.write(f"aperture_radius = {state.aperture_radius!r}\n")
            fh.write(f"focus_distance = {state.focus_distance!r}\n")
    return ReconResult(state.field, state.aperture_radius, state.focus_distance, rows, final,
                       time.perf_counter() - t0, state)


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
