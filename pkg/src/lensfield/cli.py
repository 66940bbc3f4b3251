"""Command line entry point: ``lensfield <command> [--config PATH] [flags]``."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .field import VoxelField, rebuild_occupancy
from .gradcheck import TOLERANCE, run_probes
from .grad import write_gradcheck_csv
from .imageio import load_linear, save_image_pair
from .metrics import psnr, ssim
from .optics import RayBounds
from .recon import ReconConfig, run_reconstruction
from .render import RenderConfig, render_image
from .scenegen import DatasetSpec, fabricate_dataset, load_dataset, occluder_scene

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunSection:
    data: str = "data"
    scene: str = "occluder"
    scene_resolution: int = 128
    checkpoint: str = ""
    split: str = "val"
    rpp_list: str = "1 2 4 8 16 32"
    rpp_pixels_per_batch: int = 1024
    init_grid: str = "0.8 1.0 1.2"
    probes: int = 50
    workers: int = 1


@dataclasses.dataclass
class RenderSection:
    step_size: float = 0.01
    t_near: float = 2.0
    t_far: float = 6.5
    max_samples_per_ray: int = 1024
    background: str = "0 0 0"
    use_occupancy: bool = True
    cutoff: float = 1e-4

    def build(self) -> RenderConfig:
        bg = tuple(float(v) for v in self.background.split())
        if len(bg) != 3:
            raise ConfigError("render.background needs three values")
        return RenderConfig(step_size=self.step_size, bounds=RayBounds(self.t_near, self.t_far),
                            max_samples_per_ray=self.max_samples_per_ray, background=bg,
                            use_occupancy=self.use_occupancy, cutoff=self.cutoff)


SECTIONS = {"run": RunSection, "render": RenderSection, "dataset": DatasetSpec,
            "recon": ReconConfig}


@dataclasses.dataclass
class Config:
    run: RunSection
    render: RenderSection
    dataset: DatasetSpec
    recon: ReconConfig


def _coerce(text: str, default, name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        if default is None:
            if text.lower() in ("", "none"):
                return None
            try:
                return int(text)
            except ValueError:
                return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def load_config(path: str | None, overrides: dict | None = None) -> Config:
    """Parse a sectioned ``key = value`` file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
    built = {}
    for sec, cls in SECTIONS.items():
        values = _defaults(cls)
        if cp.has_section(sec):
            for key, text in cp[sec].items():
                if key not in values:
                    raise ConfigError(f"unknown key {sec}.{key}")
                values[key] = _coerce(text, values[key], f"{sec}.{key}")
        for key, val in (overrides or {}).get(sec, {}).items():
            values[key] = val
        try:
            built[sec] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{sec}] settings: {exc}") from None
    return Config(**built)


def _text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved_config(cfg: Config, out_dir: Path) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        cp[sec] = {f.name: _text(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    path = out_dir / "resolved_config.txt"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


# ---------------------------------------------------------------------------
# CSV + plots


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_text(v) if not isinstance(v, str) else v for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_metrics(csv_path, png_path):
    rows = read_csv(csv_path)
    plt = _plt()
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].semilogy([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows])
    ax[0].set_xlabel("step")
    ax[0].set_ylabel("loss")
    ev = [r for r in rows if r["val_psnr"]]
    ax[1].plot([int(r["step"]) for r in ev], [float(r["val_psnr"]) for r in ev], marker="o")
    ax[1].set_xlabel("step")
    ax[1].set_ylabel("val PSNR (dB)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def plot_rpp(csv_path, png_path):
    rows = read_csv(csv_path)
    plt = _plt()
    rpp = [int(r["rpp"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rpp, [float(r["val_psnr"]) for r in rows], marker="o", color="tab:blue")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("rays per pixel")
    ax.set_ylabel("PSNR (dB)", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(rpp, [float(r["seconds"]) for r in rows], marker="s", color="tab:red")
    ax2.set_ylabel("runtime (s)", color="tab:red")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands


def _workers(args, cfg: Config) -> int:
    return 1 if args.serial else max(1, cfg.run.workers)


def cmd_fabricate(args, cfg: Config, out: Path) -> int:
    if cfg.run.scene != "occluder":
        raise ConfigError(f"unknown scene {cfg.run.scene!r}")
    fabricate_dataset(occluder_scene(), cfg.dataset, cfg.render.build(), out,
                      resolution=cfg.run.scene_resolution)
    return EXIT_OK


def _dataset(cfg: Config):
    try:
        return load_dataset(cfg.run.data)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset not found: {exc}") from None


def _save_renders(field, views, rcfg, out: Path, workers: int):
    for k, view in enumerate(views):
        img, _ = render_image(field, view.camera, rcfg, view=k, workers=workers)
        save_image_pair(out, view.name, "render", img)
        save_image_pair(out, view.name, "gt", view.image)
        save_image_pair(out, view.name, "diff", np.abs(img - view.image))


def cmd_reconstruct(args, cfg: Config, out: Path) -> int:
    ds = _dataset(cfg)
    res = run_reconstruction(ds, cfg.recon, out, log=print, eval_split=cfg.run.split)
    plot_metrics(out / "metrics.csv", out / "metrics.png")
    rcfg = cfg.render.build().replace(rays_per_pixel=1, step_size=cfg.recon.step_size
                                      or cfg.render.step_size)
    # render from the saved checkpoint so `render` reproduces these images exactly
    field = VoxelField.load(out / "field.lfvf")
    if rcfg.use_occupancy:
        field.occupancy = rebuild_occupancy(field, cfg.recon.occupancy_threshold)
    views = [dataclasses.replace(v, camera=v.camera.replace(aperture_radius=0.0))
             for v in ds.split(cfg.run.split)]
    _save_renders(field, views, rcfg, out / "renders", _workers(args, cfg))
    if res.val is not None:
        print(f"final {cfg.run.split} PSNR {res.val.mean_psnr:.3f} dB, "
              f"SSIM {res.val.mean_ssim:.4f}, a_R {res.aperture_radius:.6f}, "
              f"z_f {res.focus_distance:.6f}, {res.seconds:.1f} s")
    return EXIT_OK


def cmd_render(args, cfg: Config, out: Path) -> int:
    if not cfg.run.checkpoint:
        raise ConfigError("render needs run.checkpoint")
    try:
        field = VoxelField.load(cfg.run.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ds = _dataset(cfg)
    rcfg = cfg.render.build().replace(rays_per_pixel=args.rpp or 1,
                                      step_size=cfg.recon.step_size or cfg.render.step_size)
    if rcfg.use_occupancy:
        field.occupancy = rebuild_occupancy(field, cfg.recon.occupancy_threshold)
    views = ds.split(cfg.run.split)
    if not views:
        raise ConfigError(f"dataset has no {cfg.run.split!r} views")
    _save_renders(field, views, rcfg, out, _workers(args, cfg))
    return EXIT_OK


def evaluate_dirs(render_dir, gt_dir) -> list[tuple]:
    """Score every ``*_render.npy`` against the ``*_gt.npy`` with the same view name."""
    render_dir, gt_dir = Path(render_dir), Path(gt_dir)
    rows = []
    for rpath in sorted(render_dir.glob("*_render.npy")):
        name = rpath.name[: -len("_render.npy")]
        gpath = gt_dir / f"{name}_gt.npy"
        if not gpath.exists():
            raise ConfigError(f"no ground truth {gpath} for {rpath}")
        a, b = load_linear(rpath), load_linear(gpath)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {rpath} {a.shape} vs {gpath} {b.shape}")
        rows.append((name, psnr(a, b), ssim(a, b)))
    if not rows:
        raise ConfigError(f"no *_render.npy files in {render_dir}")
    return rows


def cmd_evaluate(args, cfg: Config, out: Path) -> int:
    t0 = time.perf_counter()
    render_dir = Path(args.renders or out / "renders")
    gt_dir = Path(args.gt or render_dir)
    rows = evaluate_dirs(render_dir, gt_dir)
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    write_csv(out / "evaluate.csv", ["view", "psnr", "ssim"], rows + [("mean", mean_p, mean_s)])
    params = {}
    defocus = render_dir.parent / "defocus.txt"
    if defocus.exists():
        for line in defocus.read_text().splitlines():
            k, _, v = line.partition("=")
            params[k.strip()] = float(v)
    with open(out / "evaluate_meta.txt", "w", encoding="utf-8") as fh:
        fh.write("psnr_domain = srgb 8-bit quantized, capped at 99 dB\n")
        fh.write("ssim = gaussian 11x11 sigma 1.5, K1 0.01, K2 0.03\n")
        fh.write(f"runtime_seconds = {time.perf_counter() - t0!r}\n")
        for k, v in params.items():
            fh.write(f"{k} = {v!r}\n")
    for name, p, s in rows:
        print(f"{name}: PSNR {p:.3f} dB  SSIM {s:.4f}")
    print(f"mean over {len(rows)} views: PSNR {mean_p:.3f} dB  SSIM {mean_s:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config, out: Path) -> int:
    probes = run_probes(cfg.run.probes, seed=args.seed if args.seed is not None else 0)
    write_gradcheck_csv(out / "gradcheck.csv", [p.row() for p in probes])
    ok = True
    for kind, tol in TOLERANCE.items():
        sel = [p for p in probes if p.kind == kind]
        worst = max(p.rel_err for p in sel)
        good = all(p.passed for p in sel)
        ok &= good
        print(f"{kind:9s} {len(sel)} probes, worst rel err {worst:.2e} (tol {tol:g}) "
              f"{'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _run_variant(ds, recon: ReconConfig, out: Path, label: str):
    res = run_reconstruction(ds, recon, out / label)
    return res


def cmd_ablate_rpp(args, cfg: Config, out: Path) -> int:
    ds = _dataset(cfg)
    rows = []
    for n in [int(v) for v in cfg.run.rpp_list.split()]:
        recon = cfg.recon.replace(rays_per_pixel=n, pixels_per_batch=cfg.run.rpp_pixels_per_batch,
                                  rpp_schedule="fixed")
        res = _run_variant(ds, recon, out, f"rpp_{n:03d}")
        rows.append((n, res.val.mean_psnr, res.val.mean_ssim, res.seconds))
        print(f"rpp {n:3d}: PSNR {res.val.mean_psnr:.3f} dB  {res.seconds:.1f} s")
    write_csv(out / "ablate_rpp.csv", ["rpp", "val_psnr", "val_ssim", "seconds"], rows)
    plot_rpp(out / "ablate_rpp.csv", out / "ablate_rpp.png")
    return EXIT_OK


DEFOCUS_HEADER = ["aperture_init", "focus_init", "variant", "val_psnr", "val_ssim", "a_R",
                  "z_f", "a_R_rel_err", "z_f_rel_err", "seconds"]


def defocus_grid(scales) -> list[tuple[float, float]]:
    """Rows perturbing one parameter at a time, aperture block first."""
    cells = [(s, 1.0) for s in scales] + [(1.0, s) for s in scales]
    return cells


def cmd_ablate_defocus_init(args, cfg: Config, out: Path) -> int:
    ds = _dataset(cfg)
    a_true = float(ds.meta["aperture_radius"])
    z_true = float(ds.meta["focus_distance"])
    rows = []
    for sa, sz in defocus_grid([float(v) for v in cfg.run.init_grid.split()]):
        for variant, opt in (("scene_only", False), ("joint", True)):
            recon = cfg.recon.replace(aperture_scale=sa, focus_scale=sz,
                                      optimize_aperture=opt and cfg.recon.optimize_aperture,
                                      optimize_focus=opt and cfg.recon.optimize_focus)
            res = _run_variant(ds, recon, out, f"a{sa:.2f}_z{sz:.2f}_{variant}")
            rows.append((f"{sa:.0%}", f"{sz:.0%}", variant, res.val.mean_psnr, res.val.mean_ssim,
                         res.aperture_radius, res.focus_distance,
                         abs(res.aperture_radius - a_true) / a_true,
                         abs(res.focus_distance - z_true) / z_true, res.seconds))
            print(f"aperture {sa:.0%} focus {sz:.0%} {variant:10s}: PSNR {res.val.mean_psnr:.3f} "
                  f"| SSIM {res.val.mean_ssim:.4f}  a_R {res.aperture_radius:.4f} "
                  f"z_f {res.focus_distance:.4f}")
    write_csv(out / "ablate_defocus_init.csv", DEFOCUS_HEADER, rows)
    return EXIT_OK


COMMANDS = {
    "fabricate": cmd_fabricate,
    "reconstruct": cmd_reconstruct,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablate-rpp": cmd_ablate_rpp,
    "ablate-defocus-init": cmd_ablate_defocus_init,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lensfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="sectioned key = value settings file")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, help="overrides dataset and recon seeds")
        s.add_argument("--serial", action="store_true", help="single-threaded, bitwise determinism")
        s.add_argument("--rpp", type=int, help="rays per pixel")
        s.add_argument("--no-opt-aperture", action="store_true")
        s.add_argument("--no-opt-focus", action="store_true")
        if name == "evaluate":
            s.add_argument("renders", nargs="?", help="directory of *_render.npy images")
            s.add_argument("gt", nargs="?", help="directory of *_gt.npy images")
    return p


def _overrides(args) -> dict:
    ov = {"recon": {}, "dataset": {}}
    if args.seed is not None:
        ov["recon"]["seed"] = args.seed
        ov["dataset"]["seed"] = args.seed
    if args.rpp is not None:
        ov["recon"]["rays_per_pixel"] = args.rpp
    if args.no_opt_aperture:
        ov["recon"]["optimize_aperture"] = False
    if args.no_opt_focus:
        ov["recon"]["optimize_focus"] = False
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, out)
        if args.serial:
            os.environ["NUMBA_NUM_THREADS"] = "1"
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
