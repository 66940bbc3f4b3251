import csv

import numpy as np
import pytest

from lensfield.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    defocus_grid,
    load_config,
    main,
)
from lensfield.field import VoxelField

TINY = """
[run]
scene_resolution = 32
probes = 2
rpp_list = 1 2
rpp_pixels_per_batch = 64
init_grid = 1.0

[dataset]
n_train = 3
n_val = 2
width = 16
height = 16
gt_rays_per_pixel = 4

[recon]
steps = 8
resolution = 16
coarse_resolution = 8
pixels_per_batch = 64
log_every = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    text = TINY.replace("[run]\n", f"[run]\ndata = {root / 'data'}\n")
    cfg.write_text(text)
    assert main(["fabricate", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    return root, cfg


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fabricate_layout(workspace):
    root, _ = workspace
    assert (root / "data" / "manifest.txt").exists()
    assert (root / "data" / "cameras.txt").exists()
    assert (root / "data" / "resolved_config.txt").exists()
    assert len(list((root / "data" / "images").glob("*_gt.npy"))) == 3 + 3 + 2


def test_reconstruct_render_evaluate(workspace, capsys):
    root, cfg = workspace
    out = root / "rec"
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out), "--serial"]) == EXIT_OK
    assert (out / "metrics.png").exists()
    rows = read(out / "metrics.csv")
    assert rows[-1]["step"] == "8" and rows[-1]["val_psnr"]
    assert len(list((out / "renders").glob("val_*_render.png"))) == 2

    ck = root / "ck.ini"
    ck.write_text(cfg.read_text().replace("[run]\n", f"[run]\ncheckpoint = {out / 'field.lfvf'}\n"))
    assert main(["render", "--config", str(ck), "--out", str(root / "r2")]) == EXIT_OK
    assert main(["evaluate", "--out", str(root / "ev"), str(root / "r2")]) == EXIT_OK
    ev = read(root / "ev" / "evaluate.csv")
    assert [r["view"] for r in ev] == ["val_000", "val_001", "mean"]
    # rendering the saved field again reproduces the reconstruct-time renders
    for name in ("val_000", "val_001"):
        a = np.load(out / "renders" / f"{name}_render.npy")
        b = np.load(root / "r2" / f"{name}_render.npy")
        assert np.array_equal(a, b)
    meta = (root / "ev" / "evaluate_meta.txt").read_text()
    assert "srgb" in meta


def test_gradcheck_command(workspace):
    root, cfg = workspace
    assert main(["gradcheck", "--config", str(cfg), "--out", str(root / "gc")]) == EXIT_OK
    rows = read(root / "gc" / "gradcheck.csv")
    assert len(rows) == 6
    assert {r["kind"] for r in rows} == {"field", "focus", "aperture"}


def test_ablations(workspace):
    root, cfg = workspace
    assert main(["ablate-rpp", "--config", str(cfg), "--out", str(root / "ab")]) == EXIT_OK
    rows = read(root / "ab" / "ablate_rpp.csv")
    assert [r["rpp"] for r in rows] == ["1", "2"]
    assert (root / "ab" / "ablate_rpp.png").exists()
    assert main(["ablate-defocus-init", "--config", str(cfg), "--out", str(root / "dd")]) == EXIT_OK
    rows = read(root / "dd" / "ablate_defocus_init.csv")
    assert len(rows) == 4
    assert {r["variant"] for r in rows} == {"joint", "scene_only"}
    assert rows[0]["aperture_init"] == "100%"


def test_defocus_grid():
    assert defocus_grid([0.8, 1.2]) == [(0.8, 1.0), (1.2, 1.0), (1.0, 0.8), (1.0, 1.2)]


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[recon]\nsteps = many\n")
    assert main(["reconstruct", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "recon.steps" in capsys.readouterr().err
    bad.write_text("[recon]\nwarp_speed = 9\n")
    assert main(["reconstruct", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text("[nonsense]\n")
    assert main(["reconstruct", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["reconstruct", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["teleport"]) == EXIT_CONFIG
    assert main(["render", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["evaluate", "--out", str(tmp_path / "o"), str(tmp_path)]) == EXIT_CONFIG


def test_overrides_and_resolved_config(tmp_path):
    cfg = load_config(None, {"recon": {"seed": 5, "rays_per_pixel": 16}})
    assert cfg.recon.seed == 5 and cfg.recon.rays_per_pixel == 16
    assert cfg.render.build().step_size == 0.01
    main(["gradcheck", "--out", str(tmp_path), "--seed", "3", "--rpp", "2", "--config",
          str(_probe_config(tmp_path))])
    text = (tmp_path / "resolved_config.txt").read_text()
    assert "rays_per_pixel = 2" in text and "seed = 3" in text


def _probe_config(tmp_path):
    p = tmp_path / "p.ini"
    p.write_text("[run]\nprobes = 1\n")
    return p


def test_numeric_failure_exit_code(workspace, tmp_path):
    root, cfg = workspace
    f = VoxelField((4, 4, 4))
    f.params[...] = np.nan
    f.save(tmp_path / "nan.lfvf")
    ck = tmp_path / "nan.ini"
    ck.write_text(cfg.read_text().replace("[run]\n", f"[run]\ncheckpoint = {tmp_path / 'nan.lfvf'}\n")
                  .replace("[dataset]", "[render]\nuse_occupancy = false\n\n[dataset]"))
    assert main(["render", "--config", str(ck), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
