import json
import subprocess
import sys

import cv2
import numpy as np
import pytest

from conftest import shifted_pair
from hybridflow.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from hybridflow.imagery import FlowField, read_flow, read_image, write_flow, write_image


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def computed(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    i1, i2 = shifted_pair(64, 2, 1)
    write_image(d / "a.png", i1)
    write_image(d / "b.png", i2)
    code = run("compute", d / "a.png", d / "b.png", "-o", d / "out" / "f.flo", "--viz", d / "viz")
    return d, code


def test_compute_outputs(computed):
    d, code = computed
    assert code == EXIT_OK
    flow = read_flow(d / "out" / "f.flo")
    assert flow.shape == (64, 64)
    report = json.loads((d / "out" / "f.json").read_text())
    assert report["total_seeds"] > 0 and "timings_ms" in report
    for name in ("flow.png", "superpixels.png", "labels.png", "seeds.png"):
        assert (d / "viz" / name).exists()
    labels = cv2.imread(str(d / "viz" / "labels.png"), cv2.IMREAD_UNCHANGED)
    assert labels.dtype == np.uint16 and labels.shape == (64, 64)
    seeds = read_image(d / "viz" / "seeds.png")
    red = (seeds[..., 0] == 1) & (seeds[..., 1] == 0) & (seeds[..., 2] == 0)
    assert red.sum() == report["total_seeds"]


def test_compute_kitti_output_and_overrides(computed, tmp_path):
    d, _ = computed
    out = tmp_path / "f.png"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("refine_outer = 1\n")
    code = run("compute", d / "a.png", d / "b.png", "-o", out, "--config", cfg, "--set", "knn=10",
               "--no-report", "--seed", 3)
    assert code == EXIT_OK and out.exists() and not out.with_suffix(".json").exists()
    assert read_flow(out).shape == (64, 64)


def test_compute_errors(computed, tmp_path):
    d, _ = computed
    assert run("compute", d / "a.png", d / "b.png", "-o", tmp_path / "x.flo", "--set", "bogus=1") == EXIT_DATA
    assert run("compute", d / "a.png", tmp_path / "none.png", "-o", tmp_path / "x.flo") == EXIT_DATA
    assert run("compute", d / "a.png", d / "b.png", "-o", tmp_path / "x.flo", "--set", "noequals") == EXIT_USAGE
    assert run("compute", d / "a.png") == EXIT_USAGE
    assert run() == EXIT_USAGE


def test_viz_zero_flow_is_white(tmp_path):
    write_flow(FlowField.zeros(5, 6), tmp_path / "z.flo")
    assert run("viz", tmp_path / "z.flo", "-o", tmp_path / "z.png") == EXIT_OK
    img = read_image(tmp_path / "z.png")
    assert img.min() > 0.99
    assert run("viz", tmp_path / "z.flo", "-o", tmp_path / "y.png", "--max-mag", 0) == EXIT_USAGE


def test_eval_exit_codes(tmp_path, capsys):
    pred, gt = tmp_path / "p", tmp_path / "g"
    pred.mkdir()
    gt.mkdir()
    assert run("eval", "--pred", pred, "--gt", gt) == EXIT_DATA
    f = FlowField.from_uv(np.ones((4, 4)), np.zeros((4, 4)))
    write_flow(f, pred / "a.flo")
    write_flow(f, gt / "a.flo")
    assert run("eval", "--pred", pred, "--gt", gt, "--csv", tmp_path / "t.csv") == EXIT_OK
    assert "mean" in capsys.readouterr().out
    assert (tmp_path / "t.csv").read_text().startswith("frame,epe,fi,seeds,runtime_ms\n")
    write_flow(f, pred / "b.flo")
    assert run("eval", "--pred", pred, "--gt", gt) == EXIT_DATA
    assert run("eval", "--pred", pred, "--gt", gt, "--metric", "aae") == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hybridflow", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "compute" in res.stdout
