import csv
import json

import numpy as np
import pytest

from dnls.cli import main
from dnls.geometry import ModelConfig, init_grid
from dnls.imaging import disk_phantom, read_pgm, write_pgm


@pytest.fixture
def disk_files(tmp_path):
    img, truth = disk_phantom(120, 30, noise_sigma=4.0, seed=2)
    img_path = tmp_path / "disk.pgm"
    truth_path = tmp_path / "disk_gt.pgm"
    write_pgm(img_path, img)
    write_pgm(truth_path, truth.astype(np.uint8) * 255)
    return str(img_path), str(truth_path)


def test_phantom_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for prefix in (a, b):
        rc = main(["phantom", "--out", str(prefix), "--objects", "12",
                   "--size", "300", "--seed", "7"])
        assert rc == 0
    assert (a.with_name("a.pgm")).read_bytes() == (b.with_name("b.pgm")).read_bytes()
    assert (a.with_name("a_truth.pgm")).read_bytes() == \
        (b.with_name("b_truth.pgm")).read_bytes()


def test_phantom_spec_json(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"size": [100, 100], "n_objects": 2,
                                "intensities": [5, 100, 200], "noise_sigma": 0.0,
                                "seed": 3}))
    rc = main(["phantom", "--out", str(tmp_path / "p"), "--spec", str(spec)])
    assert rc == 0
    truth = read_pgm(tmp_path / "p_truth.pgm")
    assert set(np.unique(truth)) == {1, 2, 3}


def test_dice_identity_cli(tmp_path, capsys):
    img, _ = disk_phantom(60, 15)
    path = tmp_path / "m.pgm"
    write_pgm(path, img)
    assert main(["dice", str(path), str(path)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "dice"
    assert float(out[1]) == 1.0


def test_dice_multilabel_permuted_labels(tmp_path, capsys):
    rng = np.random.default_rng(5)
    truth = rng.integers(1, 4, size=(40, 40)).astype(np.uint8)
    pred = ((truth % 3) + 1).astype(np.uint8)  # cyclic permutation
    t_path, p_path = tmp_path / "t.pgm", tmp_path / "p.pgm"
    write_pgm(t_path, truth)
    write_pgm(p_path, pred)
    assert main(["dice", "--multilabel", "--match", "greedy",
                 str(p_path), str(t_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1] == "mean,1.000000"


def test_missing_input_exits_2_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.pgm"
    rc = main(["segment2", "--in", str(missing), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_malformed_pgm_exits_2(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n4 4\n65535\n" + bytes(32))
    rc = main(["segment2", "--in", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_r1_rejected(disk_files, tmp_path):
    img_path, _ = disk_files
    rc = main(["segmentmulti", "--in", img_path, "--out", str(tmp_path / "o"),
               "--r", "1"])
    assert rc == 1


def test_usage_error_exit_code():
    assert main(["segment2"]) == 1  # missing required flags
    assert main(["not-a-command"]) == 1


def test_segment2_artifacts_and_report(disk_files, tmp_path):
    img_path, truth_path = disk_files
    out = tmp_path / "run"
    rc = main(["segment2", "--in", img_path, "--truth", truth_path,
               "--out", str(out), "--n", "36", "--iters", "40"])
    assert rc == 0
    for suffix in ("_mask.pgm", "_overlay.pgm", "_energy.csv", "_energy.png",
                   "_report.csv", "_report.json", "_model.json"):
        assert out.with_name("run" + suffix).exists()
    with open(out.with_name("run_report.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["command"] == "segment2"
    assert float(rows[0]["dice"]) > 0.9
    assert rows[0]["schema_version"] == "1"
    report = json.loads(out.with_name("run_report.json").read_text())
    assert report["config"]["n"] == 36
    assert report["config"]["iters"] == 40
    with open(out.with_name("run_energy.csv")) as fh:
        n_rows = len(list(csv.reader(fh))) - 1
    assert n_rows == report["metrics"]["iterations"]


def test_segment2_zero_iterations_mask_is_initialization(disk_files, tmp_path):
    img_path, _ = disk_files
    out = tmp_path / "noop"
    rc = main(["segment2", "--in", img_path, "--out", str(out),
               "--n", "25", "--iters", "0"])
    assert rc == 0
    report = json.loads(out.with_name("noop_report.json").read_text())
    assert report["metrics"]["iterations"] == 0
    mask = read_pgm(out.with_name("noop_mask.pgm")) > 0
    init = init_grid(ModelConfig(n_polytopes=25), (120, 120))
    assert np.array_equal(mask, init.field() > 0.5)


def test_segmentmulti_artifacts(tmp_path):
    rc = main(["phantom", "--out", str(tmp_path / "ph"), "--objects", "2",
               "--size", "120", "--intensities", "10,120,240", "--noise", "3",
               "--seed", "1"])
    assert rc == 0
    out = tmp_path / "multi"
    rc = main(["segmentmulti", "--in", str(tmp_path / "ph.pgm"),
               "--truth", str(tmp_path / "ph_truth.pgm"), "--out", str(out),
               "--r", "3", "--init", "multi-otsu", "--n", "64", "--iters", "40"])
    assert rc == 0
    labels = read_pgm(out.with_name("multi_labels.pgm"))
    assert set(np.unique(labels)) <= {1, 2, 3}
    report = json.loads(out.with_name("multi_report.json").read_text())
    assert report["metrics"]["dice_mean"] > 0.9
    assert "per_region_dice" in report["config"]


def test_bench_single_count_ratio_one(tmp_path, capsys):
    out = tmp_path / "bm"
    rc = main(["bench", "--out", str(out), "--objects", "2", "--size", "100",
               "--iters", "10", "--n", "49", "--noise", "0"])
    assert rc == 0
    doc = json.loads(out.with_name("bm_bench.json").read_text())
    assert doc["summary"]["time_ratio_max_over_min"] == 1.0
    with open(out.with_name("bm_bench.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["objects"] == "2"
    assert out.with_name("bm_bench.png").exists()


def test_report_json_reproduces_run(disk_files, tmp_path):
    img_path, truth_path = disk_files
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    args = ["segment2", "--in", img_path, "--truth", truth_path,
            "--n", "36", "--iters", "30"]
    assert main(args + ["--out", str(out_a)]) == 0
    report = json.loads(out_a.with_name("a_report.json").read_text())
    cfg = report["config"]
    assert main(["segment2", "--in", cfg["input"], "--truth", cfg["truth"],
                 "--n", str(cfg["n"]), "--iters", str(cfg["iters"]),
                 "--out", str(out_b)]) == 0
    rb = json.loads(out_b.with_name("b_report.json").read_text())
    assert rb["metrics"]["dice"] == report["metrics"]["dice"]
    assert rb["metrics"]["final_energy"] == report["metrics"]["final_energy"]
