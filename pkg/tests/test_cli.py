import csv
import io
import json

import numpy as np
import pytest

from pogrid.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main, pgm_bytes
from pogrid.grid import LEVELS, GridConfig, PredictedOccupancyGrid, QuantizedPog, save_grid

SMALL = {
    "grid": {"rows": 12, "cols": 12},
    "dataset": {"n_total": 10, "train_fraction": 0.7, "seed": 3},
    "arch1": {"sizes": [6], "sda": {"epochs": 3}, "forest": {"n_trees": 2}},
    "arch2": {"sizes1": [6], "sizes2": [6], "sda1": {"epochs": 3}, "sda2": {"epochs": 3},
              "forest": {"n_trees": 2}},
    "arch3": {"spec": {"epochs": 2, "batch_size": 4}, "n_filters": 3},
}


def read_pgm(data):
    header, rest = data.split(b"\n", 3)[:3], data.split(b"\n", 3)[3]
    assert header[0] == b"P5" and header[2] == b"255"
    w, h = map(int, header[1].split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    for arch in ("arch1", "arch2", "arch3"):
        code = main(["train", "--config", str(cfg), "--arch", arch, "--dataset", str(root / "data"),
                     "--out", str(root / "bundles" / arch)])
        assert code == EXIT_OK
    return root, cfg


def test_generate_writes_ten_records(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert len(manifest["records"]) == 10
    assert len(list((root / "data").rglob("*.aog"))) == 10
    assert len(list((root / "data").rglob("*.pog"))) == 10


def test_generate_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "again"), "--workers", "3"]) == 0
    for f in (root / "data").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(root / "data")).read_bytes()


def test_train_prints_losses_and_records_config(workspace, capsys, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--arch", "arch1", "--dataset", str(root / "data"),
                 "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "sda1 layer 0: loss" in out
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["run_config"]["grid"] == {"rows": 12, "cols": 12}
    assert "workers" not in manifest["run_config"]
    for f in (root / "bundles" / "arch1").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_invalid_arch_is_usage_error(workspace, capsys):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--arch", "arch9", "--dataset", str(root / "data")]) == EXIT_USAGE
    assert "arch9" in capsys.readouterr().err
    assert main(["bogus"]) == EXIT_USAGE


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--arch", "arch1", "--dataset", str(tmp_path / "nope")]) == EXIT_DATA


def test_eval_writes_three_rows(workspace, tmp_path):
    root, cfg = workspace
    bundles = [a for arch in ("arch1", "arch2", "arch3") for a in ("--bundle", str(root / "bundles" / arch))]
    args = ["eval", "--config", str(cfg), "--dataset", str(root / "data"), "--latency-calls", "2"]
    assert main(args + bundles + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + bundles + ["--out", str(tmp_path / "r2"), "--workers", "2"]) == 0
    summary = list(csv.DictReader(io.StringIO((tmp_path / "r1" / "summary.csv").read_text())))
    assert [r["architecture"] for r in summary] == ["arch1", "arch2", "arch3"]
    assert all(int(r["n_scenarios"]) == 3 for r in summary)
    hist = list(csv.DictReader(io.StringIO((tmp_path / "r1" / "histogram.csv").read_text())))
    for arch in ("arch1", "arch2", "arch3"):
        assert sum(int(r["count"]) for r in hist if r["architecture"] == arch) == 3
    for name in ("scenarios.csv", "summary.csv", "histogram.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_eval_rejects_foreign_dataset(workspace, tmp_path):
    root, cfg = workspace
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "s_count": 2}))
    assert main(["generate", "--config", str(other), "--out", str(tmp_path / "d2")]) == 0
    code = main(["eval", "--config", str(other), "--dataset", str(tmp_path / "d2"),
                 "--bundle", str(root / "bundles" / "arch1"), "--out", str(tmp_path / "r")])
    assert code == EXIT_DATA


def test_predict_and_render(workspace, tmp_path):
    root, _ = workspace
    aog = sorted((root / "data" / "validation").glob("*.aog"))[0]
    out = tmp_path / "p.pog"
    assert main(["predict", "--bundle", str(root / "bundles" / "arch1"), "--aog", str(aog),
                 "--out", str(out)]) == 0
    assert main(["render", str(out), "--out", str(tmp_path / "p.pgm")]) == 0
    img = read_pgm((tmp_path / "p.pgm").read_bytes())
    assert img.shape == (12, 12)
    assert set(np.unique(img)) <= {round(255 * v) for v in LEVELS}
    assert main(["render", str(aog), "--out", str(tmp_path / "a.pgm")]) == 0


def test_render_values(tmp_path):
    cfg = GridConfig(3, 4, 1.0, 1.0, attributes_per_cell=1)
    save_grid(tmp_path / "zero.pog", PredictedOccupancyGrid(cfg, 1.0, np.zeros((3, 4))))
    assert main(["render", str(tmp_path / "zero.pog"), "--out", str(tmp_path / "z.pgm")]) == 0
    assert not read_pgm((tmp_path / "z.pgm").read_bytes()).any()
    probs = np.zeros((3, 4))
    probs[0, 0] = 1.0
    img = read_pgm(pgm_bytes(probs))
    assert img.max() == 255 and (img == 255).sum() == 1
    q = QuantizedPog(cfg, 1.0, np.resize(LEVELS, (3, 4)))
    save_grid(tmp_path / "q.pog", q)
    assert main(["render", str(tmp_path / "q.pog"), "--out", str(tmp_path / "q.pgm")]) == 0
    assert len(np.unique(read_pgm((tmp_path / "q.pgm").read_bytes()))) <= 6


def test_malformed_grid_reports_offset(tmp_path, capsys):
    bad = tmp_path / "bad.pog"
    bad.write_bytes(b"POGX" + bytes(30))
    assert main(["render", str(bad), "--out", str(tmp_path / "x.pgm")]) == EXIT_DATA
    assert "at byte" in capsys.readouterr().err


def test_config_overrides_and_validation(tmp_path):
    cfg = RunConfig.from_dict({}, ["arch1.forest.n_trees=5", "layout.kind=four-way-left-no-entry"])
    assert cfg.arch1_kwargs()["forest"].n_trees == 5
    assert cfg.layout.kind == "four-way-left-no-entry"
    with pytest.raises(UsageError, match="unknown config key"):
        RunConfig.from_dict({"grid": {"rowz": 3}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({}, ["t_pred=5"])
    with pytest.raises(UsageError):
        RunConfig.from_dict({}, ["arch3.spec.epochs=0"])
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_USAGE


def test_full_scale_config_accepted():
    cfg = RunConfig.from_dict({"grid": {"rows": 80, "cols": 80},
                               "dataset": {"n_total": 33280, "train_fraction": 0.8, "seed": 0},
                               "t_pred": 1.0})
    g = cfg.grid_config
    assert (g.rows, g.cols, g.cell_length, g.cell_width) == (80, 80, 0.5, 0.5)
