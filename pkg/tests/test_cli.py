import json

import pytest

from mspd.cli import main, parse_period, parse_wavelengths
from mspd.cube import read_cube
from mspd.pattern import load_pattern, save_pattern
from mspd.report import read_psnr_table

from helpers import parity_pattern_c4

SMALL = ["--ms-filters", "2", "2", "2", "2"]


@pytest.fixture
def setup(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--scenes", "3", "--size", "16x16"]) == 0
    pattern = save_pattern(tmp_path / "p.txt", parity_pattern_c4())
    common = ["--pattern", str(pattern), "--data-root", str(data), "--train-scenes", "scene00", "scene01",
              "--test-scenes", "scene02", "--patch-size", "8", "--max-steps", "1", "--lr", "1e-3",
              "--output-dir", str(tmp_path / "runs")] + SMALL
    return tmp_path, data, pattern, common


def only_run(base, prefix):
    runs = sorted(p for p in base.iterdir() if p.name.startswith(prefix))
    assert len(runs) == 1
    return runs[0]


def test_parsers():
    assert parse_wavelengths("420:720:20")[-1] == 720.0 and len(parse_wavelengths("420:720:20")) == 16
    assert parse_wavelengths("450,520") == [450.0, 520.0]
    assert parse_wavelengths(None) is None
    assert parse_period("8x4") == (8, 4) and parse_period("4") == (4, 4)


def test_pattern_gen_and_validate(tmp_path, capsys):
    out = tmp_path / "p16.txt"
    assert main(["pattern-gen", "--c", "16", "--period", "8x8", "--wavelengths", "420:720:20",
                 "--out", str(out)]) == 0
    assert load_pattern(out).wavelengths[0] == 420.0
    assert main(["pattern-validate", str(out)]) == 0
    assert "0 violation(s)" in capsys.readouterr().out


def test_infeasible_pattern_reported(tmp_path, capsys):
    out = tmp_path / "p4.txt"
    assert main(["pattern-gen", "--c", "4", "--period", "4x4", "--out", str(out)]) == 2
    assert "adjacent-bands" in capsys.readouterr().err
    assert main(["pattern-gen", "--c", "4", "--period", "4x4", "--allow-violations", "--out", str(out)]) == 0
    assert main(["pattern-validate", str(out)]) == 1
    assert "adjacent-bands" in capsys.readouterr().out


def test_ingest_with_env_root(setup, monkeypatch, capsys):
    tmp, data, _, _ = setup
    monkeypatch.setenv("MSPD_DATA_ROOT", str(data))
    assert main(["ingest", "--output-dir", str(tmp / "runs")]) == 0
    out = capsys.readouterr().out
    assert "scene00\t16x16\t4 bands" in out
    cat = json.loads((only_run(tmp / "runs", "ingest") / "catalog.json").read_text())
    assert len(cat["scenes"]) == 3


def test_mosaic_and_demosaic(setup):
    tmp, data, pattern, _ = setup
    m = tmp / "m.npz"
    assert main(["mosaic", "--cube", str(data / "scene00.mspc"), "--pattern", str(pattern), "--out", str(m)]) == 0
    rec = tmp / "rec.mspc"
    assert main(["demosaic", "--mosaic", str(m), "--method", "bilinear", "--out", str(rec)]) == 0
    cube = read_cube(rec)
    assert cube.shape == (16, 16, 4, 4) and cube.wavelengths == (450.0, 520.0, 590.0, 660.0)
    assert main(["demosaic", "--mosaic", str(m), "--method", "network", "--out", str(rec)]) == 2


def test_train_then_demosaic_with_checkpoint(setup):
    tmp, data, pattern, common = setup
    assert main(["train", "--variant", "Net3", "--epochs", "1"] + common) == 0
    ckpt = only_run(tmp / "runs", "train-Net3") / "last"
    m = tmp / "m.npz"
    main(["mosaic", "--cube", str(data / "scene02.mspc"), "--pattern", str(pattern), "--out", str(m)])
    assert main(["demosaic", "--mosaic", str(m), "--method", "network", "--checkpoint", str(ckpt),
                 "--out", str(tmp / "net.mspc")]) == 0
    assert read_cube(tmp / "net.mspc").shape == (16, 16, 4, 4)


def test_eval_and_report(setup, capsys):
    tmp, _, _, common = setup
    assert main(["eval", "--methods", "bilinear", "wiener", "--with-reference"] + common) == 0
    assert "Bilinear" in capsys.readouterr().out
    run = only_run(tmp / "runs", "compare")
    assert [r["method"] for r in read_psnr_table(run / "psnr.csv")] == ["Bilinear", "Wiener"]
    assert "TCPDNet (3DConv)" in (run / "psnr.csv").read_text()
    merged = tmp / "merged.csv"
    assert main(["report", str(run), "--reference", "comparison", "--out", str(merged)]) == 0
    text = merged.read_text()
    assert text.count("measured") == 2 and "28.02" in text


def test_ablate_command(setup):
    tmp, _, _, common = setup
    assert main(["ablate", "--variants", "Net1", "Full"] + common) == 0
    run = only_run(tmp / "runs", "ablate")
    assert [r["method"] for r in read_psnr_table(run / "psnr.csv")] == ["Net1", "MSPDNet"]


def test_spec_file_with_overrides(setup):
    tmp, data, pattern, _ = setup
    spec = {"pattern": str(pattern), "data_root": str(data), "test_scenes": ["scene01"],
            "output_dir": str(tmp / "runs"), "methods": ["bilinear"]}
    (tmp / "spec.json").write_text(json.dumps(spec))
    assert main(["eval", "--spec", str(tmp / "spec.json"), "--test-scenes", "scene02"]) == 0
    saved = json.loads((only_run(tmp / "runs", "eval") / "spec.json").read_text())
    assert saved["test_scenes"] == ["scene02"]


def test_errors_exit_with_code_2(setup, capsys):
    tmp, _, pattern, common = setup
    args = ["eval", "--pattern", str(pattern), "--data-root", str(tmp / "data"), "--test-scenes", "missing",
            "--output-dir", str(tmp / "runs")]
    assert main(args) == 2
    assert "stage 'ingest'" in capsys.readouterr().err
    assert main(["eval", "--data-root", str(tmp)]) == 2
    assert "pattern file is required" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["demosaic", "--method", "nearest"])
