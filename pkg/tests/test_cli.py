import json

import pytest

from conftest import QUICK
from ltgcd import cli
from ltgcd.config import load_config
from ltgcd.report import read_csv

OVERRIDES = [f"{k}={v}" for k, v in QUICK.items()]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A synthesized dataset plus one complete two-stage run directory."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds.bin"
    assert cli.main(["synth", "--out", str(ds), *OVERRIDES]) == 0
    run_dir = root / "run"
    assert cli.main(["train", "--dataset", str(ds), "--run-dir", str(run_dir), *OVERRIDES]) == 0
    return ds, run_dir


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


def test_synth_outputs(run):
    ds, _ = run
    assert ds.exists()
    assert ds.with_suffix(".config.json").exists()
    rows = read_csv(ds.with_suffix(".labels.csv"))
    assert list(rows[0]) == ["index", "label", "labeled"]
    labels = sorted({int(r["label"]) for r in rows})
    assert labels == list(range(QUICK["C"]))


def test_train_run_directory(run):
    _, run_dir = run
    for name in ("config.json", "report.json", "report_stage1.json", "groups.csv",
                 "metrics.csv", "pi.csv", "estimates.csv", "weights.csv", "class_sizes.json",
                 "checkpoints/stage1.npz", "checkpoints/stage2.npz"):
        assert (run_dir / name).exists(), name
    rep = json.loads((run_dir / "report.json").read_text())
    assert rep["stage"] == "2"
    assert 0 <= rep["acc_all"] <= 100
    metrics = read_csv(run_dir / "metrics.csv")
    assert [r["stage"] for r in metrics] == ["1"] * 3 + ["2"] * 2
    assert [g["subset"] for g in read_csv(run_dir / "groups.csv")] == ["all", "known", "novel"]


def test_resolved_config_round_trips(run):
    _, run_dir = run
    cfg = load_config(run_dir / "config.json")
    for key, value in QUICK.items():
        assert getattr(cfg, key) == value


def test_stage2_only_resumes_from_checkpoint(run, tmp_path):
    ds, run_dir = run
    target = tmp_path / "resume"
    (target / "checkpoints").mkdir(parents=True)
    (target / "checkpoints" / "stage1.npz").write_bytes(
        (run_dir / "checkpoints" / "stage1.npz").read_bytes())
    args = ["train", "--dataset", str(ds), "--run-dir", str(target), "--stage", "2", *OVERRIDES]
    assert cli.main(args) == 0
    assert (target / "report.json").read_text() == (run_dir / "report.json").read_text()


def test_eval_writes_report(run, capsys):
    ds, run_dir = run
    ckpt = run_dir / "checkpoints" / "stage2.npz"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--dataset", str(ds)]) == 0
    out = capsys.readouterr().out
    assert "Old    New    All" in out and "Many" in out
    rep = json.loads((run_dir / "eval" / "report.json").read_text())
    assert rep == json.loads((run_dir / "report.json").read_text())


def test_report_renders_figures(run):
    _, run_dir = run
    assert cli.main(["report", "--run-dir", str(run_dir)]) == 0
    for name in ("losses.png", "distribution.png", "class_accuracy.png", "weights.png"):
        png = run_dir / name
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "grad.csv"
    assert cli.main(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert {r["result"] for r in rows} == {"pass"}
    assert len(capsys.readouterr().out.strip().splitlines()) == len(rows)


def test_ablate_command(run, tmp_path):
    ds, _ = run
    out = tmp_path / "abl.csv"
    args = ["ablate", "--axis", "K", "--values", "2,3", "--dataset", str(ds), "--out", str(out),
            *OVERRIDES]
    assert cli.main(args) == 0
    rows = read_csv(out)
    assert list(rows[0]) == list(cli.ABLATION_COLUMNS)
    assert [r["value"] for r in rows] == ["2", "3"]
    assert out.with_suffix(".config.json").exists()


def test_missing_file_is_io_error(tmp_path, capsys):
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.npz"),
                     "--dataset", str(tmp_path / "nope.bin")])
    assert code == cli.EXIT_IO
    assert error_line(capsys).startswith("ltgcd: error code=4 ")


def test_corrupt_dataset_is_io_error(run, tmp_path, capsys):
    _, run_dir = run
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a dataset")
    code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoints" / "stage2.npz"),
                     "--dataset", str(bad)])
    assert code == cli.EXIT_IO
    error_line(capsys)


@pytest.mark.parametrize("override", ["lr=abc", "no_such_key=1", "momentum=2", "lr=inf"])
def test_bad_override_is_config_error(tmp_path, capsys, override):
    code = cli.main(["synth", "--out", str(tmp_path / "x.bin"), override])
    assert code == cli.EXIT_CONFIG
    assert error_line(capsys).startswith("ltgcd: error code=2 type=ConfigError")


def test_dataset_config_mismatch_is_config_error(run, tmp_path, capsys):
    ds, _ = run
    args = ["train", "--dataset", str(ds), "--run-dir", str(tmp_path / "r"), *OVERRIDES, "C=5",
            "n_known=2"]
    assert cli.main(args) == cli.EXIT_CONFIG
    error_line(capsys)


def test_exit_code_mapping():
    from ltgcd.trainer import NumericalError
    assert cli.exit_code_for(NumericalError("x")) == cli.EXIT_NUMERICAL
    assert cli.exit_code_for(FloatingPointError("x")) == cli.EXIT_NUMERICAL
    assert cli.exit_code_for(FileNotFoundError("x")) == cli.EXIT_IO
