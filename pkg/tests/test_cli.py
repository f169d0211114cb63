import json

import pandas as pd
import pytest

import cli
from formats import read_adversarial, read_dataset

TINY = ["--set", "dataset.d=64", "--set", "dataset.n=8", "--set", "dataset.n_adv=16", "--set", "network.m=8",
        "--set", "train.max_epochs=10", "--set", "experiment.n_probes=200",
        "--set", "output.figure_format=\"html\""]


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(cli, "setup_logging", lambda verbose=0: None)


def _gen(tmp_path, *extra, source="orthogonalized", name="ortho.afpd"):
    out = tmp_path / name
    code = cli.main(["gen", "--source", source, "--d", "64", "--n", "8", "--seed", "1", "--out", str(out), *extra])
    return code, out


def test_gen_is_reproducible(tmp_path):
    code, out = _gen(tmp_path)
    assert code == 0
    first = out.read_bytes()
    code, _ = _gen(tmp_path, "--force")
    assert code == 0
    assert out.read_bytes() == first
    assert read_dataset(out).n == 8


def test_gen_refuses_to_overwrite(tmp_path):
    _gen(tmp_path)
    code, _ = _gen(tmp_path)
    assert code == 1


def test_gen_default_path_and_csv(tmp_path):
    csv = tmp_path / "u.csv"
    code = cli.main(["gen", "--source", "uniform", "--d", "16", "--n", "4", "--out-dir", str(tmp_path), "--csv", str(csv)])
    assert code == 0
    assert (tmp_path / "datasets" / "uniform-d16-n4-s0.afpd").exists()
    assert list(pd.read_csv(csv).columns)[-1] == "y"


def test_dry_run_writes_nothing(tmp_path, capsys):
    code = cli.main(["run", "--dry-run", "--out-dir", str(tmp_path / "runs"), *TINY])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["dataset"]["d"] == 64
    assert not (tmp_path / "runs").exists()


def test_unknown_override_fails(capsys):
    assert cli.main(["run", "--dry-run", "--set", "dataset.bogus=1"]) == 1


def test_check_theorem1(tmp_path, capsys):
    _, ortho = _gen(tmp_path)
    assert cli.main(["check", "--suite", "theorem1", "--dataset", str(ortho)]) == 0
    assert "PASS theorem1" in capsys.readouterr().out
    _, noise = _gen(tmp_path, source="uniform", name="noise.afpd")
    assert cli.main(["check", "--suite", "theorem1", "--dataset", str(noise)]) == 1


def test_check_dataset_suites_need_a_dataset():
    assert cli.main(["check", "--suite", "natural"]) == 1


def test_check_concentration(capsys):
    assert cli.main(["check", "--suite", "concentration", "--trials", "200"]) == 0


def test_check_uniform_takes_direction_from_natural_data(tmp_path, capsys):
    size = ("--d", "32768", "--n", "2")
    _, natural = _gen(tmp_path, *size, "--seed", "2")
    _, noise = _gen(tmp_path, *size, source="uniform", name="noise.afpd")
    code = cli.main(["check", "--suite", "uniform", "--dataset", str(noise), "--natural", str(natural),
                     "--set", "network.gamma=0.9"])
    out = capsys.readouterr().out
    assert code == 0
    assert "PASS uniform" in out
    parts = json.loads(out[out.index("{"):])["uniform"][0]["parts"]
    assert [p["name"] for p in parts] == ["norm_band", "pairwise", "projection", "uniform_main"]


def test_check_uniform_needs_natural_data(tmp_path):
    _, noise = _gen(tmp_path, source="uniform", name="noise.afpd")
    assert cli.main(["check", "--suite", "uniform", "--dataset", str(noise)]) == 1


def test_train_and_attack(tmp_path):
    _, ortho = _gen(tmp_path)
    params = tmp_path / "net.afpw"
    assert cli.main(["train", "--dataset", str(ortho), "--out", str(params),
                     "--set", "network.m=8", "--set", "train.max_epochs=20"]) == 0
    assert params.with_suffix(".report.json").exists()
    adv_path = tmp_path / "adv.afpd"
    assert cli.main(["attack", "--dataset", str(ortho), "--out", str(adv_path), "--set", "network.m=8",
                     "--set", "attack.target_rule=flip", "--set", "attack.epsilon=0.5"]) == 0
    record = read_adversarial(adv_path)
    assert (record.targets == -record.base_labels).all()
    pgd_path = tmp_path / "pgd.afpd"
    assert cli.main(["attack", "--dataset", str(ortho), "--params", str(params), "--out", str(pgd_path),
                     "--set", "attack.mode=pgd", "--set", "attack.steps=5"]) == 0


def test_run_writes_results_and_maps(tmp_path):
    out = tmp_path / "runs"
    code = cli.main(["run", "--out-dir", str(out), "--set", "experiment.name=\"tiny\"",
                     "--set", "experiment.map_resolution=8", *TINY])
    assert code == 0
    run_dir = out / "tiny"
    result = json.loads((run_dir / "result.json").read_text())
    assert result["name"] == "tiny"
    for name in ("config.json", "summary.csv", "maps/standard.csv", "maps/student_points.csv", "maps/student.html"):
        assert (run_dir / name).exists()
    figure = tmp_path / "student.html"
    assert cli.main(["plot", "--map", str(run_dir / "maps" / "student.csv"),
                     "--points", str(run_dir / "maps" / "student_points.csv"), "--out", str(figure)]) == 0
    assert figure.exists()


def test_run_reports_the_failing_stage(tmp_path):
    assert cli.main(["run", "--out-dir", str(tmp_path), "--set", "dataset.source=\"file\"", *TINY]) == 1


def test_sweep_over_n_adv(tmp_path):
    out = tmp_path / "runs"
    code = cli.main(["sweep", "--out-dir", str(out), "--axis", "n_adv", "--values", "16,64,256",
                     "--set", "experiment.map_resolution=0", *TINY])
    assert code == 0
    sweep_dir = out / "experiment-sweep-n_adv"
    frame = pd.read_csv(sweep_dir / "summary.csv")
    assert frame["value"].tolist() == [16, 64, 256]
    assert len(list((sweep_dir / "cells").glob("*.json"))) == 3
    assert (sweep_dir / "sweep.html").exists()
    plot = tmp_path / "sweep.html"
    assert cli.main(["plot", "--sweep", str(sweep_dir / "summary.csv"), "--out", str(plot)]) == 0


def test_plot_needs_an_input(tmp_path):
    assert cli.main(["plot", "--out", str(tmp_path / "x.html")]) == 1
