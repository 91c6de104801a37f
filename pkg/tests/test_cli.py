"""Command-line surface: smoke paths, determinism, exit codes, artifacts."""

import csv
import json

import pytest

from paygap.cli import main
from paygap.design import ModelSpec
from paygap.simulate import default_generator_config, generate, ob_spec


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    """Small generated dataset + schema + model grid on disk."""
    root = tmp_path_factory.mktemp("fixture")
    cfg = default_generator_config(D=4)
    ds = generate(cfg, 0)
    ds.write_csv(root / "data.csv")
    (root / "schema.json").write_text(json.dumps(cfg.schema().to_json()))
    specs = [
        ob_spec(),
        ModelSpec("RI", ("experience", "education", "occupation"), ("intercept",)),
    ]
    (root / "models.json").write_text(
        json.dumps({"models": [s.to_json() for s in specs]})
    )
    return root


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_fit_smoke(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run_cli(
        "fit",
        "--data", fixture_dir / "data.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--out", out,
    )
    assert code == 0
    doc = json.loads((out / "fits.json").read_text())
    assert len(doc["fits"]) == 4  # 2 models x 2 genders
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit"
    assert "config_hash" in manifest


def test_select_smoke(fixture_dir, tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli(
        "select",
        "--data", fixture_dir / "data.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--reps", 50,
        "--seed", 4,
        "--out", out,
    )
    assert code == 0
    doc = json.loads((out / "selection.json").read_text())
    assert doc["winner"] in ("OB", "RI")
    table = capsys.readouterr().out
    assert "OB" in table and "RI" in table and "score" in table


def test_decompose_smoke_and_rows(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run_cli(
        "decompose",
        "--data", fixture_dir / "data.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--model", "RI",
        "--iterations", 20,
        "--seed", 12,
        "--out", out,
    )
    assert code == 0
    with open(out / "decomposition.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5  # 4 areas + global
    assert rows[-1]["area"] == "global"
    header = list(rows[0])
    assert header == [
        "area", "n_m", "n_w", "gpg", "gpg_q", "gpg_q_lo", "gpg_q_hi",
        "gpg_u", "gpg_u_lo", "gpg_u_hi", "bias", "unstable",
    ]
    assert (out / "manifest.json").exists()


def test_decompose_needs_model_choice(fixture_dir, tmp_path):
    code = run_cli(
        "decompose",
        "--data", fixture_dir / "data.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--iterations", 10,
        "--seed", 1,
        "--out", tmp_path / "o",
    )
    assert code == 2


def test_unknown_model_label(fixture_dir, tmp_path):
    code = run_cli(
        "decompose",
        "--data", fixture_dir / "data.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--model", "nope",
        "--iterations", 10,
        "--seed", 1,
        "--out", tmp_path / "o",
    )
    assert code == 2


def test_missing_data_file(fixture_dir, tmp_path):
    code = run_cli(
        "select",
        "--data", fixture_dir / "missing.csv",
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--reps", 50,
        "--seed", 1,
        "--out", tmp_path / "o",
    )
    assert code == 3


def test_bad_data_rows(fixture_dir, tmp_path):
    bad = tmp_path / "bad.csv"
    with open(fixture_dir / "data.csv") as fh:
        lines = fh.read().splitlines()
    parts = lines[1].split(",")
    parts[0] = "-1.0"
    bad.write_text("\n".join([lines[0], ",".join(parts)]) + "\n")
    code = run_cli(
        "fit",
        "--data", bad,
        "--schema", fixture_dir / "schema.json",
        "--models", fixture_dir / "models.json",
        "--out", tmp_path / "o",
    )
    assert code == 3


def test_bad_parameter_value_is_config_error(tmp_path):
    code = run_cli(
        "simulate",
        "--areas", 4,
        "--replicates", 1,
        "--iterations", 10,
        "--reps", 30,  # below the bootstrap minimum
        "--seed", 9,
        "--out", tmp_path / "o",
    )
    assert code == 2


def test_seed_required():
    with pytest.raises(SystemExit) as err:
        main(["select", "--data", "x", "--schema", "y", "--models", "z", "--out", "o"])
    assert err.value.code == 2


def test_decompose_byte_determinism(fixture_dir, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        base = tmp_path / name
        base.mkdir()
        code = run_cli(
            "decompose",
            "--data", fixture_dir / "data.csv",
            "--schema", fixture_dir / "schema.json",
            "--models", fixture_dir / "models.json",
            "--model", "RI",
            "--iterations", 15,
            "--seed", 5,
            "--out", base / "out",
        )
        assert code == 0
        outs.append(base / "out")
    for fname in ("decomposition.csv", "decomposition.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_simulate_rows_and_determinism(tmp_path):
    outs = []
    for name, threads in (("s1", 1), ("s2", 2)):
        base = tmp_path / name
        base.mkdir()
        code = run_cli(
            "simulate",
            "--areas", 4,
            "--replicates", 2,
            "--iterations", 10,
            "--reps", 50,
            "--seed", 13,
            "--threads", threads,
            "--out", base / "out",
        )
        assert code == 0
        outs.append(base / "out")
    with open(outs[0] / "emse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["estimator"] for r in rows] == [
        "OB", "MS1", "MS2", "MS3", "MS4", "MS5", "MS6", "MS7", "MS8", "XG"
    ]
    # byte-identical regardless of --threads
    for fname in ("emse.csv", "coverage.csv", "results.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_simulate_drop_flag(tmp_path):
    out = tmp_path / "out"
    code = run_cli(
        "simulate",
        "--areas", 4,
        "--replicates", 1,
        "--iterations", 10,
        "--reps", 50,
        "--seed", 21,
        "--drop", "education",
        "--out", out,
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["drop"] == ["education"]
