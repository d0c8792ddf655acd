import csv
import json
from collections import defaultdict

import pytest

from nmil import runs
from nmil.bagdata import load_manifest, oracle_exp1, oracle_exp2, oracle_exp3
from nmil.cli import main
from nmil.exceptions import ContractError, StructureError
from nmil.model import load_model

TINY = ["--synthetic", "--hidden-dims", "8", "--embed-dim", "6", "--attention-dim", "4", "--max-epochs", "2"]


def test_generate_is_byte_identical(tmp_path, capsys):
    args = ["generate", "--experiment", "exp2", "--synthetic", "--seed", "7", "--n-train", "200"]
    assert main([*args, "--out", str(tmp_path / "a.json")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.json")]) == 0
    a, b = (tmp_path / "a.json").read_bytes(), (tmp_path / "b.json").read_bytes()
    assert a == b
    assert len(json.loads(a)["samples"]) == 200
    assert "200 samples" in capsys.readouterr().out


@pytest.mark.parametrize("exp", ["exp1", "exp2", "exp3"])
def test_generated_manifest_matches_oracles(tmp_path, exp):
    path = tmp_path / "m.json"
    assert main(["generate", "--experiment", exp, "--synthetic", "--n-train", "50", "--out", str(path)]) == 0
    ds = load_manifest(path, verify=False)
    for s in ds:
        tree = s.digit_tree()
        if exp == "exp1":
            y = oracle_exp1([d for bag in tree for d in bag])
        elif exp == "exp2":
            y = oracle_exp2(tree)[0]
        else:
            y = oracle_exp3(tree)[0]
        assert y == s.weak_label


def test_exp3_with_two_levels_is_rejected(tmp_path, capsys):
    code = main(["generate", "--experiment", "exp3", "--levels", "2", "--synthetic", "--out", str(tmp_path / "x.json")])
    assert code != 0
    assert "3 levels" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_exp3_mil_is_rejected():
    with pytest.raises(ContractError):
        runs.RunConfig(experiment="exp3", architecture="mil", synthetic=True)


def test_needs_a_data_source():
    with pytest.raises(ContractError):
        runs.RunConfig(experiment="exp1")


def test_unknown_config_key():
    with pytest.raises(ContractError):
        runs.RunConfig.from_dict({"synthetic": True, "learning_rat": 0.1})


def test_train_writes_run_and_is_reproducible(tmp_path, capsys):
    base = ["train", "--experiment", "exp1", "--n-train", "40", "--n-test", "20", "--quiet", *TINY]
    assert main([*base, "--out", str(tmp_path / "r1")]) == 0
    first = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= first["metrics"]["f1"] <= 1.0
    assert main([*base, "--out", str(tmp_path / "r2")]) == 0
    second = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert first["checksum"] == second["checksum"]
    for name in ["model.nmil", "report.json", "history.jsonl", "train.manifest.json", "test.manifest.json"]:
        assert (tmp_path / "r1" / name).exists()
    report = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert report["checksum"] == runs.report_checksum(report)
    assert report["config"]["seed"] == 0 and report["config"]["synthetic"] is True
    assert (tmp_path / "r1" / "history.jsonl").read_text().count("\n") == len(report["history"])


def test_config_file_overridden_by_flags(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "exp1", "synthetic": True, "n_train": 30, "n_test": 10, "max_epochs": 5}))
    assert main(["train", "--config", str(cfg), "--max-epochs", "1", "--quiet", "--out", str(tmp_path / "r"),
                 "--hidden-dims", "4", "--embed-dim", "3", "--attention-dim", "2"]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["config"]["max_epochs"] == 1
    assert report["config"]["n_train"] == 30
    assert len(report["history"]) <= 2


def test_train_from_manifests(tmp_path, capsys):
    for split, n in (("train", 30), ("test", 10)):
        assert main(["generate", "--experiment", "exp1", "--synthetic", "--split", split,
                     f"--n-{split}", str(n), "--out", str(tmp_path / f"{split}.json")]) == 0
    assert main(["train", "--experiment", "exp1", "--train-manifest", str(tmp_path / "train.json"),
                 "--test-manifest", str(tmp_path / "test.json"), "--quiet", *TINY]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    m = out["metrics"]
    assert m["tp"] + m["fp"] + m["tn"] + m["fn"] == 10


def test_epoch_records_printed(tmp_path, capsys):
    assert main(["train", "--experiment", "exp1", "--n-train", "20", "--n-test", "10", *TINY]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    records = [json.loads(x) for x in lines[:-1]]
    assert [r["epoch"] for r in records] == list(range(1, len(records) + 1))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--experiment", "exp2", "--n-train", "30", "--n-test", "12", "--quiet",
                 "--out", str(out), *TINY]) == 0
    return out


def test_attend_exports_csv_and_svg(trained_run, tmp_path):
    csv_path, svg_dir = tmp_path / "att.csv", tmp_path / "svg"
    assert main(["attend", "--model", str(trained_run / "model.nmil"), "--manifest",
                 str(trained_run / "test.manifest.json"), "--out", str(csv_path), "--svg", str(svg_dir),
                 "--samples", "0", "3"]) == 0
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    ds = load_manifest(trained_run / "test.manifest.json")
    # one row per tree membership edge: every instance plus every inner bag
    expected = sum(s.layout().instances.shape[0] + len(s.root.members) for s in ds)
    assert len(rows) == expected
    groups = defaultdict(float)
    for r in rows:
        groups[(r["sample_id"], r["level"], r["bag_index"])] += float(r["weight"])
    assert all(abs(v - 1.0) <= 1e-9 for v in groups.values())
    assert sorted(p.name for p in svg_dir.iterdir()) == ["sample_0.svg", "sample_3.svg"]
    text = (svg_dir / "sample_0.svg").read_text()
    assert text.startswith("<svg") and text.count("<rect") == sum(1 for r in rows if r["sample_id"] == "0")


def test_attend_depth_mismatch(trained_run, tmp_path, capsys):
    m3 = tmp_path / "exp3.json"
    assert main(["generate", "--experiment", "exp3", "--synthetic", "--n-train", "10", "--out", str(m3)]) == 0
    code = main(["attend", "--model", str(trained_run / "model.nmil"), "--manifest", str(m3),
                 "--out", str(tmp_path / "a.csv")])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_attend_mil_model_on_nested_manifest(tmp_path):
    out = tmp_path / "mil"
    assert main(["train", "--experiment", "exp1", "--architecture", "mil", "--n-train", "20", "--n-test", "8",
                 "--quiet", "--out", str(out), *TINY]) == 0
    assert load_model(out / "model.nmil").levels == 1
    assert main(["attend", "--model", str(out / "model.nmil"), "--manifest", str(out / "test.manifest.json"),
                 "--out", str(tmp_path / "a.csv")]) == 0


def test_missing_model_file(tmp_path, capsys):
    code = main(["attend", "--model", str(tmp_path / "nope"), "--manifest", str(tmp_path / "m"),
                 "--out", str(tmp_path / "a.csv")])
    assert code != 0


def test_table1_grid_marks_failed_cells(monkeypatch):
    real_run = runs.run

    def flaky(cfg, *a, **kw):
        if cfg.experiment == "exp2" and cfg.architecture == "mil":
            raise StructureError("boom")
        return real_run(cfg, *a, **kw)

    monkeypatch.setattr(runs, "run", flaky)
    base = {"synthetic": True, "n_train": 16, "n_test": 8, "max_epochs": 1, "hidden_dims": [4], "embed_dim": 3,
            "attention_dim": 2}
    cells = runs.table1(base)
    assert len(cells) == 10
    assert cells["exp2/mil/att"]["f1"] is None and "boom" in cells["exp2/mil/att"]["error"]
    assert cells["exp3/nmil/att"]["f1"] is not None
    table = runs.format_table1(cells)
    assert "ERR" in table and table.count("N/A") == 2


def test_table1_cli(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_train": 12, "n_test": 6, "max_epochs": 1, "hidden_dims": [4], "embed_dim": 3,
                               "attention_dim": 2, "per_experiment": {"exp3": {"n_train": 10}}}))
    assert main(["table1", "--synthetic", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    cells = json.loads((tmp_path / "t" / "table1.json").read_text())
    assert cells["exp3/nmil/att"]["report"]["config"]["n_train"] == 10
    assert cells["exp1/nmil/att"]["report"]["config"]["n_train"] == 12
    assert "| NMIL |" in (tmp_path / "t" / "table1.md").read_text()
