import csv
import json

import numpy as np
import pytest

from oodlab import labcli
from oodlab.labcli import (ConfigError, ProvenanceError, ScenarioConfig, default_scenario, emit_figures, emit_report,
                           load_bundle, main, parse_report_csv, run_scenario)
from oodlab.trainer import TrainConfig

TINY = TrainConfig(epochs=2, batch_size=8, n_train_pool=20, n_test=8)


def tiny(name="tiny", **kw):
    base = dict(name=name, train_spec=(150, 150), test_specs=((130, 170), (170, 130)), seeds=(0,),
                train=TINY, n_saliency=2)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return run_scenario(tiny(seeds=(0, 1)), tmp_path_factory.mktemp("runs"))


# ---------------------------------------------------------------- configs

def test_default_scenarios_mirror_the_table():
    s1, s2, s3 = (default_scenario(i) for i in (1, 2, 3))
    assert s1.train_spec == (150, 150) and s1.test_specs == ((130, 170), (170, 130))
    assert s2.train_spec == (180, 160) and s2.test_specs == ((150, 190), (190, 150))
    assert s3.train_spec == (180, 150) and s3.test_specs == ((150, 190),) and s3.losses == ("ce",)
    assert s1.losses == ("ce", "contrastive") and s1.seeds == (0, 1, 2, 3, 4)
    with pytest.raises(ConfigError):
        default_scenario(4)


def test_config_json_round_trip():
    cfg = tiny(eval_checkpoint="best", pca_fit="all")
    back = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.hash == cfg.hash
    assert cfg.hash != tiny(seeds=(0, 1)).hash


@pytest.mark.parametrize("patch", [
    {"schema_version": 99}, {"losses": ["hinge"]}, {"train_spec": [155, 150]}, {"test_specs": []},
    {"seeds": [1, 1]}, {"bogus": 1}, {"train": {"seed": 3}}, {"train": {"epochs": -1}}, {"pca_fit": "test"},
])
def test_invalid_configs_rejected(patch):
    raw = tiny().to_dict()
    raw.update(patch)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(raw)


def test_data_seeds_depend_on_seed_role_and_spec():
    spec = tiny().spec((150, 150))
    seeds = {labcli.data_seed(s, r, spec) for s in (0, 1) for r in ("train", "test")}
    assert len(seeds) == 4
    assert labcli.data_seed(0, "test", spec) != labcli.data_seed(0, "test", tiny().spec((130, 170)))


# ---------------------------------------------------------------- runs

def test_bundle_layout(bundle):
    root = bundle.directory
    assert root.name == f"tiny-{bundle.config_hash}"
    runs = sorted((root / "runs").iterdir())
    assert len(runs) == 4
    for run in runs:
        assert run.name.startswith("run-")
        for name in ("config.json", "history.csv", "checkpoint-best/params.bin", "checkpoint-final/params.bin",
                     "pca.csv", "ellipses.json", "saliency/index.json", "result.json"):
            assert (run / name).exists(), name
        index = json.loads((run / "saliency" / "index.json").read_text())
        assert len(index["maps"]) == 3 * 2
        assert (run / "saliency" / index["maps"][0]["map"]).read_bytes().startswith(b"P5\n# config_hash=")


def test_metrics_csv_rows(bundle):
    with open(bundle.directory / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0])[:8] == ["run_id", "seed", "D_tr", "D_te", "loss", "acc", "se", "sp"]
    assert len(rows) == 2 * 2 * 3
    assert {r["config_hash"] for r in rows} == {bundle.config_hash}
    tests_only = [r for r in rows if r["D_te"] != "train"]
    assert len(tests_only) == 2 * 2 * 2


def test_one_seed_gives_four_result_rows(tmp_path):
    b = run_scenario(tiny(), tmp_path)
    cells = [r for r in b.aggregate() if r.d_te != "train"]
    assert len(cells) == 4 and all(r.n == 1 for r in cells)


def test_scenario3_shape_gives_one_row(tmp_path):
    cfg = tiny("s3", train_spec=(180, 150), test_specs=((150, 190),), losses=("ce",))
    b = run_scenario(cfg, tmp_path)
    assert len([r for r in b.aggregate() if r.d_te != "train"]) == 1


def test_rerun_reuses_runs_and_is_identical(bundle):
    before = (bundle.directory / "metrics.csv").read_bytes()
    again = run_scenario(bundle.config, bundle.directory.parent)
    assert (again.directory / "metrics.csv").read_bytes() == before


def test_pca_bases_orthonormal(bundle):
    for r in bundle.runs:
        b = r.projection.basis
        np.testing.assert_allclose(b @ b.T, np.eye(2), atol=1e-10)


# ---------------------------------------------------------------- reports

def test_report_columns_and_round_trip(bundle):
    text, csv_text = emit_report(bundle)
    header = text.splitlines()[1].split()
    assert header == ["D_tr", "D_te", "Loss", "Acc", "SE", "SP"]
    assert csv_text.splitlines()[0].startswith("D_tr,D_te,Loss,Acc,SE,SP")
    parsed = parse_report_csv(csv_text)
    assert [vars(r) for r in parsed] == [vars(r) for r in bundle.aggregate()]
    assert len(parsed) == 2 * 3


def test_report_all_correct_row(bundle):
    row = bundle.aggregate()[0]
    row.acc = row.se = row.sp = 1.0
    row.n = 1
    assert labcli._cell(1.0, 0.0, 1) == "1.00"
    line = "  ".join(labcli._cell(v, 0, 1) for v in (row.acc, row.se, row.sp))
    assert line == "1.00  1.00  1.00"


def test_partial_bundle_marks_missing(tmp_path, monkeypatch):
    real = labcli._execute

    def flaky(cfg, loss, seed, run_dir, h):
        if loss == "contrastive":
            raise RuntimeError("boom")
        return real(cfg, loss, seed, run_dir, h)

    monkeypatch.setattr(labcli, "_execute", flaky)
    b = run_scenario(tiny(), tmp_path)
    assert b.partial and b.failures[0]["loss"] == "contrastive"
    text, _ = emit_report(b)
    assert "missing" in text and "partial bundle" in text
    assert all(r.missing for r in b.aggregate() if r.loss == "Contrastive")


def test_mismatched_hash_rejected(bundle, tmp_path):
    import shutil
    copy = tmp_path / bundle.directory.name
    shutil.copytree(bundle.directory, copy)
    run = sorted((copy / "runs").iterdir())[0]
    blob = json.loads((run / "ellipses.json").read_text())
    blob["config_hash"] = "0" * 16
    (run / "ellipses.json").write_text(json.dumps(blob))
    with pytest.raises(ProvenanceError):
        load_bundle(copy)


# ---------------------------------------------------------------- figures

def test_figures_per_model(bundle, tmp_path):
    paths = emit_figures(bundle, tmp_path / "a")
    names = sorted(p.name for p in paths)
    assert names == sorted(f"{k}-{loss}-seed{s}.svg" for k in ("pca", "saliency")
                           for loss in ("ce", "contrastive") for s in (0, 1))
    for p in paths:
        text = p.read_text()
        assert text.startswith("<svg") and f"config_hash={bundle.config_hash}" in text
    sal = (tmp_path / "a" / "saliency-ce-seed0.svg").read_text()
    assert sal.count("<text") == 1 + 3  # title plus one label per row
    again = emit_figures(bundle, tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]


def test_pca_figure_has_ellipses_and_both_markers(bundle, tmp_path):
    svg = emit_figures(bundle, tmp_path)[0].read_text()
    assert svg.count("<ellipse") == 6
    assert "stroke-dasharray" in svg and "<circle" in svg and "<path" in svg


# ---------------------------------------------------------------- command line

def test_cli_generate(tmp_path, capsys):
    assert main(["generate", "--spec", "180,160", "--n", "4", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "samples.bin").read_bytes()[:4] == b"OODL"
    assert main(["generate", "--spec", "181,160", "--n", "4", "--out", str(tmp_path / "e")]) == 2
    assert main(["generate", "--spec", "180,160", "--n", "3", "--out", str(tmp_path / "e")]) == 2


def test_cli_run_report_figures(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny("cli", losses=("ce",)).to_dict()))
    assert main(["run", "--scenario", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
    root = next((tmp_path / "o").iterdir())
    assert main(["report", str(root)]) == 0
    assert "D_tr" in capsys.readouterr().out
    assert main(["figures", str(root)]) == 0
    assert (root / "figures" / "pca-ce-seed0.svg").exists()


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "name": "x"}')
    assert main(["run", "--scenario", str(bad)]) == 2
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--scenario", "1", "--seeds", "0"]) == 2
    assert main(["report", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2

    def always_fail(*a, **k):
        raise RuntimeError("no")

    monkeypatch.setattr(labcli, "_execute", always_fail)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(tiny("fail", losses=("ce",)).to_dict()))
    assert main(["run", "--scenario", str(good), "--out", str(tmp_path / "f")]) == 3


def test_cli_partial_exit_code(tmp_path, monkeypatch):
    real = labcli._execute

    def second_fails(cfg, loss, seed, run_dir, h):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, loss, seed, run_dir, h)

    monkeypatch.setattr(labcli, "_execute", second_fails)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(tiny("part", losses=("ce",), seeds=(0, 1)).to_dict()))
    assert main(["run", "--scenario", str(good), "--out", str(tmp_path / "p")]) == 4
    root = next((tmp_path / "p").iterdir())
    assert main(["report", str(root)]) == 4


def test_cli_calibrate(capsys):
    assert main(["calibrate"]) == 0
    out = capsys.readouterr().out
    assert "97.8" in out and "(180,160)" in out
