import csv
import io
import json
import shutil

import numpy as np
import pytest
import yaml

from conftest import TINY, tiny_model, write_run_spec
from histoeval.cli import main
from histoeval.errors import ProtocolError
from histoeval.models import save_checkpoint
from histoeval.pipeline import STAGES, SpecError, load_spec, read_scores, run_spec, write_scores
from histoeval.reporting import (MANIFEST_NAME, METRIC_COLUMNS, ArtifactManifest, format_cell, metric_rows_to_csv,
                                 render_tables, write_text)
from histoeval.robustness import RobustnessReport, reports_to_csv
from histoeval.stats import ScoreSample


@pytest.fixture(scope="module")
def full_run(toy_root, tmp_path_factory):
    _, a, b = toy_root
    d = tmp_path_factory.mktemp("run")
    spec = write_run_spec(d / "spec.yaml", a, b, out="out")
    code = main(["run", str(spec)])
    return code, d / "out"


def test_full_run_succeeds_and_records_every_stage(full_run):
    code, out = full_run
    assert code == 0
    doc = json.loads((out / MANIFEST_NAME).read_text())
    assert doc["stages"] == {s: "ok" for s in STAGES}
    for rel in ("reports/metrics.csv", "reports/compare.csv", "reports/interpret.csv", "reports/attention.csv",
                "reports/robustness.csv", "tables/metrics.md", "tables/interpret.md", "tables/robustness.md",
                "stain/stain_model.zip", "stain/hue.png", "fake_toy_b.sha256",
                "checkpoints/resnet50_seed0.zip", "checkpoints/vit_seed1.zip"):
        assert rel in doc["files"], rel
    assert ArtifactManifest.load(out).verify() == []


def test_manifest_detects_tampering(full_run, tmp_path):
    _, out = full_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    m = ArtifactManifest.load(copy)
    assert m.verify() == []
    with open(copy / "reports/metrics.csv", "a") as fh:
        fh.write("x\n")
    (copy / "tables/metrics.md").unlink()
    assert sorted(m.verify()) == ["reports/metrics.csv", "tables/metrics.md"]


def test_metrics_table_has_mean_and_sem(full_run):
    _, out = full_run
    rows = list(csv.reader(open(out / "tables/metrics.csv")))
    assert rows[0] == ["model", "accuracy", "auc"]
    assert [r[0] for r in rows[1:]] == ["resnet50", "vit"]
    assert all("±" in c for r in rows[1:] for c in r[1:])


def test_missing_dataset_exits_2_naming_it(toy_root, tmp_path, capsys):
    _, a, b = toy_root
    spec = write_run_spec(tmp_path / "s.yaml", a, b)
    doc = yaml.safe_load(spec.read_text())
    doc["datasets"]["toy_a"]["root"] = str(tmp_path / "nowhere")
    spec.write_text(yaml.safe_dump(doc, sort_keys=False))
    assert main(["run", str(spec)]) == 2
    err = capsys.readouterr().err
    assert "toy_a" in err and "not found" in err
    assert not (tmp_path / "out").exists()


def test_spec_errors_carry_line_numbers(toy_root, tmp_path):
    _, a, b = toy_root
    spec = write_run_spec(tmp_path / "s.yaml", a, b)
    lines = spec.read_text().splitlines()
    i = lines.index("- report")
    lines[i] = "- summarise"
    spec.write_text("\n".join(lines) + "\n")
    with pytest.raises(SpecError) as exc:
        load_spec(spec)
    assert exc.value.line == i + 1 and "summarise" in str(exc.value)

    spec.write_text("dataset: toy_a\ndatasets: {}\n")
    with pytest.raises(SpecError) as exc:
        load_spec(spec)
    assert exc.value.line == 1 and "not declared" in str(exc.value)

    spec.write_text("dataset: toy_a\nfoo: 1\n")
    with pytest.raises(SpecError) as exc:
        load_spec(spec)
    assert exc.value.line == 2

    spec.write_text("dataset: [unclosed\n")
    with pytest.raises(SpecError) as exc:
        load_spec(spec)
    assert exc.value.line is not None


def test_bad_architecture_field_is_anchored(toy_root, tmp_path, capsys):
    _, a, b = toy_root
    spec = write_run_spec(tmp_path / "s.yaml", a, b, archs=("resnet50",))
    doc = yaml.safe_load(spec.read_text())
    doc["architectures"][0]["depthh"] = 3
    spec.write_text(yaml.safe_dump(doc, sort_keys=False))
    line = spec.read_text().splitlines().index("architectures:") + 2
    assert main(["run", str(spec)]) == 2
    assert f"s.yaml:{line}:" in capsys.readouterr().err


def test_stages_after_train_need_checkpoints(toy_root, tmp_path):
    _, a, b = toy_root
    spec = write_run_spec(tmp_path / "s.yaml", a, b, stages=("evaluate",))
    with pytest.raises(SpecError, match="checkpoints"):
        load_spec(spec)


def test_evaluate_only_spec_does_not_train(toy_root, tmp_path):
    _, a, b = toy_root
    ck = save_checkpoint(tmp_path / "m.zip", tiny_model("resnet50", 3))
    spec = write_run_spec(tmp_path / "s.yaml", a, b, stages=("evaluate", "report"), checkpoints=["m.zip"])
    assert run_spec(spec) == 0
    out = tmp_path / "out"
    files = json.loads((out / MANIFEST_NAME).read_text())["files"]
    assert "reports/metrics.csv" in files and not any(f.startswith("checkpoints/") for f in files)
    assert not (out / "checkpoints").exists()
    rows = list(csv.DictReader(open(out / "reports/metrics.csv")))
    assert {r["seed"] for r in rows} == {"3"} and {r["metric"] for r in rows} == {"accuracy", "auc"}
    # k = 1: no ± in the table
    table = (out / "tables/metrics.csv").read_text()
    assert "±" not in table
    assert ck.exists()


def test_stage_failure_exits_1_with_partial_manifest(toy_root, tmp_path):
    _, a, b = toy_root
    (tmp_path / "bad.zip").write_bytes(b"not a zip")
    spec = write_run_spec(tmp_path / "s.yaml", a, b, stages=("evaluate", "report"), checkpoints=["bad.zip"])
    assert main(["run", str(spec)]) == 1
    doc = json.loads((tmp_path / "out" / MANIFEST_NAME).read_text())
    assert doc["stages"]["evaluate"].startswith("failed") and "report" not in doc["stages"]


def test_format_cell():
    assert format_cell([0.9]) == "0.9000"
    assert format_cell([0.5, 0.5, 0.5]) == "0.5000 ± 0.0000"
    assert format_cell([0.9, 0.8], 2, 100.0) == "85.00 ± 5.00"
    assert format_cell([1.0, 2.0, 3.0], 3) == "2.000 ± 0.577"


def _metrics_file(path, rows):
    return write_text(path, metric_rows_to_csv(rows))


def test_render_tables(tmp_path):
    p = _metrics_file(tmp_path / "m.csv", [["vit", "idc", "accuracy", 0.8, 0.7, 0.9, 0],
                                           ["vit", "idc", "accuracy", 0.8, 0.7, 0.9, 1],
                                           ["vit", "idc", "auc", 0.9, 0.8, 0.95, 0],
                                           ["vit", "idc", "auc", 0.9, 0.8, 0.95, 1],
                                           ["cnn", "idc", "auc", 0.7, 0.6, 0.8, 0]])
    tables = render_tables([p])
    rows = list(csv.reader(io.StringIO(tables["metrics"][0])))
    assert rows == [["model", "accuracy", "auc"], ["vit", "80.00 ± 0.00", "0.9000 ± 0.0000"], ["cnn", "", "0.7000"]]
    assert tables["metrics"][1].startswith("| model | accuracy | auc |\n|---|---|---|\n")


def test_render_tables_refuses_mixed_datasets(tmp_path):
    p = _metrics_file(tmp_path / "m.csv", [["vit", "idc", "auc", 0.9, 0.8, 0.95, 0],
                                           ["vit", "mhist", "auc", 0.9, 0.8, 0.95, 0]])
    with pytest.raises(ProtocolError):
        render_tables([p])
    r = [RobustnessReport("vit", 0, "idc", 0.9, 0.8, 0.85), RobustnessReport("vit", 0, "breakhis", 0.9, 0.8, 0.85)]
    with pytest.raises(ProtocolError):
        render_tables([write_text(tmp_path / "r.csv", reports_to_csv(r))])
    with pytest.raises(ProtocolError):
        render_tables([write_text(tmp_path / "x.csv", "a,b\n1,2\n")])


def test_robustness_table(tmp_path):
    r = [RobustnessReport("vit", s, "idc", 0.9255, 0.5931, 0.8638) for s in (0, 1)]
    rows = list(csv.reader(io.StringIO(render_tables([write_text(tmp_path / "r.csv", reports_to_csv(r))])
                                       ["robustness"][0])))
    assert rows[1][0] == "vit" and rows[1][-2:] == ["-35.92 ± 0.00", "-6.67 ± 0.00"]


def test_scores_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    s = ScoreSample(rng.random((9, 3)), rng.integers(0, 3, 9))
    back = read_scores(write_scores(tmp_path / "s.csv", s))
    np.testing.assert_array_equal(back.scores, s.scores)
    np.testing.assert_array_equal(back.labels, s.labels)


def test_subcommands_chain(toy_root, tmp_path, capsys):
    _, a, b = toy_root
    opts = json.dumps({k: v for k, v in TINY["resnet50"].items() if k != "input_size"})
    common = ["--dataset", "toy_a", "--data-root", a.root]
    assert main(["train", "--arch", "resnet50", "--arch-opts", opts, "--input-size", "32", *common,
                 "--epochs", "1", "--batch-size", "16", "--runs", "2", "--out", str(tmp_path / "t")]) == 0
    cks = sorted(str(p) for p in (tmp_path / "t").glob("*.zip"))
    assert len(cks) == 2
    assert main(["evaluate", "--checkpoint", *cks, *common, "--iterations", "10", "--out", str(tmp_path / "e")]) == 0
    scores = sorted(str(p) for p in (tmp_path / "e").glob("scores_*.csv"))
    assert main(["compare", "--set1", *scores, "--set2", *scores, "--iterations", "10",
                 "--out", str(tmp_path / "c")]) == 0
    assert "not_significantly_worse=True" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "e/metrics.csv"), "--out", str(tmp_path / "r")]) == 0
    assert "| resnet50 |" in capsys.readouterr().out
    assert main(["robustness", "--checkpoint", cks[0], "--train-domain", "toy_a", "--train-root", a.root,
                 "--other-domain", "toy_b", "--other-root", b.root, "--out", str(tmp_path / "rb")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rb/robustness.csv")))
    assert rows[0]["in_stain_in_dist"] == rows[0]["cross_stain_in_dist"]
    for d in ("t", "e", "c", "r", "rb"):
        assert ArtifactManifest.load(tmp_path / d).verify() == []


def test_cli_missing_dataset_root_exits_2(tmp_path, capsys):
    ck = save_checkpoint(tmp_path / "m.zip", tiny_model("resnet50"))
    assert main(["evaluate", "--checkpoint", str(ck), "--dataset", "mine", "--data-root", str(tmp_path / "x"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "'mine'" in capsys.readouterr().err


def test_metric_columns():
    assert METRIC_COLUMNS == ("model", "dataset", "metric", "point", "ci_low", "ci_high", "seed")
