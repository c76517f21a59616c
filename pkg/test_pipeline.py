"""
End-to-end CLI runs on the toy fixture with the mock LLM backend: index,
describe, eval with both metrics, revive and flops, twice, with byte-identical artifacts.
"""

import json
import logging

import httpx
import pytest
from typer.testing import CliRunner

from featdesc.engine.fixtures import build_toy_fixture
from featdesc.main import app
from featdesc.models import Description, EvalRecord, RevivalResult

logger = logging.getLogger(__name__)

runner = CliRunner()

INDEXED = "resid_post.0/sae:markers/0-1,resid_post.0/sae:toy/0-3"
CAT = "resid_post.0/sae:markers/0"
ZEBRA = "resid_post.0/sae:markers/1"
TOY_0 = "resid_post.0/sae:toy/0"
ARTIFACTS = ("index.jsonl", "descriptions.jsonl", "evals.jsonl", "revival.jsonl", "summary.json", "revival_summary.json")


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    return build_toy_fixture(tmp_path_factory.mktemp("pipeline"), seed=0)


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("the mock backend must not open network connections")
    monkeypatch.setattr(httpx.Client, "send", refuse)


def invoke(*args):
    result = runner.invoke(app, [str(a) for a in args])
    logger.debug(result.output)
    return result


def run_pipeline(fixture_dir, out):
    common = ["--config", fixture_dir.config, "--output-dir", out]
    assert invoke("index", *common, "--features", INDEXED).exit_code == 0
    assert invoke("describe", *common, "--features", CAT).exit_code == 0
    assert invoke("eval", *common, "--metric", "input").exit_code == 0
    assert invoke("describe", *common, "--features", TOY_0, "--methods", "vocabproj").exit_code == 0
    assert invoke("eval", *common, "--metric", "output", "--features", TOY_0).exit_code == 0
    assert invoke("revive", *common, "--features", ZEBRA).exit_code == 0


@pytest.fixture(scope="module")
def run_dirs(fixture_dir, tmp_path_factory):
    dirs = [tmp_path_factory.mktemp(f"run_{name}") for name in ("a", "b")]
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(httpx.Client, "send", lambda *a, **k: pytest.fail("network call"))
        for out in dirs:
            run_pipeline(fixture_dir, out)
    return dirs


def test_artifacts_are_written(run_dirs):
    out = run_dirs[0]
    for name in ARTIFACTS + ("manifest.json",):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "revive"
    assert manifest["backend"] == "mock"
    assert manifest["created_at"].startswith("1970-01-01")


def test_descriptions_cover_every_default_method(run_dirs):
    lines = (run_dirs[0] / "descriptions.jsonl").read_text().splitlines()
    descriptions = [Description.model_validate_json(line) for line in lines]
    descriptions = [d for d in descriptions if d.feature.featurizer == "sae:markers"]
    assert [d.method.label for d in descriptions] == [
        "maxact", "vocabproj", "tokenchange",
        "ensemble_raw:maxact+vocabproj+tokenchange", "ensemble_concat:maxact+vocabproj+tokenchange",
    ]
    assert "cat" in descriptions[0].text


def test_input_metric_passes_for_the_cat_marker(run_dirs):
    records = [EvalRecord.model_validate_json(line) for line in (run_dirs[0] / "evals.jsonl").read_text().splitlines()]
    records = [r for r in records if r.metric == "input"]
    assert len(records) == 5
    by_method = {r.description_method: r for r in records}
    assert by_method["maxact"].passed and by_method["vocabproj"].passed
    assert all('"pass"' in line for line in (run_dirs[0] / "evals.jsonl").read_text().splitlines())
    summary = json.loads((run_dirs[0] / "summary.json").read_text())
    assert {s["group"] for s in summary} == {"all", "resid_post.0"}


def test_output_metric_runs_on_a_live_toy_feature(run_dirs):
    records = [EvalRecord.model_validate_json(line) for line in (run_dirs[0] / "evals.jsonl").read_text().splitlines()]
    output = [r for r in records if r.metric == "output"]
    assert len(output) == 1
    record = output[0]
    assert record.feature.featurizer == "sae:toy" and record.feature.index == 0
    assert record.description_method == "vocabproj"
    assert len(record.payload.target_clamp_values) == 4
    assert len(record.payload.distractors) == 2 and record.feature not in record.payload.distractors
    summary = json.loads((run_dirs[0] / "summary.json").read_text())
    assert {s["metric"] for s in summary} == {"input", "output"}


def test_dead_marker_is_revived(run_dirs):
    lines = (run_dirs[0] / "revival.jsonl").read_text().splitlines()
    results = [RevivalResult.model_validate_json(line) for line in lines]
    assert len(results) == 1 and results[0].activated
    assert results[0].witness == "zebra"
    report = json.loads((run_dirs[0] / "revival_summary.json").read_text())
    assert report["by_site_kind"]["resid_post"]["revived"] == 1


def test_runs_are_reproducible(run_dirs):
    a, b = run_dirs
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    logger.info("✓ identical seeds give byte-identical artifacts")


def test_existing_index_needs_force(fixture_dir, run_dirs):
    common = ["--config", fixture_dir.config, "--output-dir", run_dirs[0]]
    assert invoke("index", *common, "--features", INDEXED).exit_code == 2
    assert invoke("index", *common, "--features", CAT, "--force").exit_code == 0


def test_describe_skips_finished_features(fixture_dir, tmp_path):
    common = ["--config", fixture_dir.config, "--output-dir", tmp_path]
    assert invoke("describe", *common, "--features", CAT, "--methods", "vocabproj").exit_code == 0
    first = (tmp_path / "descriptions.jsonl").read_bytes()
    assert invoke("describe", *common, "--features", CAT, "--methods", "vocabproj").exit_code == 0
    assert (tmp_path / "descriptions.jsonl").read_bytes() == first


def test_bad_arguments(fixture_dir, tmp_path):
    common = ["--config", fixture_dir.config, "--output-dir", tmp_path]
    assert invoke("describe", *common, "--features", CAT, "--methods", "nonsense").exit_code == 2
    assert invoke("eval", *common, "--metric", "sideways").exit_code == 2
    assert invoke("index", "--config", tmp_path / "missing.toml", "--features", CAT).exit_code == 2
    assert invoke("describe", *common, "--features", CAT, "--methods", "maxact").exit_code == 1


def test_flops_command(fixture_dir):
    result = invoke("flops", "--config", fixture_dir.config)
    assert result.exit_code == 0
    assert "maxact" in result.output and "note:" in result.output
    manual = invoke("flops", "--n-params", "2.03e9", "--corpus-tokens", "3.2e6", "--d-model", "2304",
                    "--vocab-size", "256000", "--methods", "maxact")
    assert manual.exit_code == 0
    assert "3.898e+16" in manual.output
    assert invoke("flops", "--methods", "maxact").exit_code == 2
