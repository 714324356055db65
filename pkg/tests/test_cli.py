import json

import pytest

from conftest import run_pipeline
from mapcull.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from mapcull.config import ConfigError, PipelineConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("pipeline")
    assert run_pipeline(wd) == [EXIT_OK] * 8
    return wd


def test_outputs_present_and_stamped(workdir):
    cfg = PipelineConfig.load(workdir / "config.json")
    stamp = f"config={cfg.hash} seed=0"
    for rel in ("eval/eval.csv", "eval/match_counts.csv", "report/table.csv", "report/histogram.csv",
                "train/metrics.csv", "scores/scene1.csv"):
        assert stamp in (workdir / rel).read_text().splitlines()[0]
    for rel in ("report/recall_0.25m_2deg.svg", "report/histogram.svg"):
        assert f"config {cfg.hash}, seed 0" in (workdir / rel).read_text()
    for d in ("worlds", "graphs", "train", "scores", "selections", "eval", "report"):
        assert PipelineConfig.load(workdir / d / "config.json") == cfg
    methods = {l.split(",")[0] for l in (workdir / "report/table.csv").read_text().splitlines()[2:]}
    assert methods == {"random", "ilp_map", "ilp_query", "gnn"}


def test_selections_have_exact_budgets(workdir):
    doc = json.loads((workdir / "selections/selections.json").read_text())
    for method, scenes in doc["selections"].items():
        for picks in scenes.values():
            for budget, ids in picks.items():
                assert len(ids) == len(set(ids)) == int(budget)


def test_eval_on_empty_selection_file(workdir, tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert main(["eval", "--workdir", str(workdir), "--selections", str(empty)]) == EXIT_OK
    rows = (workdir / "eval/eval.csv").read_text().splitlines()
    assert rows[2].startswith("empty,scene1,0,0,0,0.000000,0.000000,0.000000")


def test_missing_prerequisite(tmp_path, capsys):
    assert main(["build", "--workdir", str(tmp_path)]) == EXIT_DATA
    assert "mapcull generate" in capsys.readouterr().err
    assert not (tmp_path / "graphs").exists() and not (tmp_path / ".graphs.partial").exists()


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--workdir", str(tmp_path), "--g2", "gcn"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"suite": {"epochs": 2, "colour": "red"}}))
    assert main(["generate", "--workdir", str(tmp_path), "--config", str(bad)]) == EXIT_USAGE
    assert "colour" in capsys.readouterr().err


def test_help_lists_flags_with_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices
    text = " ".join(sub["train"].format_help().split())
    for flag, default in (("--epochs", "20"), ("--lr", "0.001"), ("--K", "30"), ("--lambda", "0.01"),
                          ("--heads", "4"), ("--g2", "gat"), ("--loss", "both")):
        assert flag in text and f"default {default}" in text
    label = " ".join(sub["label"].format_help().split())
    assert "default 500" in label and "default 30" in label


def test_config_roundtrip_and_override():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert cfg.override(epochs=3).suite.epochs == 3 and cfg.override(heads=2).suite.scorer.heads == 2
    assert cfg.override(epochs=3).hash != cfg.hash
    with pytest.raises(ConfigError):
        cfg.override(colour=1)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"suite": {"world": {"n_pts": 3}}})
