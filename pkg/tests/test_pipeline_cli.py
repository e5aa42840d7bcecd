import json
import logging

import pytest

from corpus_fixture import build_fixture
from strat_forge.cli import main
from strat_forge.pipeline import MANIFEST, Context, MissingInput, load_config, run_stage, sha256_path


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    return build_fixture(tmp_path_factory.mktemp("fx"))


def ctx_for(fx, workdir):
    return Context(load_config(fx.config_path), workdir, corpus=fx.corpus_dir, replay=fx.replay_path)


def common(fx, workdir):
    return ["--workdir", str(workdir), "--config", str(fx.config_path), "--replay", str(fx.replay_path), "--corpus", str(fx.corpus_dir)]


def test_rules_without_cluster_names_missing_stage(fx, tmp_path):
    with pytest.raises(MissingInput, match="run stage 'cluster' first"):
        run_stage(ctx_for(fx, tmp_path), "rules")


def test_cli_missing_stage_exit_code(fx, tmp_path, caplog):
    caplog.set_level(logging.ERROR)
    assert main(["run", "--stages", "rules"] + common(fx, tmp_path)) == 2
    assert "cluster" in caplog.text


def test_unknown_stage_rejected(fx, tmp_path):
    assert main(["run", "--stages", "mine,bogus"] + common(fx, tmp_path)) == 1


@pytest.fixture(scope="module")
def clustered(fx, tmp_path_factory):
    workdir = tmp_path_factory.mktemp("work")
    assert main(["run", "--stages", "mine,summarize,cluster"] + common(fx, workdir)) == 0
    return workdir


def test_stage_outputs_and_manifests(clustered):
    for stage in ("mine", "summarize", "cluster"):
        manifest = json.loads((clustered / stage / MANIFEST).read_text())
        assert manifest["stage"] == stage and manifest["outputs"] == sha256_path(clustered / stage)
    assert json.loads((clustered / "mine" / "manifest.json").read_text())["result"] == {"kept": 10}
    assert (clustered / "cluster" / "library").is_dir()


def test_rerun_is_skipped_and_logged(fx, clustered, caplog):
    before = {s: sha256_path(clustered / s) for s in ("mine", "summarize", "cluster")}
    caplog.set_level(logging.INFO)
    assert main(["run", "--stages", "mine,summarize,cluster"] + common(fx, clustered)) == 0
    for stage in before:
        assert f"stage {stage}: inputs unchanged, skipping" in caplog.text
    assert {s: sha256_path(clustered / s) for s in before} == before


def test_tampered_output_triggers_rerun(fx, clustered, tmp_path):
    import shutil

    work = tmp_path / "w"
    shutil.copytree(clustered, work)
    (work / "cluster" / "noise.json").write_text("[]\n[]")
    assert run_stage(ctx_for(fx, work), "mine") == "skipped"
    assert run_stage(ctx_for(fx, work), "cluster") == "ran"


def test_stage_leaves_upstream_untouched(fx, clustered, tmp_path):
    import shutil

    work = tmp_path / "w"
    shutil.copytree(clustered, work)
    upstream = {s: sha256_path(work / s) for s in ("mine", "summarize")}
    ctx = ctx_for(fx, work)
    ctx.force = True
    assert run_stage(ctx, "cluster") == "ran"
    assert {s: sha256_path(work / s) for s in upstream} == upstream
    assert not list(work.glob(".*.staging"))


def test_cli_perf_hotspots(tmp_path, capsys):
    profile = tmp_path / "perf.txt"
    profile.write_text("    40.00%  b  b  [.] hot\n     0.10%  b  b  [.] edge\n     0.01%  b  b  [.] cold\n")
    assert main(["perf", "hotspots", "--profile", str(profile)]) == 0
    out = capsys.readouterr().out
    assert "hot" in out and "cold" not in out and "edge" not in out


def test_cli_perf_combine(tmp_path, capsys):
    rep = {"function_name": "f", "variant_id": "v1", "measurements": [{"test_case_id": "t", "direction": "HigherBetter", "before": 10.0, "after": 12.0}]}
    (tmp_path / "v1.json").write_text(json.dumps(rep))
    assert main(["perf", "combine", "--reports", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out) == {"f": "v1"}
