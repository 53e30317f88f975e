import json

import pytest

from isup_grading.config import desk_config
from isup_grading.errors import StageError
from isup_grading.pipeline import Pipeline, hash_tree, load_grader

from toys import TINY_PIPELINE


def tiny(*extra):
    return desk_config().with_overrides(TINY_PIPELINE + list(extra))


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    pipe = Pipeline(tiny("ablations=['no-or', 'no-ssl']"), run)
    pipe.run()
    return pipe


def test_all_stages_write_records(finished):
    run = finished.run_dir
    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest["stages"]) == {s.name for s in finished.stages}
    for name, info in manifest["stages"].items():
        assert info["outputs"] == hash_tree(run / name)
    for variant in ("main", "no-or", "no-ssl"):
        assert (run / "finetune" / f"grader_{variant}.ckpt").exists()
        metrics = json.loads((run / "evaluate" / variant / "metrics.json").read_text())
        assert metrics["n_slides"] == 6
        assert (run / "evaluate" / variant / "confusion.png").exists()
    summary = json.loads((run / "evaluate" / "summary.json").read_text())
    assert set(summary) >= {"main", "no-or", "no-ssl", "ordinal_vs_no_or", "ssl_vs_no_ssl"}
    assert load_grader(run / "finetune" / "grader_no-or.ckpt").head.ordinal is False


def test_rerun_skips_completed_stages(finished):
    again = Pipeline(finished.config, finished.run_dir)
    again.run()
    assert again.ran == [] and len(again.skipped) == len(again.stages)


def test_changed_config_reruns_downstream_only(finished, tmp_path):
    import shutil

    run = tmp_path / "copy"
    shutil.copytree(finished.run_dir, run)
    pipe = Pipeline(finished.config.with_overrides(["finetune.lr=0.002"]), run)
    pipe.run()
    assert pipe.ran == ["finetune", "evaluate"]


def test_tampered_output_is_rebuilt(finished, tmp_path):
    import shutil

    run = tmp_path / "copy"
    shutil.copytree(finished.run_dir, run)
    with open(run / "pretrain" / "ssl.ckpt", "ab") as fh:
        fh.write(b"x")
    pipe = Pipeline(finished.config, run)
    pipe.run()
    # the rebuild is deterministic, so the downstream stages stay valid
    assert pipe.ran == ["pretrain"]
    assert hash_tree(run / "pretrain") == hash_tree(finished.run_dir / "pretrain")


def test_missing_upstream_names_the_stage(tmp_path):
    pipe = Pipeline(tiny(), tmp_path)
    with pytest.raises(StageError) as exc:
        pipe.run_stage("finetune")
    assert exc.value.stage == "finetune" and "pretrain" in str(exc.value)


def test_stage_failure_is_wrapped(tmp_path, monkeypatch):
    pipe = Pipeline(tiny(), tmp_path)

    def boom(out):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipe.by_name["synth"], "fn", boom)
    with pytest.raises(StageError, match="synth.*disk on fire"):
        pipe.run_stage("synth")
    assert not (tmp_path / "synth" / "stage.json").exists()


def test_external_ssl_corpus_skips_pseudo_labelling(finished, tmp_path):
    corpus = finished.run_dir / "build-ssl-dataset" / "ssl_corpus.jsonl"
    pipe = Pipeline(tiny(f"paths.ssl_corpus='{corpus}'"), tmp_path)
    assert pipe.deps_of(pipe.by_name["pretrain"]) == ()
    pipe.run_stage("pretrain")
    trace = json.loads((tmp_path / "pretrain" / "trace.json").read_text())
    assert trace["corpus"] == str(corpus)  # outside the run, kept as given
