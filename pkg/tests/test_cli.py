import json

import numpy as np
import pytest

from dualactor import cli, dataset, nn

SMALL = ["--set", "data.n_points=64", "--set", "afg.steps=3", "--set", "afg.batch_size=4",
         "--set", "afg.n_query=32", "--set", "policy.epochs=1", "--set", "policy.decision_epochs=1",
         "--set", "policy.batch_size=16", "--set", "policy.width=32", "--set", "policy.enc_width=16",
         "--set", "policy.global_dim=16", "--set", "policy.policy_points=32"]


def run(*argv):
    return cli.main(SMALL + [str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert run("gen-data", "--tasks", "open_drawer,put_block_short", "--episodes", 2, "--seed", 0,
               "--out", root / "data") == 0
    assert run("train-afg", "--data", root / "data", "--out", root / "afg.dpc") == 0
    assert run("annotate", "--data", root / "data", "--afg", root / "afg.dpc", "--out", root / "ann") == 0
    return root


def test_gen_data_manifest(pipeline):
    manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert len(manifest["episodes"]) == 4
    assert manifest["config"]["data"]["n_points"] == "64"
    demos, _ = dataset.load(pipeline / "data")
    assert all(d.success for d in demos)


def test_annotation_records_afg_hash(pipeline):
    manifest = json.loads((pipeline / "ann" / "manifest.json").read_text())
    assert manifest["config"]["annotation"]["afg_sha256"] == cli.sha256_file(pipeline / "afg.dpc")
    demos, _ = dataset.load(pipeline / "ann")
    assert all(f.pred_affordance is not None for d in demos for f in d.frames)


def test_train_policy_requires_annotation(pipeline, tmp_path):
    assert run("train-policy", "--data", pipeline / "data", "--out", tmp_path / "p.dpc") == cli.EXIT_MISSING_STAGE
    assert run("train-policy", "--data", pipeline / "data", "--out", tmp_path / "p.dpc", "--variant",
               "baseline", "--use-gt-priors") == 0


def test_train_eval_report(pipeline, tmp_path, capsys):
    afg_before = (pipeline / "afg.dpc").read_bytes()
    assert run("train-policy", "--data", pipeline / "ann", "--out", tmp_path / "full.dpc") == 0
    assert (pipeline / "afg.dpc").read_bytes() == afg_before
    params = nn.load_checkpoint(tmp_path / "full.dpc")
    assert {k.split(".")[0] for k in params} == {"actor1", "actor2", "decision"}
    rec = tmp_path / "rec.jsonl"
    assert run("eval", "--policy", tmp_path / "full.dpc", "--afg", pipeline / "afg.dpc", "--tasks",
               "open_drawer", "--episodes", 2, "--seed", 5, "--out", rec) == 0
    line = json.loads(rec.read_text().splitlines()[0])
    assert line["label"] == "full" and line["success_counts"]["open_drawer"]["episodes"] == 2
    assert {"task", "seed", "success", "steps", "switches"} <= set(line["rows"][0])
    capsys.readouterr()
    assert run("report", "--records", rec, "--out", tmp_path / "rep") == 0
    out = capsys.readouterr().out
    assert out.startswith("label\ttask") and "full\tall" in out
    assert (tmp_path / "rep" / "summary.tsv").read_text() == out


def test_ablate_subset(pipeline, tmp_path):
    assert run("ablate", "--data", pipeline / "ann", "--afg", pipeline / "afg.dpc", "--out", tmp_path / "abl",
               "--variants", "baseline,dual_actor", "--tasks", "open_drawer", "--episodes", 1) == 0
    table = (tmp_path / "abl" / "ablation.tsv").read_text()
    assert "baseline\tall" in table and "dual_actor\tall" in table
    assert (tmp_path / "abl" / "dual_actor.dpc").exists()


def test_exit_codes(tmp_path):
    assert cli.main(["gen-data"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["--set", "nonsense", "report", "--records", "x", "--out", "y"]) == cli.EXIT_USAGE
    assert cli.main(["gen-data", "--tasks", "fly", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train-afg", "--data", str(tmp_path / "none"), "--out", "x"]) == cli.EXIT_MISSING_STAGE
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["report", "--records", str(empty), "--out", str(tmp_path / "r")]) == cli.EXIT_EMPTY


def test_summary_pools_counts_before_dividing():
    recs = [{"label": "v", "success_counts": {"a": {"successes": 1, "episodes": 1}}},
            {"label": "v", "success_counts": {"b": {"successes": 1, "episodes": 3}}}]
    rows = {(l, t): (s, n) for l, t, s, n in cli.summary_rows(recs)}
    assert rows[("v", "all")] == (2, 4)


def test_config_overrides():
    cp = cli.load_config(None, ["policy.gamma=0.9"])
    assert cli.train_config(cp).gamma == 0.9
    with pytest.raises(cli.UsageError):
        cli.train_config(cli.load_config(None, ["policy.gamma=0.3"]))
