import json

import jsonschema
import pytest

from gpvl.cli import main
from gpvl.scene import load_dataset
from gpvl.schemas import METRICS_SCHEMA, PLAN_RECORD_SCHEMA

TINY = {
    "epochs_stage1": 1, "epochs_stage2": 1, "epochs_stage3": 1, "batch_size": 4,
    "encoder": {"d_det": 12, "d_motion": 8, "d_map": 12, "class_dim": 4, "kind_dim": 4},
    "align": {"d_c": 16, "heads": 2, "layers": 1, "ff_hidden": 16},
    "planner": {"d_model": 16, "heads": 2, "layers": 1, "context_layers": 1, "ff_hidden": 16},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "d.jsonl"
    assert main(["make-data", "--n", "6", "--seed", "4", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out-dir", str(root / "run"), "--config", str(cfg)]) == 0
    assert main(["eval", "--data", str(data), "--checkpoints", str(root / "run" / "checkpoint"),
                 "--out", str(root / "eval")]) == 0
    return root


def test_make_data_empty_and_deterministic(tmp_path, capsys):
    assert main(["make-data", "--n", "0", "--out", str(tmp_path / "e.jsonl")]) == 0
    assert load_dataset(tmp_path / "e.jsonl") == []
    for name in ("a", "b"):
        assert main(["make-data", "--n", "20", "--seed", "2", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert "GoStraight=" in capsys.readouterr().out


def test_make_data_split_tag(tmp_path):
    assert main(["make-data", "--n", "3", "--split-tag", "city_b", "--out", str(tmp_path / "b.jsonl")]) == 0
    assert {s.split_tag for s in load_dataset(tmp_path / "b.jsonl")} == {"city_b"}


def test_usage_errors(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--data", str(missing), "--out-dir", str(tmp_path / "r")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["make-data", "--n", "2", "--set", "bogus_key=1", "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "bogus_key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["eval"])
    assert info.value.code == 2


def test_unknown_train_config_key(run, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--data", str(run / "d.jsonl"), "--out-dir", str(tmp_path / "r"),
                 "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert main(["train", "--data", str(run / "d.jsonl"), "--out-dir", str(tmp_path / "r"),
                 "--toggles", ""]) == 2
    assert "no loss terms enabled" in capsys.readouterr().err


def test_internal_error_exit_code(run, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n")
    assert main(["eval", "--data", str(bad), "--checkpoints", str(run / "run" / "checkpoint"),
                 "--out", str(tmp_path / "e")]) == 1


def test_train_outputs(run):
    manifest = json.loads((run / "run" / "manifest.json").read_text())
    assert manifest["stages_run"] == ["perception", "alignment", "planning"]
    assert manifest["config"]["encoder"]["d_det"] == 12
    assert manifest["checkpoints"]["params"] == "checkpoint/model.ckpt.json"
    assert (run / "run" / "loss_curves.csv").read_text().startswith("stage,epoch,term,value\n")


def test_toggles_vis_runs_stage_one_only(run, tmp_path):
    cfg = run / "tiny.json"
    assert main(["train", "--data", str(run / "d.jsonl"), "--out-dir", str(tmp_path / "r"),
                 "--config", str(cfg), "--toggles", "vis"]) == 0
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["stages_run"] == ["perception"]
    assert manifest["config"]["toggles"] == ["vis"]


def test_eval_outputs_follow_schema(run):
    doc = json.loads((run / "eval" / "metrics.json").read_text())
    jsonschema.validate(doc, METRICS_SCHEMA)
    assert doc["corruption"] is None and doc["collision_convention"] == "cumulative"
    for line in (run / "eval" / "plans.jsonl").read_text().splitlines():
        jsonschema.validate(json.loads(line), PLAN_RECORD_SCHEMA)
    rows = (run / "eval" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "command,metric,value"
    assert sorted({r.split(",")[0] for r in rows[1:]}) == ["GoStraight", "TurnLeft", "TurnRight"]
    assert len(rows) - 1 == 3 * 12


def test_zero_corruption_matches_clean(run):
    ck = str(run / "run" / "checkpoint")
    assert main(["eval", "--data", str(run / "d.jsonl"), "--checkpoints", ck, "--out", str(run / "eval0"),
                 "--corrupt", "dropout:0"]) == 0
    clean = json.loads((run / "eval" / "metrics.json").read_text())
    zero = json.loads((run / "eval0" / "metrics.json").read_text())
    assert zero.pop("corruption") == {"kind": "dropout", "severity": 0.0, "seed": 0, "level": "feature"}
    clean.pop("corruption")
    assert zero == clean
    assert (run / "eval" / "plans.jsonl").read_bytes() == (run / "eval0" / "plans.jsonl").read_bytes()
    assert main(["eval", "--data", str(run / "d.jsonl"), "--checkpoints", ck, "--out", str(run / "e2"),
                 "--corrupt", "fog:0.1"]) == 2


def test_infer(run, capsys):
    sid = load_dataset(run / "d.jsonl")[2].scene_id
    assert main(["infer", "--data", str(run / "d.jsonl"), "--checkpoints", str(run / "run" / "checkpoint"),
                 "--scene-id", sid]) == 0
    rec = json.loads(capsys.readouterr().out)
    jsonschema.validate(rec, PLAN_RECORD_SCHEMA)
    assert rec["scene_id"] == sid and rec["decode_latency_ms"] > 0
    assert main(["infer", "--data", str(run / "d.jsonl"), "--checkpoints", str(run / "run" / "checkpoint"),
                 "--scene-id", "missing"]) == 2


def test_plot_empty_and_deterministic(run, tmp_path):
    empty = tmp_path / "m.json"
    empty.write_text("{}")
    assert main(["plot", "--metrics", str(empty), "--out", str(tmp_path / "p0")]) == 0
    svg = (tmp_path / "p0" / "metrics.svg").read_text()
    assert "<rect x=" in svg and "l2_avg" in svg and "<title>" not in svg
    args = ["--metrics", str(run / "eval" / "metrics.json"), "--plans", str(run / "eval" / "plans.jsonl"),
            "--data", str(run / "d.jsonl")]
    assert main(["plot", *args, "--out", str(tmp_path / "p1")]) == 0
    assert main(["plot", *args, "--out", str(tmp_path / "p2")]) == 0
    names = sorted(p.name for p in (tmp_path / "p1").iterdir())
    assert "metrics.svg" in names and len(names) > 1
    for n in names:
        assert (tmp_path / "p1" / n).read_bytes() == (tmp_path / "p2" / n).read_bytes()


def test_bench(run, tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--data", str(run / "d.jsonl"), "--checkpoints", str(run / "run" / "checkpoint"),
                 "--n-scenes", "2", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 3 and all(abs(r["fps"] - 1000 / r["latency_ms"]) < 1e-9 for r in rows)
    assert main(["bench", "--data", str(run / "d.jsonl"), "--checkpoints", str(run / "run" / "checkpoint"),
                 "--repetitions", "3"]) == 2


def test_ablate_and_shift(run, tmp_path):
    cfg = str(run / "tiny.json")
    assert main(["ablate", "--data", str(run / "d.jsonl"), "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert [r["id"] for r in doc["rows"]] == [1, 2, 3, 4, 5, 6]
    csv = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert csv[0].startswith("id,Perc,Cap,VLP,GA,CLM") and len(csv) == 7
    assert main(["shift-eval", "--data", str(run / "d.jsonl"), "--config", cfg, "--train-tag", "city_a",
                 "--test-tag", "city_a", "--out", str(tmp_path / "s.json")]) == 0
    res = json.loads((tmp_path / "s.json").read_text())
    assert res["in_distribution"] == res["shifted"]
    assert res["manifest"]["tags"] == {"train": "city_a", "test": "city_a"}
    assert main(["shift-eval", "--data", str(run / "d.jsonl"), "--train-tag", "city_a",
                 "--test-tag", "city_b", "--out", str(tmp_path / "s2.json")]) == 2
