import dataclasses
import json

import numpy as np
import pytest

from gpvl import nnkit as nn
from gpvl.alignment import AlignConfig
from gpvl.pipeline import (ABLATION_ROWS, ConfigError, TrainConfig, TrainingError, ablation_config, ablation_suite,
                           bench, build_vocab, distribution_shift_eval, evaluate_model, infer, infer_batch,
                           load_model, save_model, split_by_tag, train, write_curves_csv)
from gpvl.planner import PlannerConfig
from gpvl.scene import EncoderConfig, SceneGenConfig, generate_dataset


def tiny(**kw):
    base = dict(encoder=EncoderConfig(d_det=12, d_motion=8, d_map=12, class_dim=4, kind_dim=4),
                align=AlignConfig(d_c=16, heads=2, layers=1, ff_hidden=16),
                planner=PlannerConfig(d_model=16, heads=2, layers=1, context_layers=1, ff_hidden=16),
                epochs_stage1=1, epochs_stage2=1, epochs_stage3=1, batch_size=4)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(6, seed=8)


@pytest.fixture(scope="module")
def trained(data):
    return train(data, tiny())


def test_no_loss_terms(data):
    with pytest.raises(TrainingError, match="no loss terms enabled"):
        train(data, tiny(toggles=()))


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        TrainConfig(toggles=("vis", "xyz"))
    with pytest.raises(ConfigError):
        TrainConfig(head="rnn")
    with pytest.raises(ConfigError, match="unknown config key 'bogus'"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = tiny(seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.planner.d_visual == cfg.align.d_c


def test_manifest_bookkeeping(trained):
    m = trained
    assert m.stages_run == ["perception", "alignment", "planning"] and m.stages_skipped == []
    assert [e["stage"] for e in m.optimizer_events] == m.stages_run
    assert all(e["optimizer_state"] == "reset" for e in m.optimizer_events)
    assert set(m.curves["alignment"]) == {"vis", "ga", "total"}
    for stage, curve in m.curves.items():
        terms = [k for k in curve if k != "total"]
        for e, total in enumerate(curve["total"]):
            assert abs(total - sum(curve[t][e] for t in terms)) < 1e-9
    d = m.to_dict()
    assert "model" not in d and json.loads(json.dumps(d)) == d


def test_training_is_deterministic(data, trained):
    again = train(data, tiny())
    assert again.curves == trained.curves
    a = dict(trained.model.named_parameters())
    b = dict(again.model.named_parameters())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_vis_only_runs_stage_one(data):
    m = train(data, tiny(toggles=("vis",)))
    assert m.stages_run == ["perception"]
    assert m.stages_skipped == ["alignment", "planning"]


def test_stage_selection_leaves_other_params(data):
    m = train(data, tiny(stages=("perception",)))
    fresh = train(data, tiny(stages=("perception",), epochs_stage1=0, toggles=("vis", "cap"), epochs_stage3=0))
    a, b = dict(m.model.named_parameters()), dict(fresh.model.named_parameters())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a if k.startswith("planner."))
    assert not np.array_equal(a["scene.probe.det.weight"].data, b["scene.probe.det.weight"].data)


def test_nonfinite_loss_is_reported(data, monkeypatch):
    import gpvl.pipeline as pp

    def bad(*a, **k):
        return nn.Tensor(np.array(np.nan))
    monkeypatch.setattr(pp, "perception_loss_arrays", bad)
    with pytest.raises(TrainingError, match="vis"):
        train(data, tiny())


def test_inference_records(data, trained):
    recs = infer_batch(data, trained.model)
    assert [r["scene_id"] for r in recs] == [s.scene_id for s in data]
    single = infer(data[0], trained.model)
    assert single == recs[0]
    timed = infer(data[0], trained.model, timed=True)
    assert timed["decode_latency_ms"] > 0


def test_ego_mask_only_changes_nav_rows(data, trained):
    from gpvl.pipeline import prepare
    plain = prepare(data, trained.model, mask_ego=False)
    masked = prepare(data, trained.model, mask_ego=True)
    assert plain.captions == masked.captions
    assert plain.navs != masked.navs
    assert np.array_equal(plain.targets, masked.targets)


def test_corruption_zero_is_identity(data, trained):
    a = infer_batch(data, trained.model)
    b = infer_batch(data, trained.model, corrupt=("dropout", 0.0, 0))
    assert a == b


def test_save_load_round_trip(tmp_path, data, trained):
    save_model(trained.model, tmp_path)
    model = load_model(tmp_path)
    assert infer_batch(data, model) == infer_batch(data, trained.model)
    write_curves_csv(trained, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,term,value" and len(lines) == 1 + 2 + 3 + 3


def test_evaluate_model_and_bench(data, trained):
    report, plans = evaluate_model(trained.model, data)
    assert report.metrics.n_scenes == len(data)
    rows = bench(trained.model, data[:2], repetitions=10)
    assert [r["config"] for r in rows] == ["full", "ego_status_masked", "decode_max_len_64"]
    for r in rows:
        assert r["fps"] == pytest.approx(1000.0 / r["latency_ms"])


def test_ablation_configs():
    cfg = tiny()
    assert "vis" not in ablation_config(cfg, "Perc").toggles
    assert ablation_config(cfg, "Cap").use_caption is False
    assert "ga" not in ablation_config(cfg, "VLP").toggles
    assert ablation_config(cfg, "GA").align_groups == ("global",)
    assert ablation_config(cfg, "CLM").head == "mlp"
    assert [r[0] for r in ABLATION_ROWS] == [1, 2, 3, 4, 5, 6]


def test_ablation_suite_rows(data):
    rows = ablation_suite(data[:4], data[4:], tiny(), rows=["no_alignment", "mlp_head"])
    assert [r["name"] for r in rows] == ["no_alignment", "mlp_head"]
    assert rows[0]["manifest"]["stages_skipped"] == ["alignment"]
    assert rows[1]["disabled"] == ["CLM"]
    assert rows[1]["metrics"]["invalid_rate"] == 0.0


def test_shift_eval_same_tag_is_in_distribution():
    scenes = generate_dataset(5, seed=1, config=SceneGenConfig.preset("city_a"))
    out = distribution_shift_eval(scenes, "city_a", "city_a", tiny(), holdout=0.4)
    assert out["shifted"] == out["in_distribution"]
    with pytest.raises(ValueError, match="city_b"):
        split_by_tag(scenes, "city_b", 0.25)
