import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpvl import nnkit as nn
from gpvl.scene import (COMMANDS, DatasetFormatError, EncoderConfig, ProbeParams, SceneEncoderParams,
                        SceneError, SceneGenConfig, encode_scene, generate_dataset, generate_scene,
                        kinematic_profile, load_dataset, net_heading_change, perception_loss, save_dataset,
                        scene_arrays, scene_to_dict)
from gpvl.scene import Command


def test_zero_agent_config_gives_empty_scene():
    s = generate_scene(7, SceneGenConfig(min_agents=0, max_agents=0))
    assert s.agents == () and s.motions == ()
    assert len(s.ego.gt_trajectory) == 6


def test_generation_is_deterministic():
    assert generate_scene(7) == generate_scene(7)
    assert scene_to_dict(generate_scene(7)) != scene_to_dict(generate_scene(8))


@pytest.mark.parametrize("kw", [dict(min_agents=3, max_agents=2), dict(map_extent=0.0), dict(map_extent=-1.0),
                                dict(min_speed=5.0, max_speed=4.0), dict(command_probs=(0.5, 0.5, 0.5)),
                                dict(lanes=(3, 2))])
def test_invalid_generator_config_rejected(kw):
    with pytest.raises(SceneError):
        SceneGenConfig(**kw)


def test_command_mix_over_seed_sweep():
    cfg = SceneGenConfig()
    counts = {c: 0 for c in COMMANDS}
    for seed in range(1000):
        counts[generate_scene(seed, cfg).ego.command] += 1
    for c, p in zip(COMMANDS, cfg.command_probs):
        assert abs(counts[c] / 1000 - p) <= 0.03


def test_trajectories_respect_command_and_kinematics():
    cfg = SceneGenConfig()
    for seed in range(300):
        s = generate_scene(seed, cfg)
        turn = math.degrees(net_heading_change(s.ego.gt_trajectory))
        if s.ego.command is Command.TURN_LEFT:
            assert turn >= 15
        elif s.ego.command is Command.TURN_RIGHT:
            assert turn <= -15
        else:
            assert abs(turn) <= 10
        speeds, curv = kinematic_profile(s.ego.gt_trajectory)
        assert speeds.max() <= cfg.max_speed + 1e-9
        assert curv.max() <= cfg.max_curvature + 1e-9


def test_agent_count_within_detection_rows():
    enc = EncoderConfig()
    for s in generate_dataset(50, seed=2):
        assert len(s.agents) <= enc.n_det


def test_encoder_zero_agents_gives_zero_rows():
    enc = SceneEncoderParams(EncoderConfig(), np.random.default_rng(0))
    s = generate_scene(7, SceneGenConfig(min_agents=0, max_agents=0))
    b = encode_scene(s, enc)
    assert not b.f_det.data.any() and not b.f_motion.data.any()
    assert b.f_map.data[:len(s.map)].any() and not b.f_map.data[len(s.map):].any()


def test_encoder_row_locality(scenes):
    enc = SceneEncoderParams(EncoderConfig(), np.random.default_rng(0))
    s = next(s for s in scenes if len(s.agents) >= 3)
    from dataclasses import replace
    moved = replace(s, agents=tuple(replace(a, cx=a.cx + 1.0) if a.id == s.agents[1].id else a for a in s.agents))
    a, b = encode_scene(s, enc).f_det.data, encode_scene(moved, enc).f_det.data
    changed = np.flatnonzero((a != b).any(axis=1))
    assert changed.tolist() == [1]
    assert np.array_equal(encode_scene(s, enc).f_det.data, a)


def test_encoder_limit_errors_name_the_limit(scenes):
    s = next(s for s in scenes if len(s.agents) >= 3)
    with pytest.raises(SceneError, match="N_d=2"):
        scene_arrays([s], EncoderConfig(n_det=2))


def test_perception_loss_closed_forms(scenes):
    cfg = EncoderConfig(class_dim=4, kind_dim=4, d_det=12, d_motion=12, d_map=44)
    enc = SceneEncoderParams(cfg, np.random.default_rng(0))
    # identity projections plus probes that read back only the projected block
    probe = ProbeParams(cfg, np.random.default_rng(1))
    for lin, head in ((enc.det_proj, probe.det), (enc.motion_proj, probe.motion), (enc.map_proj, probe.map)):
        n = lin.weight.shape[0]
        lin.weight.data[:] = np.eye(n, lin.weight.shape[1])
        lin.bias.data[:] = 0.0
        head.weight.data[:] = np.eye(head.weight.shape[0], n)
        head.bias.data[:] = 0.0
    s = scenes[0]
    bundle = encode_scene(s, enc)
    assert perception_loss(bundle, s, probe).item() == 0.0
    # all-zero probe: mean of the squared targets over present entries
    for head in (probe.det, probe.motion, probe.map):
        head.weight.data[:] = 0.0
    arr = scene_arrays([s], cfg)
    targets = [arr.det[0][arr.det_mask[0]], arr.motion[0][arr.motion_mask[0]], arr.map[0][arr.map_mask[0]]]
    expect = sum((t ** 2).sum() for t in targets) / sum(t.size for t in targets)
    assert abs(perception_loss(bundle, s, probe).item() - expect) < 1e-14


def test_perception_loss_gradient(scenes):
    cfg = EncoderConfig(d_det=16, d_motion=16, d_map=16, class_dim=4, kind_dim=4)
    rng = np.random.default_rng(5)
    enc, probe = SceneEncoderParams(cfg, rng), ProbeParams(cfg, rng)
    arr_scenes = scenes[:3]
    from gpvl.scene import encode_arrays, perception_loss_arrays
    arr = scene_arrays(arr_scenes, cfg)
    f = lambda: perception_loss_arrays(encode_arrays(arr, enc), arr, probe)
    assert f().item() >= 0
    assert nn.grad_check(f, enc.parameters() + probe.parameters()) < 1e-4


def test_perception_loss_shape_mismatch(scenes):
    cfg = EncoderConfig()
    enc = SceneEncoderParams(cfg, np.random.default_rng(0))
    probe = ProbeParams(EncoderConfig(d_det=16, d_motion=16, d_map=16, class_dim=4, kind_dim=4),
                        np.random.default_rng(0))
    with pytest.raises(ValueError):
        perception_loss(encode_scene(scenes[0], enc), scenes[0], probe)


def test_dataset_round_trip(tmp_path):
    scenes = generate_dataset(100, seed=4)
    path = tmp_path / "d.jsonl"
    save_dataset(scenes, path)
    assert load_dataset(path) == scenes


def test_empty_dataset_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_missing_field_names_line(tmp_path):
    lines = [json.dumps(scene_to_dict(s)) for s in generate_dataset(3, seed=1)]
    bad = json.loads(lines[2])
    del bad["ego"]
    lines[2] = json.dumps(bad)
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 3") as info:
        load_dataset(path)
    assert info.value.field == "ego"


@given(st.integers(0, 10_000))
def test_round_trip_property(seed):
    s = generate_scene(seed)
    from gpvl.scene import scene_from_dict
    assert scene_from_dict(json.loads(json.dumps(scene_to_dict(s)))) == s
