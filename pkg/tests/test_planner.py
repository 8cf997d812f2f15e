import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpvl import nnkit as nn
from gpvl.planner import (FAILURE_KINDS, DecodingConfig, PlannerConfig, PlannerModel, RegressionHead, caption_loss,
                          decode_plan, encode_context, encode_context_batch, greedy_decode, plan_record,
                          target_logits)
from gpvl.promptgen import (BOS_ID, EOS_ID, PAD_ID, TokenSequence, build_vocabulary, gt_caption, nav_prompt)
from gpvl.scene import HORIZON, Command

CFG = PlannerConfig(d_model=16, heads=2, layers=1, context_layers=1, ff_hidden=16, d_visual=8)


@pytest.fixture(scope="module")
def small_vocab():
    return build_vocabulary(["a road with lanes", nav_prompt(_ego_dummy(), 6)])


def _ego_dummy():
    from gpvl.scene import AgentBox, EgoState
    return EgoState(AgentBox(0.0, 0.0, 0.8, 1.9, 1.6, 4.6, 0.0), Command.GO_STRAIGHT, tuple((0.0, 0.0) for _ in range(6)))


def _model(vocab, seed=0, cfg=CFG):
    return PlannerModel(len(vocab), cfg, np.random.default_rng(seed), n_visual=5)


def _ctx(vocab, model, seed=1, b=None):
    v = np.random.default_rng(seed).normal(size=(5, CFG.d_visual))
    cap = vocab.encode_text("a road with lanes")
    nav = vocab.encode_text("It is currently going straight")
    if b is None:
        return encode_context(cap, nav, nn.Tensor(v), model)
    return encode_context_batch([cap] * b, [nav] * b, nn.Tensor(np.stack([v] * b)), model)


def test_context_rows(small_vocab):
    model = _model(small_vocab)
    ctx = _ctx(small_vocab, model)
    cap = small_vocab.encode_text("a road with lanes")
    nav = small_vocab.encode_text("It is currently going straight")
    assert ctx.rows == len(cap) + len(nav) + 5


def test_segment_limit_error_names_segment(small_vocab):
    model = _model(small_vocab)
    with pytest.raises(ValueError, match="caption"):
        encode_context([1] * 40, [1], nn.Tensor(np.zeros((5, CFG.d_visual))), model)


def test_causality_is_exact(small_vocab):
    model = _model(small_vocab)
    ctx = _ctx(small_vocab, model)
    rng = np.random.default_rng(0)
    prefix = [BOS_ID] + list(rng.integers(5, len(small_vocab), size=9))
    full = target_logits(ctx, prefix, model).data
    changed = list(prefix)
    changed[6] = (changed[6] + 1) % len(small_vocab)
    other = target_logits(ctx, changed, model).data
    assert np.array_equal(full[:6], other[:6])
    assert not np.array_equal(full[6:], other[6:])


def test_uniform_logits_give_log_vocab(small_vocab):
    model = _model(small_vocab)
    model.out.weight.data[:] = 0.0
    model.out.bias.data[:] = 0.0
    ctx = _ctx(small_vocab, model)
    gt = gt_caption(_ego_dummy(), small_vocab)
    assert abs(caption_loss(ctx, gt, model).item() - math.log(len(small_vocab))) < 1e-12


def test_teacher_forcing_equals_stepwise(small_vocab):
    model = _model(small_vocab)
    ctx = _ctx(small_vocab, model)
    gt = list(gt_caption(_ego_dummy(), small_vocab).ids)
    total = 0.0
    for t in range(1, len(gt)):
        logits = target_logits(ctx, gt[:t], model).data[-1]
        total += -(logits[gt[t]] - logits.max() - math.log(np.exp(logits - logits.max()).sum()))
    assert abs(caption_loss(ctx, gt, model).item() - total / (len(gt) - 1)) < 1e-12


def test_batched_matches_single(small_vocab):
    model = _model(small_vocab)
    gt = gt_caption(_ego_dummy(), small_vocab)
    single = caption_loss(_ctx(small_vocab, model), gt, model).item()
    batch = caption_loss(_ctx(small_vocab, model, b=3), [gt] * 3, model).item()
    assert abs(single - batch) < 1e-12


def test_padding_is_ignored(small_vocab):
    model = _model(small_vocab)
    ctx = _ctx(small_vocab, model, b=2)
    gt = list(gt_caption(_ego_dummy(), small_vocab).ids)
    short = gt[:5] + [EOS_ID]
    both = caption_loss(ctx, [gt, short], model).item()
    ctx1 = _ctx(small_vocab, model, b=1)
    la = caption_loss(ctx1, [gt], model).item() * (len(gt) - 1)
    lb = caption_loss(ctx1, [short], model).item() * (len(short) - 1)
    assert abs(both - (la + lb) / (len(gt) + len(short) - 2)) < 1e-12


def test_caption_loss_gradient(small_vocab):
    model = _model(small_vocab)
    gt = gt_caption(_ego_dummy(), small_vocab)
    v = nn.Tensor(np.random.default_rng(2).normal(size=(5, CFG.d_visual)))
    cap = small_vocab.encode_text("a road with lanes")
    nav = small_vocab.encode_text("It is currently going straight")
    f = lambda: caption_loss(encode_context(cap, nav, v, model), gt, model)
    assert nn.grad_check(f, model.parameters(), max_coords=10) < 1e-4


def test_greedy_decode_forced_plan(small_vocab):
    model = _model(small_vocab)
    target = list(gt_caption(_ego_dummy(), small_vocab).ids)
    # a zero output layer plus one biased token forces that token at every step
    model.out.weight.data[:] = 0.0
    model.out.bias.data[:] = 0.0
    model.out.bias.data[EOS_ID] = 1.0
    seq = greedy_decode(_ctx(small_vocab, model), model)
    assert seq.ids == (BOS_ID, EOS_ID)
    assert decode_plan(seq, small_vocab).failure_kind == "missing_command"
    model.out.bias.data[EOS_ID] = 0.0
    model.out.bias.data[small_vocab.token_to_id["0.0"]] = 1.0
    seq = greedy_decode(_ctx(small_vocab, model), model, DecodingConfig(max_len=10))
    assert seq.truncated and len(seq) == 10
    assert decode_plan(seq, small_vocab).failure_kind == "truncated"
    assert len(target) == 15


def test_decode_batch_matches_single(small_vocab):
    model = _model(small_vocab, seed=3)
    single = greedy_decode(_ctx(small_vocab, model), model, DecodingConfig(max_len=8))
    batch = greedy_decode(_ctx(small_vocab, model, b=2), model, DecodingConfig(max_len=8))
    assert batch[0].ids == single.ids


def test_decode_plan_round_trip(small_vocab, scenes):
    for s in scenes:
        p = decode_plan(gt_caption(s.ego, small_vocab), small_vocab)
        assert p.valid and p.command is s.ego.command
        assert np.abs(np.array(p.waypoints) - np.array(s.ego.gt_trajectory)).max() <= 0.05 + 1e-12


def test_decode_plan_classifies_failures(small_vocab):
    z, left = small_vocab.token_to_id["0.0"], small_vocab.token_to_id["left"]
    cases = {
        "missing_bos": [left, EOS_ID],
        "truncated": TokenSequence((BOS_ID, left, z), truncated=True),
        "content_after_eos": [BOS_ID, left, EOS_ID, z],
        "missing_command": [BOS_ID, z, EOS_ID],
        "bad_token": [BOS_ID, left, small_vocab.token_to_id["road"], EOS_ID],
        "odd_coordinates": [BOS_ID, left, z, EOS_ID],
        "wrong_length": [BOS_ID, left, z, z, EOS_ID],
    }
    assert set(cases) == set(FAILURE_KINDS)
    for kind, toks in cases.items():
        p = decode_plan(toks, small_vocab)
        assert not p.valid and p.failure_kind == kind


@given(st.lists(st.integers(-3, 1700), max_size=20))
def test_decode_plan_never_raises(ids):
    v = _FUZZ_VOCAB
    p = decode_plan(ids, v)
    assert p.valid or p.failure_kind in FAILURE_KINDS
    if p.valid:
        assert len(p.waypoints) == HORIZON


_FUZZ_VOCAB = build_vocabulary(["x"])


def test_plan_record_fields(small_vocab):
    rec = plan_record("s-1", decode_plan([BOS_ID, EOS_ID], small_vocab), 1.5)
    assert rec == {"scene_id": "s-1", "command_pred": None, "waypoints": [], "valid": False,
                   "failure_kind": "missing_command", "decode_latency_ms": 1.5}


def test_regression_head_shapes_and_gradient(small_vocab):
    model = _model(small_vocab)
    ctx = _ctx(small_vocab, model, b=2)
    head = RegressionHead(CFG.d_model, 8, np.random.default_rng(0))
    gt = np.random.default_rng(1).normal(size=(2, 6, 2))
    assert head.predict(ctx).shape == (2, 6, 2)
    assert nn.grad_check(lambda: head.loss(ctx, gt), head.parameters()) < 1e-6


def test_decoding_config_validation():
    with pytest.raises(ValueError):
        DecodingConfig(beam_width=2)
    with pytest.raises(ValueError):
        DecodingConfig(max_len=1)


def test_pad_id_is_zero():
    assert PAD_ID == 0
