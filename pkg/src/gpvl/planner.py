"""Cross-modal planning language model.

Context rows are laid out as caption tokens, navigation tokens, then the
projected global visual rows; a causal decoder with cross-attention to that
context emits BOS, a command word, 2p coordinate tokens and EOS.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nnkit as nn
from .promptgen import (BOS_ID, EOS_ID, PAD_ID, TOKEN_COMMAND, TokenSequence, Vocabulary)
from .scene import HORIZON, POS_SCALE, Command

SEG_CAPTION, SEG_NAV, SEG_VISUAL, SEG_TARGET = range(4)


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    context_layers: int = 1
    ff_hidden: int = 128
    d_visual: int = 64
    max_caption: int = 32
    max_nav: int = 64
    max_target: int = 32
    tie_embeddings: bool = False


@dataclass(frozen=True)
class DecodingConfig:
    max_len: int = 32
    horizon: int = HORIZON
    beam_width: int = 1

    def __post_init__(self):
        if self.beam_width != 1:
            raise ValueError("only greedy decoding (beam width 1) is supported")
        if self.max_len < 2 or self.horizon < 1:
            raise ValueError("max_len must be >= 2 and horizon >= 1")


@dataclass
class ContextState:
    h: nn.Tensor               # (B, Tc, D)
    mask: np.ndarray           # (B, Tc) True on real rows
    single: bool = False

    @property
    def rows(self) -> int:
        return self.h.shape[1]


class PlannerModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: PlannerConfig, rng: np.random.Generator, n_visual: int = 40):
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model, rng)
        self.pos_emb = nn.Embedding(max(cfg.max_caption, cfg.max_nav, cfg.max_target), cfg.d_model, rng)
        self.seg_emb = nn.Embedding(4, cfg.d_model, rng)
        self.vis_proj = nn.Linear(cfg.d_visual, cfg.d_model, rng)
        self.context = (nn.TransformerStack(cfg.context_layers, cfg.d_model, cfg.heads, cfg.ff_hidden, rng)
                        if cfg.context_layers else None)
        self.decoder = nn.TransformerStack(cfg.layers, cfg.d_model, cfg.heads, cfg.ff_hidden, rng, cross=True)
        self.out = None if cfg.tie_embeddings else nn.Linear(cfg.d_model, vocab_size, rng)
        self.out_bias = nn.parameter(np.zeros(vocab_size)) if cfg.tie_embeddings else None

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.weight.shape[0]

    def logits(self, ctx: ContextState, prefix: np.ndarray) -> nn.Tensor:
        """(B, T, V) next-token logits for a (B, T) batch of prefixes."""
        prefix = np.asarray(prefix, dtype=np.int64)
        b, t = prefix.shape
        if t > self.cfg.max_target:
            raise ValueError(f"target prefix length {t} exceeds max_target={self.cfg.max_target}")
        if b != ctx.h.shape[0]:
            raise ValueError(f"prefix batch {b} != context batch {ctx.h.shape[0]}")
        x = (self.tok_emb(prefix) + self.pos_emb(np.broadcast_to(np.arange(t), prefix.shape))
             + self.seg_emb(np.full(prefix.shape, SEG_TARGET)))
        h = self.decoder(x, mask=nn.causal_mask(t)[None, None], context=ctx.h,
                         context_mask=nn.key_padding_mask(ctx.mask))
        if self.out is not None:
            return self.out(h)
        return h @ self.tok_emb.weight.transpose() + self.out_bias


def _pad(seqs: Sequence[Sequence[int]], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = list(s)
    return ids, np.arange(width)[None, :] < np.array([len(s) for s in seqs])[:, None]


def _ids(seq) -> list[int]:
    return list(seq.ids if isinstance(seq, TokenSequence) else seq)


def encode_context_batch(captions: Sequence, navs: Sequence, v_global: nn.Tensor, model: PlannerModel) -> ContextState:
    cfg = model.cfg
    caps = [_ids(c) for c in captions]
    navs = [_ids(n) for n in navs]
    for name, seqs, cap in (("caption", caps, cfg.max_caption), ("navigation", navs, cfg.max_nav)):
        longest = max((len(s) for s in seqs), default=0)
        if longest > cap:
            raise ValueError(f"{name} segment has {longest} tokens; limit {cap}")
    if v_global.ndim != 3 or v_global.shape[-1] != cfg.d_visual:
        raise ValueError(f"visual rows must be (B, N, {cfg.d_visual}), got {v_global.shape}")
    b = v_global.shape[0]
    if len(caps) != b or len(navs) != b:
        raise ValueError("caption/navigation/visual batch sizes differ")
    segments, masks = [], []
    for seg, seqs in ((SEG_CAPTION, caps), (SEG_NAV, navs)):
        ids, m = _pad(seqs)
        if ids.shape[1] == 0:
            continue
        pos = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        segments.append(model.tok_emb(ids) + model.pos_emb(pos) + model.seg_emb(np.full(ids.shape, seg)))
        masks.append(m)
    n_vis = v_global.shape[1]
    segments.append(model.vis_proj(v_global) + model.seg_emb(np.full((b, n_vis), SEG_VISUAL)))
    masks.append(np.ones((b, n_vis), dtype=bool))
    h = nn.concat(segments, axis=1)
    mask = np.concatenate(masks, axis=1)
    if model.context is not None:
        h = model.context(h, mask=nn.key_padding_mask(mask))
    return ContextState(h, mask)


def encode_context(cap, nav, v_global: nn.Tensor, model: PlannerModel) -> ContextState:
    """Single-scene context: rows = len(cap) + len(nav) + visual rows."""
    ctx = encode_context_batch([cap], [nav], v_global.reshape(1, *v_global.shape), model)
    ctx.single = True
    return ctx


def target_logits(ctx: ContextState, target_prefix, model: PlannerModel) -> nn.Tensor:
    if ctx.single:
        out = model.logits(ctx, np.asarray([_ids(target_prefix)]))
        return out.reshape(*out.shape[1:])
    return model.logits(ctx, np.asarray(target_prefix))


def caption_loss(ctx: ContextState, gt, model: PlannerModel) -> nn.Tensor:
    """Teacher-forced token cross-entropy: inputs gt[:-1], targets gt[1:], PAD ignored."""
    if ctx.single:
        ids = np.asarray([_ids(gt)])
    elif isinstance(gt, np.ndarray):
        ids = gt
    else:
        ids, _ = _pad([_ids(g) for g in gt])
    if ids.shape[1] < 2:
        raise ValueError("ground-truth caption needs at least 2 tokens")
    logits = model.logits(ctx, ids[:, :-1])
    return nn.cross_entropy(logits, ids[:, 1:], ignore_index=PAD_ID)


def greedy_decode_batch(ctx: ContextState, model: PlannerModel, cfg: DecodingConfig) -> list[TokenSequence]:
    b = ctx.h.shape[0]
    seqs = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    max_len = min(cfg.max_len, model.cfg.max_target + 1)
    with nn.no_grad():
        while seqs.shape[1] < max_len and not done.all():
            last = model.logits(ctx, seqs).data[:, -1, :]
            nxt = np.argmax(last, axis=-1)
            nxt = np.where(done, PAD_ID, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    out = []
    for i in range(b):
        row = list(seqs[i])
        if EOS_ID in row:
            out.append(TokenSequence(tuple(row[:row.index(EOS_ID) + 1])))
        else:
            out.append(TokenSequence(tuple(row), truncated=True))
    return out


def greedy_decode(ctx: ContextState, model: PlannerModel, cfg: DecodingConfig | None = None):
    """Argmax decoding from BOS until EOS or ``max_len`` tokens (lowest-index ties)."""
    res = greedy_decode_batch(ctx, model, cfg or DecodingConfig())
    return res[0] if ctx.single else res


@dataclass
class PlanParse:
    valid: bool
    command: Command | None = None
    waypoints: list[tuple[float, float]] = field(default_factory=list)
    failure_kind: str | None = None


def decode_plan(tokens, vocab: Vocabulary, horizon: int = HORIZON) -> PlanParse:
    """Parse a generated sequence; malformed output yields a classified failure, never an exception."""
    truncated = isinstance(tokens, TokenSequence) and tokens.truncated
    ids = [int(i) for i in _ids(tokens)]
    n = len(vocab)
    if not ids or ids[0] != BOS_ID:
        return PlanParse(False, failure_kind="missing_bos")
    if truncated or EOS_ID not in ids:
        return PlanParse(False, failure_kind="truncated")
    end = ids.index(EOS_ID)
    if end != len(ids) - 1:
        return PlanParse(False, failure_kind="content_after_eos")
    payload = ids[1:end]
    if not payload or not 0 <= payload[0] < n or vocab.id_to_token[payload[0]] not in TOKEN_COMMAND:
        return PlanParse(False, failure_kind="missing_command")
    command = TOKEN_COMMAND[vocab.id_to_token[payload[0]]]
    coords = payload[1:]
    if any(not vocab.is_coord(i) for i in coords):
        return PlanParse(False, command, failure_kind="bad_token")
    if len(coords) % 2:
        return PlanParse(False, command, failure_kind="odd_coordinates")
    if len(coords) != 2 * horizon:
        return PlanParse(False, command, failure_kind="wrong_length")
    vals = [float(vocab.coord_value[i]) for i in coords]
    return PlanParse(True, command, [(vals[j], vals[j + 1]) for j in range(0, len(vals), 2)])


FAILURE_KINDS = ("missing_bos", "truncated", "content_after_eos", "missing_command", "bad_token",
                 "odd_coordinates", "wrong_length")


def plan_record(scene_id: str, parse: PlanParse, latency_ms: float | None = None) -> dict:
    return {
        "scene_id": scene_id,
        "command_pred": parse.command.value if parse.command is not None else None,
        "waypoints": [list(p) for p in parse.waypoints],
        "valid": parse.valid,
        "failure_kind": parse.failure_kind,
        "decode_latency_ms": latency_ms,
    }


class RegressionHead(nn.Module):
    """Two-layer perceptron regressing 2p coordinates from the mean-pooled context (CLM-off ablation)."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator, horizon: int = HORIZON):
        self.horizon = horizon
        self.fc1 = nn.Linear(d_model, hidden, rng)
        self.fc2 = nn.Linear(hidden, 2 * horizon, rng)

    def __call__(self, ctx: ContextState) -> nn.Tensor:
        w = ctx.mask[..., None].astype(float)
        pooled = (ctx.h * w).sum(axis=1) * (1.0 / ctx.mask.sum(axis=1, keepdims=True))
        return self.fc2(nn.gelu(self.fc1(pooled)))       # normalised coordinates (B, 2p)

    def loss(self, ctx: ContextState, gt_traj: np.ndarray) -> nn.Tensor:
        target = np.asarray(gt_traj, dtype=float).reshape(len(gt_traj), -1) / POS_SCALE
        return nn.mse(self(ctx), target)

    def predict(self, ctx: ContextState) -> np.ndarray:
        with nn.no_grad():
            out = self(ctx).data * POS_SCALE
        return out.reshape(out.shape[0], self.horizon, 2)
