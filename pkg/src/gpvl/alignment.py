"""Group-wise vision-language alignment.

Visual rows (detection / motion / map) and template-description tokens are
each passed through a shared transformer block per modality, then matched
batch-wise with a bidirectional InfoNCE objective on four groups: det,
motion, map and their concatenation ("global").
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nnkit as nn
from .promptgen import PAD_ID, PromptBundle, Vocabulary
from .scene import EncoderConfig, FeatureBundleRaw

log = logging.getLogger(__name__)

GROUPS = ("det", "motion", "map", "global")
PARTS = ("det", "motion", "map")


@dataclass(frozen=True)
class AlignConfig:
    d_c: int = 64
    heads: int = 4
    layers: int = 2
    ff_hidden: int = 128
    len_det: int = 96
    len_motion: int = 56
    len_map: int = 84
    tau_init: float = 0.07
    similarity: str = "max"          # "max" (weighted max form) or "pooled_cosine"
    groups: tuple[str, ...] = GROUPS

    def __post_init__(self):
        if self.similarity not in ("max", "pooled_cosine"):
            raise ValueError(f"unknown similarity mode {self.similarity!r}")
        bad = set(self.groups) - set(GROUPS)
        if bad or not self.groups:
            raise ValueError(f"alignment groups must be a non-empty subset of {GROUPS}")
        if self.d_c % self.heads:
            raise ValueError(f"d_c={self.d_c} not divisible by heads={self.heads}")

    def text_lengths(self) -> dict[str, int]:
        return {"det": self.len_det, "motion": self.len_motion, "map": self.len_map}


@dataclass
class VisualBundle:
    v_det: nn.Tensor
    v_motion: nn.Tensor
    v_map: nn.Tensor
    v_global: nn.Tensor

    def part(self, group: str) -> nn.Tensor:
        return getattr(self, f"v_{group}")


@dataclass
class TextBundle:
    t_det: nn.Tensor
    t_motion: nn.Tensor
    t_map: nn.Tensor
    t_global: nn.Tensor
    masks: dict[str, np.ndarray]     # True on real tokens, keyed by group

    def part(self, group: str) -> nn.Tensor:
        return getattr(self, f"t_{group}")


class VisualEncoder(nn.Module):
    def __init__(self, enc: EncoderConfig, cfg: AlignConfig, rng: np.random.Generator):
        self.embed_det = nn.Linear(enc.d_det, cfg.d_c, rng)
        self.embed_motion = nn.Linear(enc.d_motion, cfg.d_c, rng)
        self.embed_map = nn.Linear(enc.d_map, cfg.d_c, rng)
        self.block = nn.TransformerStack(cfg.layers, cfg.d_c, cfg.heads, cfg.ff_hidden, rng)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: AlignConfig, rng: np.random.Generator):
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_c, rng)
        self.pos_emb = nn.Embedding(max(cfg.text_lengths().values()), cfg.d_c, rng)
        self.block = nn.TransformerStack(cfg.layers, cfg.d_c, cfg.heads, cfg.ff_hidden, rng)


class _GroupWeights(nn.Module):
    def __init__(self, n_visual: int, n_text: int, d_c: int):
        self.w1 = nn.parameter(np.full((1, n_visual), 1.0 / (n_visual * math.sqrt(d_c))))
        self.w2 = nn.parameter(np.full((1, n_text), 1.0 / (n_text * math.sqrt(d_c))))


class AlignmentHead(nn.Module):
    """Per-group weight pairs (visual width, text width) and a shared log-temperature."""

    def __init__(self, enc: EncoderConfig, cfg: AlignConfig):
        rows_v = {"det": enc.n_det, "motion": enc.n_motion, "map": enc.n_map}
        rows_v["global"] = sum(rows_v.values())
        rows_t = cfg.text_lengths()
        rows_t["global"] = sum(rows_t.values())
        self.groups = tuple(cfg.groups)
        for g in self.groups:
            setattr(self, g, _GroupWeights(rows_v[g], rows_t[g], cfg.d_c))
        self.log_tau = nn.parameter(np.array(math.log(cfg.tau_init)))

    def weights(self, group: str) -> _GroupWeights:
        return getattr(self, group)


class AlignmentModel(nn.Module):
    def __init__(self, enc: EncoderConfig, cfg: AlignConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.visual = VisualEncoder(enc, cfg, rng)
        self.text = TextEncoder(vocab_size, cfg, rng)
        self.head = AlignmentHead(enc, cfg)

    def named_parameters(self, prefix: str = ""):
        # flatten the head so per-group weights read "<prefix><group>.w1"
        yield from self.visual.named_parameters(prefix + "visual.")
        yield from self.text.named_parameters(prefix + "text.")
        yield from self.head.named_parameters(prefix)


# ---------------------------------------------------------------------------
# visual / textual attention
# ---------------------------------------------------------------------------
def vis_att(raw: FeatureBundleRaw, params: VisualEncoder) -> VisualBundle:
    """Embed each feature group to d_c and run the shared visual block on it."""
    single = raw.f_det.ndim == 2
    parts = []
    for feats, mask, embed in ((raw.f_det, raw.det_mask, params.embed_det),
                               (raw.f_motion, raw.motion_mask, params.embed_motion),
                               (raw.f_map, raw.map_mask, params.embed_map)):
        if feats.shape[-1] != embed.weight.shape[0]:
            raise ValueError(f"feature width {feats.shape[-1]} != embedding input {embed.weight.shape[0]}")
        x = embed(feats)
        if single:
            x = x.reshape(1, *x.shape)
        attn_mask = None
        if mask is not None:
            m = np.asarray(mask, dtype=bool).reshape(x.shape[0], x.shape[1])
            attn_mask = nn.key_padding_mask(m)
        y = params.block(x, mask=attn_mask)
        parts.append(y.reshape(*y.shape[1:]) if single else y)
    axis = 0 if single else 1
    return VisualBundle(parts[0], parts[1], parts[2], nn.concat(parts, axis=axis))


@dataclass
class TextArrays:
    ids: dict[str, np.ndarray]     # part -> (K, L_part) token ids, PAD-filled
    masks: dict[str, np.ndarray]

    def take(self, idx) -> "TextArrays":
        return TextArrays({k: v[idx] for k, v in self.ids.items()}, {k: v[idx] for k, v in self.masks.items()})


def text_arrays(prompts: Sequence[PromptBundle], vocab: Vocabulary, cfg: AlignConfig) -> TextArrays:
    lengths = cfg.text_lengths()
    ids, masks = {}, {}
    unk_before = vocab.unk_count
    for part in PARTS:
        arr = np.full((len(prompts), lengths[part]), PAD_ID, dtype=np.int64)
        for b, p in enumerate(prompts):
            toks = vocab.encode_text(getattr(p, f"{part}_text"))
            if len(toks) > lengths[part]:
                raise ValueError(f"{part} description has {len(toks)} tokens; limit {lengths[part]}")
            arr[b, :len(toks)] = toks
        ids[part] = arr
        masks[part] = arr != PAD_ID
    if vocab.unk_count > unk_before:
        log.info("replaced %d unknown description tokens with UNK", vocab.unk_count - unk_before)
    return TextArrays(ids, masks)


def encode_text_arrays(arr: TextArrays, params: TextEncoder) -> TextBundle:
    parts = []
    for part in PARTS:
        ids = arr.ids[part]
        pos = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        x = params.tok_emb(ids) + params.pos_emb(pos)
        parts.append(params.block(x, mask=nn.key_padding_mask(arr.masks[part])))
    masks = dict(arr.masks)
    masks["global"] = np.concatenate([arr.masks[p] for p in PARTS], axis=1)
    return TextBundle(parts[0], parts[1], parts[2], nn.concat(parts, axis=1), masks)


def txt_att(prompts: PromptBundle | Sequence[PromptBundle], vocab: Vocabulary, params: TextEncoder,
            cfg: AlignConfig) -> TextBundle:
    """Bidirectional encoding of the three description parts; single bundle -> unbatched output."""
    single = isinstance(prompts, PromptBundle)
    batch = encode_text_arrays(text_arrays([prompts] if single else list(prompts), vocab, cfg), params)
    if not single:
        return batch
    return TextBundle(batch.t_det[0], batch.t_motion[0], batch.t_map[0], batch.t_global[0],
                      {k: v[0] for k, v in batch.masks.items()})


# ---------------------------------------------------------------------------
# similarity and contrastive losses
# ---------------------------------------------------------------------------
def similarity_matrix(V: nn.Tensor, T: nn.Tensor, w1: nn.Tensor, w2: nn.Tensor, t_mask: np.ndarray,
                      mode: str = "max") -> nn.Tensor:
    """(K, K) matrix with entry [i, j] = s(V_i, T_j).

    ``max`` mode: half the max over real text rows of (w1 V_i) . T_j[r] plus
    half the max over visual rows of (w2 T_j) . V_i[r]; padded text rows are
    zeroed before w2 and excluded from the first max.
    """
    t_mask = np.asarray(t_mask, dtype=bool)
    k, n, d = V.shape
    kt, length, _ = T.shape
    if t_mask.shape != (kt, length):
        raise ValueError(f"text mask shape {t_mask.shape} != {(kt, length)}")
    if not t_mask.any(axis=1).all():
        raise ValueError("similarity undefined: a text part is entirely padding")
    if mode == "pooled_cosine":
        vm = V.mean(axis=1)
        tw = t_mask[..., None].astype(float)
        tm = (T * tw).sum(axis=1) * (1.0 / t_mask.sum(axis=1, keepdims=True))
        vn = vm * ((vm * vm).sum(axis=1, keepdims=True) + 1e-12) ** -0.5
        tn = tm * ((tm * tm).sum(axis=1, keepdims=True) + 1e-12) ** -0.5
        return vn @ tn.transpose()
    if w1.shape != (1, n) or w2.shape != (1, length):
        raise ValueError(f"weight widths {w1.shape}/{w2.shape} do not match rows {n}/{length}")
    Tm = T * t_mask[..., None].astype(float)
    a = (w1 @ V).reshape(k, d)                      # (K, d)
    b = (w2 @ Tm).reshape(kt, d)                    # (K, d)
    s1 = (a @ Tm.reshape(kt * length, d).transpose()).reshape(k, kt, length)
    s1 = nn.masked_fill(s1, ~t_mask[None, :, :], nn.MASK_VALUE)
    s2 = (V @ b.transpose()).transpose(0, 2, 1)     # (K_v, K_t, N)
    return (nn.tmax(s1, axis=-1) + nn.tmax(s2, axis=-1)) * 0.5


def similarity(V: nn.Tensor, T: nn.Tensor, w1: nn.Tensor, w2: nn.Tensor, t_mask=None, mode: str = "max") -> nn.Tensor:
    """Scalar s(V, T) for one (rows x d_c) visual part and one text part."""
    t_mask = np.ones(T.shape[0], dtype=bool) if t_mask is None else np.asarray(t_mask, dtype=bool)
    S = similarity_matrix(V.reshape(1, *V.shape), T.reshape(1, *T.shape), w1, w2, t_mask[None], mode)
    return S.reshape(())


def contrastive_loss(S: nn.Tensor, log_tau: nn.Tensor | float) -> nn.Tensor:
    """Mean over i of the vision->text and text->vision InfoNCE terms for a (K, K) matrix."""
    k = S.shape[0]
    if k == 0:
        raise ValueError("contrastive loss needs K >= 1")
    if isinstance(log_tau, nn.Tensor):
        logits = S * nn.exp(-log_tau)
    else:
        logits = S * math.exp(-log_tau)
    diag = (np.arange(k), np.arange(k))
    v2t = nn.log_softmax(logits, axis=1)[diag]
    t2v = nn.log_softmax(logits, axis=0)[diag]
    return -(v2t + t2v).sum() * (1.0 / k)


def align_loss(V: nn.Tensor, T: nn.Tensor, w1: nn.Tensor, w2: nn.Tensor, log_tau, t_mask=None,
               mode: str = "max") -> nn.Tensor:
    """Contrastive loss for K matched (V_i, T_i) pairs; V (K, N, d), T (K, L, d)."""
    if V.shape[0] == 0:
        raise ValueError("align_loss needs K >= 1")
    t_mask = np.ones(T.shape[:2], dtype=bool) if t_mask is None else t_mask
    return contrastive_loss(similarity_matrix(V, T, w1, w2, t_mask, mode), log_tau)


def group_alignment_loss(visual: VisualBundle, text: TextBundle, head: AlignmentHead,
                         mode: str = "max") -> tuple[nn.Tensor, dict[str, float]]:
    """Sum of per-group contrastive losses, with the per-group values reported."""
    total, breakdown = None, {}
    for g in head.groups:
        w = head.weights(g)
        term = align_loss(visual.part(g), text.part(g), w.w1, w.w2, head.log_tau, text.masks[g], mode)
        breakdown[g] = term.item()
        total = term if total is None else total + term
    return total, breakdown


def retrieval_eval(S) -> tuple[float, float]:
    """Top-1 matched-pair accuracy (vision->text, text->vision); ties go to the lowest index."""
    S = np.asarray(S.data if isinstance(S, nn.Tensor) else S, dtype=float)
    k = S.shape[0]
    if k < 2:
        raise ValueError("retrieval needs K >= 2")
    idx = np.arange(k)
    return float(np.mean(S.argmax(axis=1) == idx)), float(np.mean(S.argmax(axis=0) == idx))


def group_similarities(visual: VisualBundle, text: TextBundle, head: AlignmentHead, group: str,
                       mode: str = "max") -> nn.Tensor:
    w = head.weights(group)
    return similarity_matrix(visual.part(group), text.part(group), w.w1, w.w2, text.masks[group], mode)
