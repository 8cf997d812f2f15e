"""Template descriptions, navigation prompts, vocabulary and the trajectory token codec."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .io import atomic_write_text
from .scene import AGENT_CLASSES, HORIZON, Command, EgoState, MapKind, VectorScene

PAD, BOS, EOS, UNK, MASK = "<pad>", "<bos>", "<eos>", "<unk>", "[MASK]"
SPECIALS = (PAD, BOS, EOS, UNK, MASK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = range(5)

COMMAND_PHRASE = {
    Command.TURN_LEFT: "turning left",
    Command.TURN_RIGHT: "turning right",
    Command.GO_STRAIGHT: "going straight",
}
COMMAND_TOKEN = {Command.TURN_LEFT: "left", Command.TURN_RIGHT: "right", Command.GO_STRAIGHT: "straight"}
TOKEN_COMMAND = {v: k for k, v in COMMAND_TOKEN.items()}

NAV_PATTERN = re.compile(
    r"The box of ego-car is \[(-?\d+\.\d), (-?\d+\.\d), (-?\d+\.\d), (-?\d+\.\d), (-?\d+\.\d), (-?\d+\.\d)\]\. "
    r"It is currently (turning left|turning right|going straight) and can not collide with other vehicles "
    r"or the boundaries of the BEV map\. Please predict the trajectory for the next \d+ timestamps\."
)
NAV_PATTERN_MASKED = re.compile(
    r"The box of ego-car is \[\[MASK\], \[MASK\], \[MASK\], \[MASK\], \[MASK\], \[MASK\]\]\. "
    r"It is currently (turning left|turning right|going straight) and can not collide with other vehicles "
    r"or the boundaries of the BEV map\. Please predict the trajectory for the next \d+ timestamps\."
)

_TOKEN_RE = re.compile(r"\[MASK\]|-?\d+\.\d+|\d+|[A-Za-z][A-Za-z_\-]*|[^\sA-Za-z0-9]")


class CodecError(ValueError):
    pass


class TrajectoryRangeError(CodecError):
    def __init__(self, index: int, value: float, limit: float):
        self.index = index
        super().__init__(f"waypoint {index}: coordinate {value!r} outside codec range [-{limit}, {limit}]")


class TokenParseError(CodecError):
    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


@dataclass(frozen=True)
class CodecConfig:
    limit: float = 81.9
    step: float = 0.1

    @property
    def max_index(self) -> int:
        return int(round(self.limit / self.step))


DEFAULT_CODEC = CodecConfig()


def quantize(x: float, step: float = 0.1) -> int:
    """Nearest grid index, halves rounded up."""
    return int(math.floor(x / step + 0.5))


def format_index(k: int) -> str:
    """Grid index -> canonical 0.1-precision string ("0.0", never "-0.0")."""
    sign = "-" if k < 0 else ""
    k = abs(k)
    return f"{sign}{k // 10}.{k % 10}"


def fmt(x: float) -> str:
    return format_index(quantize(x))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TemplateConfig:
    max_det: int = 6
    max_motion: int = 6
    max_map: int = 6


@dataclass(frozen=True)
class PromptBundle:
    det_text: str
    motion_text: str
    map_text: str
    caption_text: str
    nav_text: str


def _by_distance(scene: VectorScene):
    return sorted(scene.agents, key=lambda a: (math.hypot(a.cx, a.cy), a.id))


def _road_shape(scene: VectorScene) -> str:
    bounds = [p for p in scene.map if p.kind is MapKind.ROAD_BOUNDARY]
    if not bounds:
        return "open"
    pts = np.asarray(bounds[0].points)
    d0, d1 = pts[1] - pts[0], pts[-1] - pts[-2]
    turn = math.degrees(math.atan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1))
    if turn > 10:
        return "curving left"
    if turn < -10:
        return "curving right"
    return "straight"


def describe_scene(scene: VectorScene, caps: TemplateConfig | None = None, mask_ego: bool = False) -> PromptBundle:
    caps = caps or TemplateConfig()
    agents = _by_distance(scene)
    det = [f"{AGENT_CLASSES[a.class_id]} at ({fmt(a.cx)}, {fmt(a.cy)}) size ({fmt(a.w)}, {fmt(a.l)}) "
           f"heading {fmt(math.degrees(a.yaw))}." for a in agents[:caps.max_det]]
    det_text = " ".join(det) if det else "No foreground objects."

    motion = []
    for a in agents:
        if len(motion) == caps.max_motion:
            break
        m = scene.motion_of(a.id)
        if m is None:
            continue
        dx, dy = m.waypoints[-1][0] - a.cx, m.waypoints[-1][1] - a.cy
        motion.append(f"{AGENT_CLASSES[a.class_id]} {a.id} moves ({fmt(dx)}, {fmt(dy)}).")
    motion_text = " ".join(motion) if motion else "No agent motions."

    polys = [f"{p.kind.value} from ({fmt(p.points[0][0])}, {fmt(p.points[0][1])}) "
             f"to ({fmt(p.points[-1][0])}, {fmt(p.points[-1][1])})." for p in scene.map[:caps.max_map]]
    map_text = " ".join(polys) if polys else "No map elements."

    counts = [sum(1 for a in scene.agents if a.class_id in ids) for ids in ((0, 1), (2,), (3,))]
    lanes = 1 + sum(1 for p in scene.map if p.kind is MapKind.LANE_DIVIDER)
    crossing = " and a crossing ahead" if any(p.kind is MapKind.CROSSING for p in scene.map) else ""
    caption = (f"A road {_road_shape(scene)} with {lanes} lanes{crossing}, {counts[0]} vehicles, "
               f"{counts[1]} pedestrians and {counts[2]} cyclists nearby.")
    return PromptBundle(det_text, motion_text, map_text, caption, nav_prompt(scene.ego, HORIZON, mask_ego))


def nav_prompt(ego: EgoState, p: int = HORIZON, mask_ego: bool = False) -> str:
    if p < 1:
        raise ValueError(f"horizon p must be >= 1, got {p}")
    b = ego.box
    if mask_ego:
        nums = ", ".join([MASK] * 6)
    else:
        nums = ", ".join(fmt(v) for v in (b.cx, b.cy, b.cz, b.w, b.h, b.l))
    return (f"The box of ego-car is [{nums}]. It is currently {COMMAND_PHRASE[ego.command]} and can not "
            f"collide with other vehicles or the boundaries of the BEV map. "
            f"Please predict the trajectory for the next {p} timestamps.")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------
def coordinate_tokens(codec: CodecConfig = DEFAULT_CODEC) -> list[str]:
    m = codec.max_index
    return [format_index(k) for k in range(-m, m + 1)]


class Vocabulary:
    """Bijective token <-> id map; ids 0-4 are the special tokens."""

    def __init__(self, tokens: Sequence[str], codec: CodecConfig = DEFAULT_CODEC):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.codec = codec
        m = codec.max_index
        self._coord_ids = np.array([self.token_to_id[format_index(k)] for k in range(-m, m + 1)])
        values = np.full(len(tokens), np.nan)
        # decoded values equal float(token) so "1.2" reads back as exactly 1.2
        values[self._coord_ids] = [float(format_index(k)) for k in range(-m, m + 1)]
        self.coord_value = values
        self.unk_count = 0

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def is_coord(self, token_id: int) -> bool:
        return 0 <= token_id < len(self) and not math.isnan(self.coord_value[token_id])

    def coord_id(self, k: int) -> int:
        return int(self._coord_ids[k + self.codec.max_index])

    def encode_text(self, text: str) -> list[int]:
        ids = []
        for tok in tokenize(text):
            idx = self.token_to_id.get(tok)
            if idx is None:
                self.unk_count += 1
                idx = UNK_ID
            ids.append(idx)
        return ids

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.id_to_token))

    @classmethod
    def load(cls, path, codec: CodecConfig = DEFAULT_CODEC) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens, codec)


def build_vocabulary(corpus: Sequence[str], codec: CodecConfig = DEFAULT_CODEC) -> Vocabulary:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = {tok for line in corpus for tok in tokenize(line)}
    words.update(coordinate_tokens(codec))
    words.update(COMMAND_TOKEN.values())
    words.difference_update(SPECIALS)
    return Vocabulary(list(SPECIALS) + sorted(words), codec)


def scene_corpus(scenes: Iterable[VectorScene], caps: TemplateConfig | None = None) -> list[str]:
    out = []
    for s in scenes:
        b = describe_scene(s, caps)
        out.extend([b.det_text, b.motion_text, b.map_text, b.caption_text, b.nav_text])
    return out


# ---------------------------------------------------------------------------
# trajectory codec
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab_size: int) -> None:
        if any(not 0 <= i < vocab_size for i in self.ids):
            raise ValueError("token id outside the vocabulary")
        if self.ids.count(EOS_ID) > 1:
            raise ValueError("more than one EOS")
        if EOS_ID in self.ids and self.ids.index(EOS_ID) != len(self.ids) - 1:
            raise ValueError("tokens after EOS")


def _coord_ids(traj, vocab: Vocabulary) -> list[int]:
    m = vocab.codec.max_index
    ids = []
    for i, pt in enumerate(traj):
        for v in pt:
            if not math.isfinite(v) or abs(k := quantize(float(v), vocab.codec.step)) > m:
                raise TrajectoryRangeError(i, v, vocab.codec.limit)
            ids.append(vocab.coord_id(k))
    return ids


def encode_trajectory(traj, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence((BOS_ID, *_coord_ids(traj, vocab), EOS_ID))


def _parse_coords(ids: Sequence[int], vocab: Vocabulary) -> list[tuple[float, float]]:
    vals = []
    for pos, i in enumerate(ids):
        if not vocab.is_coord(i):
            raise TokenParseError("bad_token", f"non-coordinate token at payload position {pos}")
        vals.append(float(vocab.coord_value[i]))
    if len(vals) % 2:
        raise TokenParseError("odd_coordinates", f"{len(vals)} coordinate tokens")
    return [(vals[j], vals[j + 1]) for j in range(0, len(vals), 2)]


def decode_trajectory(tokens: TokenSequence | Sequence[int], vocab: Vocabulary) -> list[tuple[float, float]]:
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    if not ids or ids[0] != BOS_ID:
        raise TokenParseError("missing_bos")
    if EOS_ID not in ids:
        raise TokenParseError("truncated", "no EOS")
    end = ids.index(EOS_ID)
    if end != len(ids) - 1:
        raise TokenParseError("content_after_eos")
    return _parse_coords(ids[1:end], vocab)


def gt_caption(ego: EgoState, vocab: Vocabulary) -> TokenSequence:
    """Teacher-forcing target: BOS, command word, quantised waypoints, EOS."""
    return TokenSequence((BOS_ID, vocab.token_to_id[COMMAND_TOKEN[ego.command]],
                          *_coord_ids(ego.gt_trajectory, vocab), EOS_ID))
