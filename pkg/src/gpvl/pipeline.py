"""Three-stage training, batched inference, ablations and split-shift evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnkit as nn
from .alignment import (GROUPS, AlignConfig, AlignmentModel, encode_text_arrays, group_alignment_loss,
                        text_arrays, vis_att)
from .evaluation import (EvalConfig, EvalReport, GridConfig, PlanMetrics, TimingReport, corrupt_features,
                         evaluate, timing_harness)
from .io import atomic_write_text, sha256_bytes, stable_hash, write_json
from .planner import (DecodingConfig, PlannerConfig, PlannerModel, PlanParse, RegressionHead, caption_loss,
                      decode_plan, encode_context_batch, greedy_decode_batch, plan_record)
from .promptgen import (PAD_ID, TemplateConfig, Vocabulary, build_vocabulary, describe_scene, gt_caption,
                        scene_corpus)
from .scene import (EncoderConfig, FeatureBundleRaw, ProbeParams, SceneArrays, SceneEncoderParams, VectorScene,
                    dumps_dataset, encode_arrays, perception_loss_arrays, scene_arrays)

log = logging.getLogger(__name__)

STAGES = ("perception", "alignment", "planning")
TOGGLES = ("vis", "ga", "cap")
# loss terms each stage may use, intersected with the enabled toggles
STAGE_TERMS = {"perception": ("vis",), "alignment": ("vis", "ga"), "planning": ("vis", "cap")}
# a stage runs only when its own term is enabled
STAGE_KEY = {"perception": "vis", "alignment": "ga", "planning": "cap"}


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key {where + '.' if where else ''}{unknown[0]!r}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


@dataclass(frozen=True)
class TrainConfig:
    lr_stage1: float = 2e-4
    lr_stage2: float = 1e-4
    lr_stage3: float = 5e-6
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs_stage1: int = 2
    epochs_stage2: int = 2
    epochs_stage3: int = 10
    seed: int = 0
    toggles: tuple[str, ...] = TOGGLES
    stages: tuple[str, ...] = STAGES
    use_caption: bool = True
    align_groups: tuple[str, ...] = GROUPS
    head: str = "clm"                       # "clm" generative decoder or "mlp" regression head
    freeze_encoder_stage2: bool = False
    reset_optimizer: bool = True
    grad_clip: float = 1.0
    mask_ego: bool = False
    encoder: EncoderConfig = EncoderConfig()
    align: AlignConfig = AlignConfig()
    planner: PlannerConfig = PlannerConfig()

    def __post_init__(self):
        for k in ("lr_stage1", "lr_stage2", "lr_stage3"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_stage3) < 0:
            raise ConfigError("epoch counts must be >= 0")
        bad = set(self.toggles) - set(TOGGLES)
        if bad:
            raise ConfigError(f"unknown loss toggle {sorted(bad)[0]!r}; expected a subset of {TOGGLES}")
        bad = set(self.stages) - set(STAGES)
        if bad:
            raise ConfigError(f"unknown stage {sorted(bad)[0]!r}; expected a subset of {STAGES}")
        if self.head not in ("clm", "mlp"):
            raise ConfigError(f"head must be 'clm' or 'mlp', got {self.head!r}")
        if not self.align_groups or set(self.align_groups) - set(GROUPS):
            raise ConfigError(f"align_groups must be a non-empty subset of {GROUPS}")
        if self.planner.d_visual != self.align.d_c:
            object.__setattr__(self, "planner", dataclasses.replace(self.planner, d_visual=self.align.d_c))

    def lr(self, stage: str) -> float:
        return (self.lr_stage1, self.lr_stage2, self.lr_stage3)[STAGES.index(stage)]

    def epochs(self, stage: str) -> int:
        return (self.epochs_stage1, self.epochs_stage2, self.epochs_stage3)[STAGES.index(stage)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))      # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"encoder": EncoderConfig, "align": AlignConfig, "planner": PlannerConfig}
        for k, sub in nested.items():
            if k in d:
                d[k] = _from_dict(sub, d[k], k)
        return _from_dict(cls, d, "")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-corpus preset: larger rates than the full-scale defaults so a CPU run converges in minutes."""
        base = dict(lr_stage1=3e-3, lr_stage2=1e-3, lr_stage3=2e-3, batch_size=16,
                    epochs_stage1=3, epochs_stage2=3, epochs_stage3=100)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# model bundle and data preparation
# ---------------------------------------------------------------------------
class GPVLModel(nn.Module):
    """Scene encoder, perception probes, alignment blocks, planner and optional regression head."""

    def __init__(self, vocab: Vocabulary, cfg: TrainConfig):
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = SceneEncoderParams(cfg.encoder, rng)
        self.probe = ProbeParams(cfg.encoder, rng)
        self.align = AlignmentModel(cfg.encoder, dataclasses.replace(cfg.align, groups=tuple(cfg.align_groups)),
                                    len(vocab), rng)
        self.planner = PlannerModel(len(vocab), cfg.planner, rng)
        self.mlp = RegressionHead(cfg.planner.d_model, cfg.planner.ff_hidden, rng) if cfg.head == "mlp" else None

    def named_parameters(self, prefix: str = ""):
        yield from self.encoder.named_parameters(prefix + "scene.encoder.")
        yield from self.probe.named_parameters(prefix + "scene.probe.")
        yield from self.align.named_parameters(prefix + "align.")
        yield from self.planner.named_parameters(prefix + "planner.")
        if self.mlp is not None:
            yield from self.mlp.named_parameters(prefix + "mlp.")


@dataclass
class PreparedData:
    scenes: list[VectorScene]
    arrays: SceneArrays
    text: object | None
    captions: list[list[int]]
    navs: list[list[int]]
    targets: np.ndarray
    trajectories: np.ndarray

    def __len__(self) -> int:
        return len(self.scenes)


def build_vocab(scenes: Sequence[VectorScene]) -> Vocabulary:
    return build_vocabulary(scene_corpus(scenes))


def prepare(scenes: Sequence[VectorScene], model: GPVLModel, mask_ego: bool | None = None,
            with_text: bool = True) -> PreparedData:
    cfg = model.cfg
    mask_ego = cfg.mask_ego if mask_ego is None else mask_ego
    vocab = model.vocab
    prompts = [describe_scene(s, TemplateConfig(), mask_ego=mask_ego) for s in scenes]
    caps = [vocab.encode_text(p.caption_text) if cfg.use_caption else [] for p in prompts]
    navs = [vocab.encode_text(p.nav_text) for p in prompts]
    gts = [gt_caption(s.ego, vocab).ids for s in scenes]
    width = max((len(g) for g in gts), default=0)
    targets = np.full((len(scenes), width), PAD_ID, dtype=np.int64)
    for i, g in enumerate(gts):
        targets[i, :len(g)] = g
    text = text_arrays(prompts, vocab, model.align.cfg) if with_text else None
    traj = np.array([s.ego.gt_trajectory for s in scenes], dtype=float).reshape(len(scenes), -1, 2)
    return PreparedData(list(scenes), scene_arrays(scenes, cfg.encoder), text, caps, navs, targets, traj)


def dataset_hash(scenes: Sequence[VectorScene]) -> str:
    return sha256_bytes(dumps_dataset(scenes).encode("utf-8"))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class RunManifest:
    config: dict
    config_hash: str
    dataset_hash: str
    vocab_hash: str
    curves: dict[str, dict[str, list[float]]]
    optimizer_events: list[dict]
    stages_run: list[str]
    stages_skipped: list[str]
    disabled: list[str] = field(default_factory=list)
    tags: dict = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    final_metrics: dict | None = None
    model: GPVLModel | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        return json.loads(json.dumps(d))

    def save(self, path) -> None:
        write_json(path, self.to_dict())


def _active_prefixes(stage: str, cfg: TrainConfig, terms: Sequence[str]) -> tuple[str, ...]:
    if stage == "perception":
        return ("scene.",)
    enc = () if (stage == "alignment" and cfg.freeze_encoder_stage2) else ("scene.encoder.",)
    probe = ("scene.probe.",) if "vis" in terms else ()
    if stage == "alignment":
        return enc + probe + ("align.",)
    head = ("mlp.",) if cfg.head == "mlp" else ()
    return enc + probe + ("align.visual.", "planner.") + head


def _term(name: str, fn):
    try:
        value = fn()
    except FloatingPointError as e:
        raise TrainingError(f"non-finite {name} loss: {e}") from None
    if not math.isfinite(value.item()):
        raise TrainingError(f"non-finite {name} loss")
    return value


def _step_losses(model: GPVLModel, data: PreparedData, idx: np.ndarray, terms: Sequence[str]) -> dict:
    arr = data.arrays.take(idx)
    raw = encode_arrays(arr, model.encoder)
    out = {}
    if "vis" in terms:
        out["vis"] = _term("vis", lambda: perception_loss_arrays(raw, arr, model.probe))
    if "ga" in terms or "cap" in terms:
        visual = vis_att(raw, model.align.visual)
        if "ga" in terms:
            text = encode_text_arrays(data.text.take(idx), model.align.text)
            mode = model.align.cfg.similarity
            out["ga"] = _term("ga", lambda: group_alignment_loss(visual, text, model.align.head, mode)[0])
        if "cap" in terms:
            ctx = encode_context_batch([data.captions[i] for i in idx], [data.navs[i] for i in idx],
                                       visual.v_global, model.planner)
            if model.mlp is not None:
                out["cap"] = _term("cap", lambda: model.mlp.loss(ctx, data.trajectories[idx]))
            else:
                out["cap"] = _term("cap", lambda: caption_loss(ctx, data.targets[idx], model.planner))
    return out


def train(scenes: Sequence[VectorScene], cfg: TrainConfig, vocab: Vocabulary | None = None,
          progress=None) -> RunManifest:
    """Run the enabled stages in order and return the manifest (trained model attached as ``.model``).

    Stage 1 fits the scene encoder and probes on the perception loss, stage 2
    adds the group-wise alignment loss, stage 3 trains the planner on the
    caption loss (plus the perception loss when enabled) end to end.
    """
    if not scenes:
        raise TrainingError("training needs a non-empty dataset")
    if not set(cfg.toggles) & set(TOGGLES):
        raise TrainingError("no loss terms enabled")
    vocab = vocab or build_vocab(scenes)
    model = GPVLModel(vocab, cfg)
    needs_text = "ga" in cfg.toggles and "alignment" in cfg.stages and cfg.epochs_stage2 > 0
    data = prepare(scenes, model, with_text=needs_text)
    store = nn.ParamStore(model.named_parameters())
    curves, events, run, skipped = {}, [], [], []
    n = len(data)
    for si, stage in enumerate(STAGES):
        terms = [t for t in STAGE_TERMS[stage] if t in cfg.toggles]
        if stage not in cfg.stages or STAGE_KEY[stage] not in cfg.toggles or cfg.epochs(stage) == 0:
            skipped.append(stage)
            continue
        prefixes = _active_prefixes(stage, cfg, terms)
        candidates = [k for k in store.params if k.startswith(prefixes)]
        if cfg.reset_optimizer:
            store.reset_state()
        events.append({"stage": stage, "optimizer_state": "reset" if cfg.reset_optimizer or not run else "kept",
                       "learning_rate": cfg.lr(stage), "terms": terms})
        opt = nn.OptimConfig(learning_rate=cfg.lr(stage), weight_decay=cfg.weight_decay)
        stage_curve = {t: [] for t in terms}
        stage_curve["total"] = []
        for epoch in range(cfg.epochs(stage)):
            order = np.random.default_rng([cfg.seed, si, epoch]).permutation(n)
            sums = dict.fromkeys(terms, 0.0)
            total_sum = 0.0
            for b0 in range(0, n, cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                store.zero_grad()
                losses = _step_losses(model, data, idx, terms)
                total = None
                for t in terms:
                    total = losses[t] if total is None else total + losses[t]
                parts = sum(losses[t].item() for t in terms)
                if abs(total.item() - parts) > 1e-9 * max(1.0, abs(parts)):
                    raise TrainingError("total loss differs from the sum of its terms")
                try:
                    total.backward()
                except FloatingPointError as e:
                    raise TrainingError(f"non-finite gradient in stage {stage}: {e}") from None
                names = [k for k in candidates if store.params[k].grad is not None]
                if cfg.grad_clip:
                    nn.clip_grad_norm(store, cfg.grad_clip, names)
                nn.adamw_step(store, opt, names)
                w = len(idx) / n
                for t in terms:
                    sums[t] += w * losses[t].item()
                total_sum += w * total.item()
            for t in terms:
                stage_curve[t].append(sums[t])
            stage_curve["total"].append(total_sum)
            if progress is not None:
                progress(stage, epoch, {k: v[-1] for k, v in stage_curve.items()})
        curves[stage] = stage_curve
        run.append(stage)
    store.zero_grad()
    return RunManifest(config=cfg.to_dict(), config_hash=stable_hash(cfg.to_dict()),
                       dataset_hash=dataset_hash(scenes), vocab_hash=stable_hash(vocab.id_to_token),
                       curves=curves, optimizer_events=events, stages_run=run, stages_skipped=skipped,
                       model=model)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------
def _corrupt_batch(raw: FeatureBundleRaw, scenes: Sequence[VectorScene], corrupt) -> FeatureBundleRaw:
    kind, severity, seed = corrupt
    parts = ([], [], [])
    for i, s in enumerate(scenes):
        one = FeatureBundleRaw(nn.Tensor(raw.f_det.data[i]), nn.Tensor(raw.f_motion.data[i]),
                               nn.Tensor(raw.f_map.data[i]), raw.det_mask[i], raw.motion_mask[i], raw.map_mask[i])
        out = corrupt_features(one, kind, severity, seed=zlib.crc32(f"{seed}:{s.scene_id}".encode()))
        for acc, t in zip(parts, (out.f_det, out.f_motion, out.f_map)):
            acc.append(t.data)
    return FeatureBundleRaw(*(nn.Tensor(np.stack(p)) for p in parts), raw.det_mask, raw.motion_mask, raw.map_mask)


def _plan_batch(model: GPVLModel, scenes: Sequence[VectorScene], mask_ego: bool, corrupt,
                decoding: DecodingConfig) -> list[dict]:
    data = prepare(scenes, model, mask_ego=mask_ego, with_text=False)
    with nn.no_grad():
        raw = encode_arrays(data.arrays, model.encoder)
        if corrupt is not None:
            raw = _corrupt_batch(raw, scenes, corrupt)
        visual = vis_att(raw, model.align.visual)
        ctx = encode_context_batch(data.captions, data.navs, visual.v_global, model.planner)
        if model.mlp is not None:
            preds = model.mlp.predict(ctx)
            return [plan_record(s.scene_id, PlanParse(True, s.ego.command, [tuple(map(float, p)) for p in pred]))
                    for s, pred in zip(scenes, preds)]
        seqs = greedy_decode_batch(ctx, model.planner, decoding)
    return [plan_record(s.scene_id, decode_plan(q, model.vocab, decoding.horizon)) for s, q in zip(scenes, seqs)]


def infer_batch(scenes: Sequence[VectorScene], model: GPVLModel, mask_ego: bool = False, corrupt=None,
                decoding: DecodingConfig | None = None, batch_size: int = 64) -> list[dict]:
    """Plan records for many scenes; ``corrupt`` is an optional (kind, severity, seed) triple."""
    decoding = decoding or DecodingConfig()
    out = []
    for b0 in range(0, len(scenes), batch_size):
        out.extend(_plan_batch(model, scenes[b0:b0 + batch_size], mask_ego, corrupt, decoding))
    return out


def infer(scene: VectorScene, model: GPVLModel, mask_ego: bool = False, corrupt=None,
          decoding: DecodingConfig | None = None, timed: bool = False) -> dict:
    """encode -> vis_att -> context -> greedy decode -> parse for one scene."""
    t0 = time.perf_counter()
    rec = _plan_batch(model, [scene], mask_ego, corrupt, decoding or DecodingConfig())[0]
    if timed:
        rec["decode_latency_ms"] = (time.perf_counter() - t0) * 1000.0
    return rec


def evaluate_model(model: GPVLModel, scenes: Sequence[VectorScene], mask_ego: bool = False, corrupt=None,
                   eval_cfg: EvalConfig | None = None) -> tuple[EvalReport, list[dict]]:
    plans = infer_batch(scenes, model, mask_ego=mask_ego, corrupt=corrupt)
    return evaluate(plans, scenes, eval_cfg), plans


BENCH_CONFIGS = ("full", "ego_status_masked", "decode_max_len_64")


def bench(model: GPVLModel, scenes: Sequence[VectorScene], repetitions: int = 10,
          configs: Sequence[str] = BENCH_CONFIGS) -> list[dict]:
    """One timing row per inference configuration (per-scene end-to-end latency)."""
    rows = []
    for name in configs:
        if name == "full":
            fn = lambda s: infer(s, model)
        elif name == "ego_status_masked":
            fn = lambda s: infer(s, model, mask_ego=True)
        elif name == "decode_max_len_64":
            dec = DecodingConfig(max_len=64)
            fn = lambda s: infer(s, model, decoding=dec)
        else:
            raise ValueError(f"unknown bench configuration {name!r}")
        rep: TimingReport = timing_harness(fn, scenes, repetitions=repetitions)
        rows.append({"config": name, **rep.to_dict()})
    return rows


# ---------------------------------------------------------------------------
# ablations and split shift
# ---------------------------------------------------------------------------
ABLATION_ROWS = (
    # id, name, disabled component, Perc, Cap, VLP, GA, CLM
    (1, "no_perception", "Perc", dict(Perc=False, Cap=True, VLP=True, GA=True, CLM=True)),
    (2, "no_caption", "Cap", dict(Perc=True, Cap=False, VLP=True, GA=True, CLM=True)),
    (3, "no_alignment", "VLP", dict(Perc=True, Cap=True, VLP=False, GA=False, CLM=True)),
    (4, "no_groupwise", "GA", dict(Perc=True, Cap=True, VLP=True, GA=False, CLM=True)),
    (5, "mlp_head", "CLM", dict(Perc=True, Cap=True, VLP=True, GA=True, CLM=False)),
    (6, "full", None, dict(Perc=True, Cap=True, VLP=True, GA=True, CLM=True)),
)


def ablation_config(cfg: TrainConfig, component: str | None) -> TrainConfig:
    if component is None:
        return cfg
    if component == "Perc":
        return dataclasses.replace(cfg, toggles=tuple(t for t in cfg.toggles if t != "vis"))
    if component == "Cap":
        return dataclasses.replace(cfg, use_caption=False)
    if component == "VLP":
        return dataclasses.replace(cfg, toggles=tuple(t for t in cfg.toggles if t != "ga"))
    if component == "GA":
        return dataclasses.replace(cfg, align_groups=("global",))
    if component == "CLM":
        return dataclasses.replace(cfg, head="mlp")
    raise ValueError(f"unknown ablation component {component!r}")


def ablation_suite(train_scenes: Sequence[VectorScene], eval_scenes: Sequence[VectorScene], cfg: TrainConfig,
                   rows: Sequence[str] | None = None, progress=None) -> list[dict]:
    """Retrain with one component disabled per row and evaluate every row on ``eval_scenes``."""
    vocab = build_vocab(train_scenes)
    out = []
    for rid, name, comp, flags in ABLATION_ROWS:
        if rows is not None and name not in rows:
            continue
        manifest = train(train_scenes, ablation_config(cfg, comp), vocab=vocab)
        manifest.disabled = [] if comp is None else [comp]
        report, _ = evaluate_model(manifest.model, eval_scenes)
        manifest.final_metrics = report.to_dict()
        out.append({"id": rid, "name": name, "flags": flags, "disabled": manifest.disabled,
                    "metrics": report.metrics.to_dict(), "manifest": manifest.to_dict()})
        if progress is not None:
            progress(name, report.metrics)
    return out


def split_by_tag(scenes: Sequence[VectorScene], tag: str, holdout: float) -> tuple[list, list]:
    chosen = [s for s in scenes if s.split_tag == tag]
    if not chosen:
        raise ValueError(f"dataset has no scenes tagged {tag!r}")
    cut = len(chosen) - max(1, int(round(holdout * len(chosen))))
    return chosen[:cut], chosen[cut:]


def distribution_shift_eval(scenes: Sequence[VectorScene], train_tag: str, test_tag: str, cfg: TrainConfig,
                            holdout: float = 0.25) -> dict:
    """Train on ``train_tag``; report held-out metrics on the training tag and on ``test_tag``."""
    train_set, in_eval = split_by_tag(scenes, train_tag, holdout)
    _, shift_eval = split_by_tag(scenes, test_tag, holdout)
    manifest = train(train_set, cfg)
    in_report, _ = evaluate_model(manifest.model, in_eval)
    shift_report = in_report if test_tag == train_tag else evaluate_model(manifest.model, shift_eval)[0]
    manifest.tags = {"train": train_tag, "test": test_tag}
    manifest.final_metrics = {"in_distribution": in_report.to_dict(), "shifted": shift_report.to_dict()}
    return {"train_tag": train_tag, "test_tag": test_tag,
            "in_distribution": in_report.metrics.to_dict(), "shifted": shift_report.metrics.to_dict(),
            "manifest": manifest.to_dict(), "model": manifest.model}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
CHECKPOINT_FILE = "model.ckpt.json"
VOCAB_FILE = "vocab.txt"
CONFIG_FILE = "train_config.json"


def save_model(model: GPVLModel, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out / CHECKPOINT_FILE, model.named_parameters())
    model.vocab.save(out / VOCAB_FILE)
    write_json(out / CONFIG_FILE, model.cfg.to_dict())
    return {"params": CHECKPOINT_FILE, "vocab": VOCAB_FILE, "config": CONFIG_FILE}


def load_model(ckpt_dir) -> GPVLModel:
    d = Path(ckpt_dir)
    for name in (CHECKPOINT_FILE, VOCAB_FILE, CONFIG_FILE):
        if not (d / name).is_file():
            raise FileNotFoundError(f"checkpoint directory {d} lacks {name}")
    cfg = TrainConfig.from_dict(json.loads((d / CONFIG_FILE).read_text()))
    model = GPVLModel(Vocabulary.load(d / VOCAB_FILE), cfg)
    nn.load_checkpoint(d / CHECKPOINT_FILE, model.named_parameters())
    return model


def write_curves_csv(manifest: RunManifest, path) -> None:
    lines = ["stage,epoch,term,value"]
    for stage in STAGES:
        for term, vals in manifest.curves.get(stage, {}).items():
            lines.extend(f"{stage},{i},{term},{v!r}" for i, v in enumerate(vals))
    atomic_write_text(path, "\n".join(lines) + "\n")
