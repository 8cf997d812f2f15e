"""Command-line entry point: ``python -m gpvl <subcommand>``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import pipeline as pp
from .evaluation import (CORRUPTIONS, EvalConfig, collision_check, evaluate, metrics_csv)
from .io import atomic_write_text, write_json
from .plots import bev_svg, metrics_bar_svg
from .scene import COMMANDS, SceneGenConfig, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("gpvl")


class UsageError(Exception):
    """Bad flags, config or input paths (exit code 2)."""


def _read_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {p} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} {p} must contain a JSON object")
    return data


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(base: dict, overrides: list[str]) -> dict:
    """``key=value`` or ``section.key=value``; values parsed as JSON when possible."""
    out = json.loads(json.dumps(base))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        target = out
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise UsageError(f"override {key!r} does not name a config section")
        target[parts[-1]] = _parse_value(raw)
    return out


def _load_scenes(path: str) -> list:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    return load_dataset(p)


def _train_config(args) -> pp.TrainConfig:
    base = (pp.TrainConfig() if args.preset == "full" else pp.TrainConfig.desk()).to_dict()
    base = _deep_merge(base, _read_json(args.config, "config file"))
    cli = {}
    if getattr(args, "toggles", None) is not None:
        cli["toggles"] = [t for t in args.toggles.split(",") if t]
    if getattr(args, "stages", None) is not None:
        cli["stages"] = [s for s in args.stages.split(",") if s]
    if getattr(args, "seed", None) is not None:
        cli["seed"] = args.seed
    merged = _apply_overrides(_deep_merge(base, cli), args.set)
    try:
        return pp.TrainConfig.from_dict(merged)
    except pp.ConfigError as e:
        raise UsageError(str(e)) from None


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_model(path: str):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"checkpoint directory not found: {p}")
    try:
        return pp.load_model(p)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def _parse_corrupt(spec: str | None, seed: int):
    if spec is None:
        return None
    kind, _, sev = spec.partition(":")
    if kind not in CORRUPTIONS or not sev:
        raise UsageError(f"--corrupt must be kind:severity with kind in {CORRUPTIONS}, got {spec!r}")
    try:
        severity = float(sev)
    except ValueError:
        raise UsageError(f"bad corruption severity {sev!r}") from None
    if not 0.0 <= severity <= 1.0:
        raise UsageError(f"corruption severity must lie in [0, 1], got {severity}")
    return kind, severity, seed


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_make_data(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    base = SceneGenConfig.preset(args.split_tag).to_dict() if args.split_tag in ("city_a", "city_b") \
        else SceneGenConfig().to_dict()
    cfg_dict = _apply_overrides(_deep_merge(base, _read_json(args.config, "config file")), args.set)
    if args.split_tag is not None:
        cfg_dict["split_tag"] = args.split_tag
    try:
        cfg = SceneGenConfig.from_dict(cfg_dict)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid scene config: {e}") from None
    scenes = generate_dataset(args.n, seed=args.seed, config=cfg)
    save_dataset(scenes, args.out)
    mix = Counter(s.ego.command.value for s in scenes)
    summary = ", ".join(f"{c.value}={mix.get(c.value, 0)}" for c in COMMANDS)
    print(f"wrote {len(scenes)} scenes to {args.out} ({summary})")
    return 0


def cmd_train(args) -> int:
    scenes = _load_scenes(args.data)
    cfg = _train_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(stage, epoch, vals):
        log.info("%s epoch %d %s", stage, epoch, " ".join(f"{k}={v:.5f}" for k, v in vals.items()))

    try:
        manifest = pp.train(scenes, cfg, progress=progress)
    except pp.TrainingError as e:
        if "no loss terms enabled" in str(e):
            raise UsageError(str(e)) from None
        raise
    paths = pp.save_model(manifest.model, out / "checkpoint")
    manifest.checkpoints = {k: f"checkpoint/{v}" for k, v in paths.items()}
    pp.write_curves_csv(manifest, out / "loss_curves.csv")
    manifest.save(out / "manifest.json")
    print(f"trained stages {','.join(manifest.stages_run) or '-'}; manifest at {out / 'manifest.json'}")
    return 0


def cmd_eval(args) -> int:
    scenes = _load_scenes(args.data)
    model = _load_model(args.checkpoints)
    corrupt = _parse_corrupt(args.corrupt, args.corrupt_seed)
    plans = pp.infer_batch(scenes, model, mask_ego=args.mask_ego, corrupt=corrupt)
    report = evaluate(plans, scenes, EvalConfig(cumulative=not args.per_timestamp))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["ego_status_masked"] = bool(args.mask_ego)
    doc["corruption"] = None if corrupt is None else {
        "kind": corrupt[0], "severity": corrupt[1], "seed": corrupt[2], "level": "feature"}
    doc["collision_convention"] = "per_timestamp" if args.per_timestamp else "cumulative"
    write_json(out / "metrics.json", doc)
    atomic_write_text(out / "metrics.csv", metrics_csv(report))
    atomic_write_text(out / "plans.jsonl", _jsonl(plans))
    m = report.metrics
    print(f"l2_avg={m.l2_avg:.4f} col_avg={m.col_avg:.3f} invalid_rate={m.invalid_rate:.2f} n={m.n_scenes}")
    return 0


def cmd_infer(args) -> int:
    scenes = _load_scenes(args.data)
    if args.scene_id:
        wanted = set(args.scene_id)
        scenes = [s for s in scenes if s.scene_id in wanted]
        missing = wanted - {s.scene_id for s in scenes}
        if missing:
            raise UsageError(f"scene id not in dataset: {sorted(missing)[0]}")
    model = _load_model(args.checkpoints)
    records = [pp.infer(s, model, mask_ego=args.mask_ego, timed=True) for s in scenes]
    text = _jsonl(records)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    scenes = _load_scenes(args.data)
    cfg = _train_config(args)
    cut = len(scenes) - max(1, int(round(args.holdout * len(scenes))))
    if cut < 1:
        raise UsageError("dataset too small for a train/held-out split")
    rows = pp.ablation_suite(scenes[:cut], scenes[cut:], cfg,
                             progress=lambda name, m: log.info("%s l2_avg=%.4f", name, m.l2_avg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "ablation.json", {"rows": rows, "train_scenes": cut, "eval_scenes": len(scenes) - cut})
    cols = ["id", "Perc", "Cap", "VLP", "GA", "CLM", "l2_1s", "l2_2s", "l2_3s", "l2_avg",
            "col_1s", "col_2s", "col_3s", "col_avg", "invalid_rate"]
    lines = [",".join(cols)]
    for r in rows:
        vals = [str(r["id"])] + ["1" if r["flags"][k] else "0" for k in cols[1:6]]
        vals += ["" if r["metrics"][k] is None else repr(r["metrics"][k]) for k in cols[6:]]
        lines.append(",".join(vals))
    atomic_write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    for r in rows:
        print(f"{r['id']} {r['name']:<14} l2_avg={r['metrics']['l2_avg']}")
    return 0


def cmd_shift_eval(args) -> int:
    scenes = _load_scenes(args.data)
    cfg = _train_config(args)
    tags = {s.split_tag for s in scenes}
    for tag in (args.train_tag, args.test_tag):
        if tag not in tags:
            raise UsageError(f"dataset has no scenes tagged {tag!r}")
    res = pp.distribution_shift_eval(scenes, args.train_tag, args.test_tag, cfg, holdout=args.holdout)
    res.pop("model")
    write_json(args.out, res)
    print(f"in-distribution l2_avg={res['in_distribution']['l2_avg']} shifted l2_avg={res['shifted']['l2_avg']}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = _read_json(args.metrics, "metrics file")
    if "rows" in doc:
        rows = [(r["name"], r["metrics"]) for r in doc["rows"]]
    elif "by_command" in doc:
        rows = [(k, v) for k, v in doc["by_command"].items() if v.get("n_scenes")]
    else:
        rows = []
    atomic_write_text(out / "metrics.svg", metrics_bar_svg(rows))
    written = 1
    if args.plans:
        plans_path = Path(args.plans)
        if not plans_path.is_file():
            raise UsageError(f"plan records not found: {plans_path}")
        plans = [json.loads(line) for line in plans_path.read_text().splitlines() if line.strip()]
        if plans and not args.data:
            raise UsageError("--data is required to draw plan overlays")
        scenes = {s.scene_id: s for s in _load_scenes(args.data)} if plans else {}
        for rec in plans[:args.max_scenes]:
            scene = scenes.get(rec["scene_id"])
            if scene is None:
                raise UsageError(f"plan for unknown scene {rec['scene_id']!r}")
            pred = rec["waypoints"] if rec["valid"] else None
            flags = collision_check(pred, scene).collisions if pred else None
            atomic_write_text(out / f"bev_{scene.scene_id}.svg", bev_svg(scene, pred, flags))
            written += 1
    print(f"wrote {written} figure(s) to {out}")
    return 0


def cmd_bench(args) -> int:
    scenes = _load_scenes(args.data)[:args.n_scenes]
    if not scenes:
        raise UsageError("bench needs at least one scene")
    if args.repetitions < 10:
        raise UsageError("--repetitions must be >= 10")
    model = _load_model(args.checkpoints)
    rows = pp.bench(model, scenes, repetitions=args.repetitions)
    doc = {"rows": rows, "n_scenes": len(scenes)}
    if args.out:
        write_json(args.out, doc)
    for r in rows:
        print(f"{r['config']:<20} latency_ms={r['latency_ms']:.2f} fps={r['fps']:.2f} "
              f"iqr_ms={r['iqr_ms']:.2f} n={r['n']}")
    return 0


# ---------------------------------------------------------------------------
def _add_train_flags(p):
    p.add_argument("--config", help="JSON training config (merged over the preset)")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value; repeatable; wins over the config file")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpvl", description="Generative planning with vision-language alignment.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic scene dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--split-tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="run the staged training")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stages", help=f"comma list from {','.join(pp.STAGES)}")
    p.add_argument("--toggles", help=f"comma list from {','.join(pp.TOGGLES)}")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="plan and score a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corrupt", metavar="KIND:SEVERITY")
    p.add_argument("--corrupt-seed", type=int, default=0)
    p.add_argument("--mask-ego", action="store_true")
    p.add_argument("--per-timestamp", action="store_true", help="collision at the horizon only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="emit plan records")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--scene-id", action="append")
    p.add_argument("--mask-ego", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="component ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=float, default=0.25)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("shift-eval", help="train on one split tag, test on another")
    p.add_argument("--data", required=True)
    p.add_argument("--train-tag", required=True)
    p.add_argument("--test-tag", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=float, default=0.25)
    _add_train_flags(p)
    p.set_defaults(func=cmd_shift_eval)

    p = sub.add_parser("plot", help="SVG figures from metrics and plan records")
    p.add_argument("--metrics", required=True)
    p.add_argument("--plans")
    p.add_argument("--data")
    p.add_argument("--max-scenes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bench", help="latency / FPS harness")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--n-scenes", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level guard maps everything else to exit code 1
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
