"""
Training and evaluating a small planner
=======================================

Run the three training stages on a small corpus, decode plans for held-out
scenes and score them. Takes a couple of minutes on one CPU core.
"""

from pathlib import Path

from gpvl import pipeline as pp
from gpvl.evaluation import collision_check
from gpvl.plots import bev_svg
from gpvl.scene import generate_dataset

scenes = generate_dataset(80, seed=2)
train, held_out = scenes[:64], scenes[64:]

cfg = pp.TrainConfig.desk(epochs_stage3=20)
manifest = pp.train(train, cfg, progress=lambda stage, epoch, v: print(stage, epoch, v))
print("stages run", manifest.stages_run)

report, plans = pp.evaluate_model(manifest.model, held_out)
for k, v in report.metrics.to_dict().items():
    if v is None:           # timing fields are filled by the bench harness only
        continue
    print(f"{k:12s} {v}")
for command, m in report.by_command.items():
    print(command, m.n_scenes, m.l2_avg)

# bird's-eye overlay of the first held-out plan
out = Path("demo_output")
out.mkdir(exist_ok=True)
rec, scene = plans[0], held_out[0]
if rec["valid"]:
    flags = collision_check(rec["waypoints"], scene).collisions
    (out / f"bev_{scene.scene_id}.svg").write_text(bev_svg(scene, rec["waypoints"], flags))
