"""
Feature noise and inference latency
===================================

Degrade the perception features at increasing severity and watch the
planning metrics, then time per-scene inference.
"""

from gpvl import pipeline as pp
from gpvl.evaluation import CORRUPTIONS
from gpvl.scene import generate_dataset

# a desk-scale model does not generalise across scenes, so noise is applied
# to the features of scenes it has fitted; the clean row is the reference
scenes = generate_dataset(32, seed=4)
model = pp.train(scenes, pp.TrainConfig.desk()).model
test = scenes[:16]

for kind in CORRUPTIONS:
    for severity in (0.0, 0.1, 0.3):
        report, _ = pp.evaluate_model(model, test, corrupt=(kind, severity, 0))
        m = report.metrics
        print(f"{kind:10s} {severity:.1f} l2_avg={m.l2_avg:.3f} col_avg={m.col_avg:.2f} invalid={m.invalid_rate:.1f}")

for row in pp.bench(model, test[:4], repetitions=10):
    print(f"{row['config']:20s} {row['latency_ms']:.1f} ms  {row['fps']:.2f} fps")
