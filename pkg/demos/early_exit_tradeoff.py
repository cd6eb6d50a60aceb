"""
Trading depth for accuracy with early exits
===========================================

A trained student carries classifier heads after several blocks. After
calibrating those heads and storing a prototype of the summary-worthy class,
each sample stops at the first head whose prediction is similar enough to
the prototype. Sweeping the threshold shows the cost/quality curve.
"""

import numpy as np

from exitdistill import data as dd
from exitdistill.distill import DistillPlan, train_teacher
from exitdistill.earlyexit import RoutingPolicy, bench, route, select_tau, sweep_tau
from exitdistill.model import ModelConfig, calibrate_exit_heads, finalize_prototype

ds = dd.generate(dd.PlantedSpec(), dd.DatasetHeader(annotators=10), 30, 40)
train, val, test = dd.split(ds, (0.6, 0.2, 0.2))

cfg = ModelConfig(ds.header.input_dim, 8, 4, (1, 2, 3, 4), 5, seed=0)
model, _ = train_teacher(DistillPlan(cfg, epochs=10, mode="teacher_only"), train)

# %%
# The backbone is frozen from here on; only the intermediate heads move.
calibrate_exit_heads(model, train.inputs(), train.labels(), epochs=10)
finalize_prototype(model, train.inputs(), train.labels())
print("prototype:", np.round(model.prototype, 3))

# %%
# One sample, three thresholds. tau=0 always leaves at the first head,
# tau=1 always runs the whole stack.
x = test.inputs()[0]
for tau in (0.0, 0.9, 1.0):
    tr = route(model, x, RoutingPolicy(tau))
    print(f"tau={tau:<4} exit {tr.exit_index}  blocks {tr.blocks_traversed}  "
          f"confidences {np.round(tr.confidences, 3)}")

# %%
# Sweep on validation, keep the cheapest threshold within 3 F1 points.
taus = np.round(np.arange(0.5, 1.0001, 0.05), 2).tolist()
sweep = sweep_tau(model, val, taus)
for s in sweep:
    print(f"tau={s.tau:.2f}  F1 {100 * s.f1_routed:6.2f}  blocks {s.mean_blocks:.2f}  "
          f"saving {100 * s.relative_saving:4.1f}%")
choice = select_tau(sweep, max_f1_drop=3.0)

# %%
# Then measure on the test split.
full = bench(model, test, RoutingPolicy(1.0))
early = bench(model, test, RoutingPolicy(choice.tau))
print(f"no exit : F1 {100 * full.f1_routed:.2f}, {full.mean_blocks:.2f} blocks")
print(f"tau={choice.tau:g}: F1 {100 * early.f1_routed:.2f}, {early.mean_blocks:.2f} blocks, "
      f"saving {100 * early.relative_saving:.1f}%")
