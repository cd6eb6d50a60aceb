"""
Scoring a summary against annotators
====================================

Segments have integer durations. A summary is the set of segments with the
largest total predicted importance that fits in 15% of the video; it is
compared with each annotator's own best summary by frame overlap.
"""

import numpy as np

from exitdistill.evaluation import f1_against_reference, f1_multi_reference, select_summary

rng = np.random.default_rng(3)
durations = rng.integers(1, 8, size=20)
predicted = rng.random(20)

summary = select_summary(predicted, durations, 0.15)
print("durations:", durations.tolist())
print("selected :", summary.selected, f"({summary.selected_duration}/{summary.total_duration} frames)")

# %%
# Three annotators who roughly agree with the model, plus noise.
refs = [select_summary(predicted + rng.normal(0, 0.3, 20), durations, 0.15) for _ in range(3)]
for k, ref in enumerate(refs):
    r = f1_against_reference(summary, ref, durations)
    print(f"annotator {k}: P={r.precision:.3f} R={r.recall:.3f} F1={r.f1:.3f}")

# %%
# Benchmarks differ on how to fold several references into one number.
for mode in ("mean", "max"):
    print(mode, round(f1_multi_reference(summary, refs, durations, mode).f1, 4))
