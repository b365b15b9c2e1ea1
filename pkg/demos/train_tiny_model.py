"""
Train the recurrent flow network on one synthetic scene
=======================================================

A 16x16 toy: constant motion, three bins, a few dozen optimizer steps.
The loss is the L1 distance between the LAST predicted flow and ground
truth; earlier steps in the recurrence get no direct supervision.
"""

import numpy as np

from evflow import (
    ModelConfig,
    MotionModel,
    SensorGeometry,
    build_unified_voxel_grid,
    checkerboard_corners,
    epe,
    generate_events,
    ground_truth_flow,
    model_forward,
    train_toy,
    uvg_spec_for_window,
)

geo = SensorGeometry(16, 16)
motion = MotionModel.constant(30.0, 0.0)
pattern = checkerboard_corners(geo, pitch=5)
window = generate_events(pattern, motion, duration=0.06, rate=3.0, seed=0)
spec = uvg_spec_for_window(window, B=3)
grid = build_unified_voxel_grid(window, spec)
gt = ground_truth_flow(motion, spec.t0, spec.t0 + 2 * spec.tau, geo)

config = ModelConfig(bins=3, width=16, height=16)
result = train_toy([(grid, gt)], config, seed=0, iters=120)

# a crude text sparkline of the loss curve
curve = np.array(result.loss_curve)
blocks = " .:-=+*#"
lo, hi = curve.min(), curve.max()
idx = ((curve - lo) / (hi - lo + 1e-12) * (len(blocks) - 1)).astype(int)
print("loss:", "".join(blocks[i] for i in idx[::4]))
print(f"first {curve[0]:.3f} -> last {curve[-1]:.3f}")

seq, _ = model_forward(grid, result.params)
print(f"final-flow EPE vs ground truth: {epe(seq.final, gt):.3f} px")
print(f"true displacement was {30.0 * 2 * spec.tau:.2f} px")
