"""Pose labels and SE(3) statistics on a handful of slice poses.

Run: python3 demos/01_pose_labels.py
"""

import math

import numpy as np

from canonslice.liegroup import frechet_mean, geodesic_distance, se3_exp
from canonslice.se3core import RigidTransform, anchor_points_from_transform, compose, rotation_from_euler, transform_from_anchor_points

# A slice pose: rotate the sampling plane, then push it 12 mm along its normal.
r = rotation_from_euler(math.radians(20), math.radians(-35), math.radians(60))
pose = RigidTransform(r, 12.0 * r[:, 2])
print("pose matrix:\n", np.round(pose.matrix(), 4))

# The three label encodings all describe the same pose.
print("euler label:     ", pose.to_euler())
print("quaternion label:", pose.to_quaternion())
anchors = anchor_points_from_transform(pose, 64.0)
print("anchor points:   ", np.round(anchors.as_array(), 3).tolist())
back = transform_from_anchor_points(anchors)
print(f"recovered from anchors, geodesic error {geodesic_distance(pose, back):.1e}")

# Monte-Carlo style predictions scatter around the pose; their Frechet mean
# recovers it and the variance measures the spread.
rng = np.random.default_rng(0)
samples = [compose(pose, se3_exp(rng.normal(0, 0.03, 6))) for _ in range(100)]
stats = frechet_mean(samples)
print(f"Frechet mean after {stats.iterations} iterations: error {geodesic_distance(stats.mean, pose):.4f}, "
      f"variance {stats.variance:.5f}")
