"""Sampling a phantom, building the dictionary predictor and reading its confidence.

Run: python3 demos/02_dictionary_predictor.py   (about 20 s)
"""

import math

import numpy as np

from canonslice.liegroup import geodesic_distance
from canonslice.phantoms import make_phantom
from canonslice.predictor import build_dictionary, mc_aggregate
from canonslice.sampler import SamplingConfig, fibonacci_normals, nearest_neighbor_angles, random_validation_transforms, uniform_polar_normals
from canonslice.volume import SliceImage, extract_slice

# Fibonacci normals cover the sphere more evenly than a polar grid.
fib = np.degrees(nearest_neighbor_angles(fibonacci_normals(300)))
pol = np.degrees(nearest_neighbor_angles(uniform_polar_normals(20, 15)))
print(f"nearest-neighbour spacing: fibonacci {fib.mean():.2f}±{fib.std():.2f} deg, polar {pol.mean():.2f}±{pol.std():.2f} deg")

atlas = make_phantom("blobs", 64, 1.0, seed=0)
cfg = SamplingConfig(scheme="euler", angle_step=math.radians(18), tz_min=-20, tz_max=20, tz_step=4)
model = build_dictionary(atlas, cfg)
print(f"dictionary: {len(model)} content-bearing slices")

for t in random_validation_transforms(5, (-20, 20), seed=3):
    img = extract_slice(atlas, t, 64)
    ps = mc_aggregate(model, img, n=100, threshold=10.0, seed=0)
    print(f"content {img.content_fraction():.2f}  error {geodesic_distance(t, ps.mean):7.3f}  "
          f"variance {ps.variance:8.3f}  {ps.status}")

# Corrupted input: noise gives an unreliable prediction, a blank slice cannot be scored at all.
rng = np.random.default_rng(1)
noise = mc_aggregate(model, SliceImage(rng.uniform(0, 255, (64, 64))), 100, 10.0)
blank = mc_aggregate(model, SliceImage(np.zeros((64, 64))), 100, 10.0)
print(f"noise slice: variance {noise.variance:.2f} ({noise.status}); blank slice: {blank.status}")
