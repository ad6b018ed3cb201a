"""Synthetic canal phantoms and baseline threshold segmentation.

Renders a phantom with two mirror-symmetric arc tubes under a known rigid
skew, adds noise, then recovers the canal mask with an intensity band and
compares it against the analytic ground truth.
"""

import numpy as np

from tbcalib import (PhantomSpec, RigidPose, dsc_metric, generate_phantom,
                     rotation_from_euler_deg, threshold_segment)

skew = RigidPose(rotation_from_euler_deg(8.0, -5.0, 12.0),
                 np.array([1.5, -2.0, 1.0]))
spec = PhantomSpec(noise_amplitude=150.0, skew=skew, seed=3)
vol, mask, pose = generate_phantom(spec)

print(f"phantom dims {vol.dims} at {tuple(float(s) for s in vol.spacing)} mm")
print(f"analytic mask: {mask.foreground_count()} canal voxels")
print(f"intensity range: [{vol.voxels.min():.0f}, {vol.voxels.max():.0f}] "
      f"(canal {spec.canal_intensity:.0f}, shell {spec.shell_intensity:.0f}, "
      f"noise +/-{spec.noise_amplitude:.0f})")

# the canal band sits between the noisy background and the bone shell
seg = threshold_segment(vol, (300.0, 900.0))
print(f"\nthreshold band [300, 900] -> {seg.foreground_count()} voxels")
print(f"DSC vs ground truth: {dsc_metric(seg, mask):.4f}")

# the mask itself is unaffected by noise: same seed, no noise
_, clean_mask, _ = generate_phantom(PhantomSpec(skew=skew, seed=3))
print("mask independent of noise:", np.array_equal(mask.voxels, clean_mask.voxels))
