"""Neural density/color fields from LiDAR scans and camera images.

Subpackages cover reverse-mode autodiff over numpy arrays, rigid-body
geometry, positionally encoded MLP fields, differentiable volume
rendering, the training loops (density from scans, pose tracking, color
plus LiDAR-to-camera extrinsic), a synthetic world simulator for ground
truth, and the on-disk dataset/checkpoint formats behind the CLI.
"""

__version__ = "0.1.0"
