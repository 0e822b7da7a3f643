"""Directed distance field toolkit for small-object reconstruction.

Modules:
  geometry   triangle meshes, BVH + brute-force first-hit ray casting
  rays       seeded ray sampling, symmetry pairs, ground-truth fields
  projection camera model, ray-to-image features, multi-level sampling
  hand       articulated 21-joint skeleton features
  autodiff   minimal reverse-mode tensor engine
  network    positional encoding, cross-attention, conditional field MLP
  training   losses, Adam, fitting loop, finite-difference gradient check
  features   end-to-end per-ray feature assembly
  recon      field -> point cloud / mesh, chamfer and F-score metrics
  formats    binary ray/checkpoint/pyramid formats, PLY/OBJ, run config
  cli        generate / fit / evaluate / convert commands
"""

__version__ = "0.1.0"
