"""Per-ray conditioning features, precomputed once per dataset.

Every network input except the ray encoding is constant during training:
image features sampled along the projected 2D ray, the global skeleton
embedding, and local joint-frame coordinates of the ray's closest
approach to the skeleton.  This module batches all of that into one
array bundle so the training loop only slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand import (
    HandSkeleton,
    geodesic_knn_batch,
    global_hand_embedding_batch,
    local_intersection_feature_batch,
    ray_skeleton_closest_batch,
)
from .projection import (
    DEFAULT_SPACING,
    CameraPose,
    FeaturePyramid,
    collect_bundle_feature_inputs,
)
from .rays import RayBundle

__all__ = ["FeatureBundle", "FeatureExtractor"]


@dataclass
class FeatureBundle:
    """Constant network inputs for a set of rays.

    line_feats rows with line_valid False (degenerate projections) are
    zero-filled and must be gated out by the attention aggregation.
    """

    origins: np.ndarray          # (N, 3)
    directions: np.ndarray       # (N, 3)
    pixel_feats: np.ndarray      # (N, C)
    line_feats: np.ndarray       # (N, K_l, C)
    line_valid: np.ndarray       # (N,) bool
    skeleton_feats: np.ndarray   # (N, 126)
    contact_feats: np.ndarray    # (N, 3 * K_3D)

    def __post_init__(self):
        n = self.origins.shape[0]
        shapes_ok = (
            self.directions.shape == (n, 3)
            and self.pixel_feats.shape[0] == n
            and self.line_feats.shape[0] == n
            and self.line_feats.shape[2] == self.pixel_feats.shape[1]
            and self.line_valid.shape == (n,)
            and self.skeleton_feats.shape[0] == n
            and self.contact_feats.shape[0] == n
        )
        if not shapes_ok:
            raise ValueError("feature arrays disagree on ray count or width")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def take(self, idx) -> "FeatureBundle":
        return FeatureBundle(
            self.origins[idx], self.directions[idx],
            self.pixel_feats[idx], self.line_feats[idx],
            self.line_valid[idx], self.skeleton_feats[idx],
            self.contact_feats[idx],
        )


class FeatureExtractor:
    """Turns ray bundles into FeatureBundles against one fixed scene
    conditioning: a feature pyramid + camera for the 2D path and a posed
    skeleton for the 3D path."""

    def __init__(
        self,
        pyramid: FeaturePyramid,
        camera: CameraPose,
        skeleton: HandSkeleton,
        line_samples: int = 8,
        line_spacing: float = DEFAULT_SPACING,
        local_neighbors: int = 8,
    ):
        if line_samples < 1:
            raise ValueError("line_samples must be positive")
        if local_neighbors < 1:
            raise ValueError("local_neighbors must be positive")
        self.pyramid = pyramid
        self.camera = camera
        self.skeleton = skeleton
        self.line_samples = line_samples
        self.line_spacing = line_spacing
        self.local_neighbors = local_neighbors

    @property
    def image_channels(self) -> int:
        return self.pyramid.total_channels

    def extract(self, rays: RayBundle) -> FeatureBundle:
        pixel_feats, line_feats, degenerate = collect_bundle_feature_inputs(
            self.pyramid, self.camera, rays,
            k_l=self.line_samples, spacing=self.line_spacing,
        )
        skeleton_feats = global_hand_embedding_batch(rays, self.skeleton)
        approach, on_bone, bone, _ = ray_skeleton_closest_batch(rays, self.skeleton)
        neighbor_ids = geodesic_knn_batch(
            self.skeleton, on_bone, bone, k=self.local_neighbors
        )
        contact_feats = local_intersection_feature_batch(
            approach, self.skeleton, neighbor_ids
        )
        return FeatureBundle(
            origins=rays.origins.copy(),
            directions=rays.directions.copy(),
            pixel_feats=pixel_feats,
            line_feats=line_feats,
            line_valid=~degenerate,
            skeleton_feats=skeleton_feats,
            contact_feats=contact_feats,
        )
