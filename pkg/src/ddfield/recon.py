"""Field-to-geometry conversion and point-cloud comparison metrics.

A directed-distance field, queried along enough rays, becomes a point
cloud (one point per visible ray at its predicted depth) or a mesh (the
level set of the min-over-directions distance on a grid).  Clouds carry
an explicit millimetre scale so Chamfer distance and F-score are always
reported in physical units regardless of the working frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .features import FeatureExtractor
from .geometry import (
    Bvh,
    TriangleMesh,
    analytic_sphere_ddf_batch,
    build_bvh,
)
from .network import DdfNetwork
from .rays import BoundingVolume, RayBundle, unit_cube, _sample_surface_points
from .seeding import Stream, rng
from .training import predict

__all__ = [
    "FieldEvaluator",
    "MeshFieldEvaluator",
    "MetricsReport",
    "NetworkFieldEvaluator",
    "PointCloud",
    "SphereFieldEvaluator",
    "chamfer_distance",
    "compute_metrics",
    "ddf_to_mesh",
    "ddf_to_pointcloud",
    "f_score",
    "fibonacci_directions",
    "sample_mesh_surface",
]

DEFAULT_ISO_FRACTION = 0.005    # of the box diagonal
MM_CONVENTION = "mean-squared-sum"


@dataclass
class PointCloud:
    """3D points plus the millimetres-per-unit factor of their frame."""

    points: np.ndarray          # (N, 3)
    scale_mm: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.scale_mm <= 0:
            raise ValueError("scale factor must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def points_mm(self) -> np.ndarray:
        return self.points * self.scale_mm


class FieldEvaluator:
    """Queryable directed-distance field: rays in, (visibility, depth) out.

    Subclasses return a visibility score per ray (hard 0/1 for exact
    fields, a probability for learned ones) and a depth that is finite
    and non-negative wherever the ray is reported visible.
    """

    def evaluate(self, rays: RayBundle) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class MeshFieldEvaluator(FieldEvaluator):
    """Exact field of a triangle mesh via BVH casting."""

    def __init__(self, mesh: TriangleMesh, bvh: Bvh | None = None):
        self.mesh = mesh
        self.bvh = bvh if bvh is not None else build_bvh(mesh)

    def evaluate(self, rays: RayBundle) -> tuple[np.ndarray, np.ndarray]:
        from .geometry import cast_rays_batch

        xi, t, _ = cast_rays_batch(self.bvh, rays.origins, rays.directions)
        return xi.astype(np.float64), t


class SphereFieldEvaluator(FieldEvaluator):
    """Closed-form field of a sphere; the conversion oracle."""

    def __init__(self, center: np.ndarray, radius: float):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = radius

    def evaluate(self, rays: RayBundle) -> tuple[np.ndarray, np.ndarray]:
        xi, depth = analytic_sphere_ddf_batch(
            self.center, self.radius, rays.origins, rays.directions
        )
        return xi.astype(np.float64), depth


class NetworkFieldEvaluator(FieldEvaluator):
    """Learned field: feature extraction plus a trained network."""

    def __init__(
        self, net: DdfNetwork, extractor: FeatureExtractor, batch: int = 4096
    ):
        self.net = net
        self.extractor = extractor
        self.batch = batch

    def evaluate(self, rays: RayBundle) -> tuple[np.ndarray, np.ndarray]:
        feats = self.extractor.extract(rays)
        return predict(self.net, feats, batch=self.batch)


# ---------------------------------------------------------------------------
# conversions


def ddf_to_pointcloud(
    field: FieldEvaluator,
    rays: RayBundle,
    vis_threshold: float = 0.5,
    scale_mm: float = 1.0,
) -> PointCloud:
    """One point per visible ray, at origin + depth * direction.

    Invisible rays emit nothing; the emitted order follows the ray order.
    """
    if not 0.0 < vis_threshold < 1.0:
        raise ValueError("vis_threshold must lie strictly between 0 and 1")
    vis, depth = field.evaluate(rays)
    mask = vis > vis_threshold
    d = depth[mask]
    if not (np.isfinite(d).all() and (d >= 0).all()):
        raise ValueError("field reported a visible ray without a usable depth")
    points = rays.origins[mask] + d[:, None] * rays.directions[mask]
    return PointCloud(points, scale_mm=scale_mm)


def fibonacci_directions(n: int) -> np.ndarray:
    """n unit directions on the golden-angle spiral: deterministic and
    close to evenly spread for any n."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    theta = golden * i
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def ddf_to_mesh(
    field: FieldEvaluator,
    grid_resolution: int = 48,
    directions_per_point: int = 32,
    iso: float | None = None,
    bounds: BoundingVolume | None = None,
    vis_threshold: float = 0.5,
) -> TriangleMesh:
    """Level-set surface of u(x) = min over directions of visible depth.

    The field is unsigned, so the surface is the small positive iso level
    (default 0.5% of the box diagonal) rather than a zero crossing.  Grid
    points where no direction reports a hit carry a large finite cap.  An
    iso outside the field's range yields a mesh with zero faces.
    """
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be at least 8")
    if directions_per_point < 6:
        raise ValueError("need at least 6 directions per grid point")
    if bounds is None:
        bounds = unit_cube()
    diagonal = float(np.linalg.norm(bounds.max - bounds.min))
    if iso is None:
        iso = DEFAULT_ISO_FRACTION * diagonal
    if iso <= 0:
        raise ValueError("iso level must be positive")

    axes = [
        np.linspace(bounds.min[k], bounds.max[k], grid_resolution)
        for k in range(3)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    u = np.full(len(grid), np.inf)
    any_hit = False
    for direction in fibonacci_directions(directions_per_point):
        dirs = np.broadcast_to(direction, grid.shape)
        vis, depth = field.evaluate(RayBundle(grid.copy(), dirs.copy()))
        hit = vis > vis_threshold
        if hit.any():
            any_hit = True
            u[hit] = np.minimum(u[hit], depth[hit])
    if not any_hit:
        raise ValueError("empty field")

    cap = 2.0 * diagonal
    volume = np.minimum(u, cap).reshape((grid_resolution,) * 3)
    if not volume.min() < iso < volume.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    step = [(bounds.max[k] - bounds.min[k]) / (grid_resolution - 1) for k in range(3)]
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=iso, spacing=tuple(step)
    )
    return TriangleMesh(verts + bounds.min, faces.astype(np.int64))


def sample_mesh_surface(
    mesh: TriangleMesh, n: int, seed: int, scale_mm: float = 1.0
) -> PointCloud:
    """Area-weighted random surface points; the reference cloud builder."""
    if n < 1:
        raise ValueError("need at least one point")
    g = rng(seed, Stream.POINT_SAMPLING)
    return PointCloud(_sample_surface_points(mesh, n, g), scale_mm=scale_mm)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    """Cloud-to-cloud scores: F at 5mm / 10mm and Chamfer in mm^2."""

    f5: float
    f10: float
    cd: float
    points_pred: int
    points_gt: int

    def __post_init__(self):
        values = (self.f5, self.f10, self.cd)
        if not all(np.isfinite(v) for v in values):
            raise ValueError("metric values must be finite")
        if not (0.0 <= self.f5 <= 1.0 and 0.0 <= self.f10 <= 1.0):
            raise ValueError("f-scores must lie in [0, 1]")
        if self.cd < 0:
            raise ValueError("chamfer distance must be non-negative")

    def as_dict(self) -> dict:
        return {
            "f5": self.f5,
            "f10": self.f10,
            "cd": self.cd,
            "convention": MM_CONVENTION,
            "units": "mm2",
            "points_pred": self.points_pred,
            "points_gt": self.points_gt,
        }


def _paired_mm(a: PointCloud, b: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point clouds must be non-empty")
    if a.scale_mm != b.scale_mm:
        raise ValueError("point clouds disagree on scale")
    return a.points_mm(), b.points_mm()


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Symmetric sum of mean squared nearest-neighbor distances, mm^2."""
    pa, pb = _paired_mm(a, b)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def f_score(pred: PointCloud, gt: PointCloud, tau_mm: float) -> float:
    """Harmonic mean of precision/recall at distance threshold tau (mm)."""
    if tau_mm <= 0:
        raise ValueError("tau must be positive")
    pp, pg = _paired_mm(pred, gt)
    precision = float((cKDTree(pg).query(pp)[0] <= tau_mm).mean())
    recall = float((cKDTree(pp).query(pg)[0] <= tau_mm).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(pred: PointCloud, gt: PointCloud) -> MetricsReport:
    return MetricsReport(
        f5=f_score(pred, gt, 5.0),
        f10=f_score(pred, gt, 10.0),
        cd=chamfer_distance(pred, gt),
        points_pred=len(pred),
        points_gt=len(gt),
    )
