"""Ray sampling, symmetry pairs, wrist-frame normalization, ground truth.

Rays live in a bounding box (default [-1, 1]^3 in the wrist frame) with unit
directions on the sphere.  Ground-truth samples pair each ray with a binary
visibility flag and, when visible, the distance to the first mesh hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Bvh, TriangleMesh, build_bvh, cast_rays_batch
from .seeding import Stream, rng

_UNIT_TOL = 1e-9
_PLANE_TOL = 1e-7


@dataclass
class BoundingVolume:
    """Axis-aligned box that must contain every ray origin."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(self.min < self.max):
            raise ValueError("box min must be strictly below max on every axis")

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.min) & (points <= self.max), axis=1)


def unit_cube() -> BoundingVolume:
    return BoundingVolume(min=-np.ones(3), max=np.ones(3))


@dataclass
class Ray:
    """Origin plus unit view direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"direction norm {n} is not 1 within {_UNIT_TOL}")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class RayBundle:
    """Column-packed sequence of rays; the batch form every kernel consumes."""

    origins: np.ndarray      # (N, 3) float64
    directions: np.ndarray   # (N, 3) float64, unit rows

    def __post_init__(self) -> None:
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64)
        self.directions = np.ascontiguousarray(self.directions, dtype=np.float64)
        if (
            self.origins.ndim != 2
            or self.origins.shape[1] != 3
            or self.origins.shape != self.directions.shape
        ):
            raise ValueError("origins and directions must both be (N, 3)")
        norms = np.linalg.norm(self.directions, axis=1)
        bad = np.abs(norms - 1.0) > _UNIT_TOL
        if bad.any():
            raise ValueError(f"{int(bad.sum())} directions are not unit length")

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> Ray:
        return Ray(origin=self.origins[i], direction=self.directions[i])

    def take(self, idx: np.ndarray) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx])


@dataclass
class DdfSample:
    """One supervised ray: visibility xi and distance (None when invisible)."""

    ray: Ray
    xi: int
    depth: float | None

    def __post_init__(self) -> None:
        if self.xi not in (0, 1):
            raise ValueError("xi must be 0 or 1")
        if self.xi == 1:
            if self.depth is None or not np.isfinite(self.depth) or self.depth < 0:
                raise ValueError("visible sample needs a finite depth >= 0")


@dataclass
class SampleSet:
    """Batch of ground-truth samples aligned with a ray bundle.

    depth is NaN exactly where xi == 0; the scalar view (`__getitem__`)
    surfaces those entries as None.
    """

    rays: RayBundle
    xi: np.ndarray       # (N,) int8 in {0, 1}
    depth: np.ndarray    # (N,) float64, NaN where invisible

    def __post_init__(self) -> None:
        self.xi = np.ascontiguousarray(self.xi, dtype=np.int8)
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        n = len(self.rays)
        if self.xi.shape != (n,) or self.depth.shape != (n,):
            raise ValueError("xi and depth must be (N,) aligned with rays")
        if not np.all((self.xi == 0) | (self.xi == 1)):
            raise ValueError("xi entries must be 0 or 1")
        vis = self.xi == 1
        if np.isnan(self.depth[vis]).any() or (self.depth[vis] < 0).any():
            raise ValueError("visible depths must be finite and >= 0")
        if not np.isnan(self.depth[~vis]).all():
            raise ValueError("invisible depths must be NaN")

    def __len__(self) -> int:
        return len(self.rays)

    def __getitem__(self, i: int) -> DdfSample:
        xi = int(self.xi[i])
        return DdfSample(
            ray=self.rays[i],
            xi=xi,
            depth=float(self.depth[i]) if xi else None,
        )

    def take(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(self.rays.take(idx), self.xi[idx], self.depth[idx])


@dataclass
class SymmetryPlane:
    """Reflection plane given by a point on it and a unit normal."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(self.normal))
        if n < 1e-12:
            raise ValueError("plane normal must be nonzero")
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError("plane normal must be unit length")

    def reflect_direction(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return d - 2.0 * (d @ self.normal) * self.normal

    def reflect_directions(self, d: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        return d - 2.0 * (d @ self.normal)[:, None] * self.normal

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return (points - self.point) @ self.normal


@dataclass
class SymmetryPair:
    """Two rays sharing an origin on the plane, directions mirrored."""

    ray_a: Ray
    ray_b: Ray
    plane: SymmetryPlane

    def __post_init__(self) -> None:
        if not np.array_equal(self.ray_a.origin, self.ray_b.origin):
            raise ValueError("paired rays must share their origin exactly")
        off = abs(float(self.plane.signed_distance(self.ray_a.origin)[0]))
        if off > _PLANE_TOL:
            raise ValueError("pair origin must lie on the plane")
        want = self.plane.reflect_direction(self.ray_a.direction)
        if np.abs(want - self.ray_b.direction).max() > 1e-9:
            raise ValueError("ray_b direction must mirror ray_a across the plane")


@dataclass
class PairBundle:
    """Batch of symmetry pairs: shared origins, two direction blocks."""

    origins: np.ndarray       # (M, 3), on the plane
    directions_a: np.ndarray  # (M, 3) unit
    directions_b: np.ndarray  # (M, 3) unit, mirrored
    plane: SymmetryPlane

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> SymmetryPair:
        return SymmetryPair(
            ray_a=Ray(self.origins[i], self.directions_a[i]),
            ray_b=Ray(self.origins[i], self.directions_b[i]),
            plane=self.plane,
        )

    def bundle_a(self) -> RayBundle:
        return RayBundle(self.origins, self.directions_a)

    def bundle_b(self) -> RayBundle:
        return RayBundle(self.origins, self.directions_b)


@dataclass
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _PLANE_TOL:
            raise ValueError(f"rotation is not orthonormal (|R'R - I| = {err:.2e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be proper (det = +1)")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def apply_directions(self, dirs: np.ndarray) -> np.ndarray:
        return np.atleast_2d(dirs) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def sample_rays_uniform(
    bounds: BoundingVolume, n: int, seed: int
) -> RayBundle:
    """n rays with origins uniform in the box, directions uniform on the sphere.

    Origins come from stream RAY_ORIGINS and directions from RAY_DIRECTIONS,
    so the two sequences are independent and individually reproducible.
    Directions are normalized isotropic Gaussians (rejection-free, exactly
    uniform on the sphere).
    """
    if n < 1:
        raise ValueError("need at least one ray")
    g_o = rng(seed, Stream.RAY_ORIGINS)
    g_d = rng(seed, Stream.RAY_DIRECTIONS)
    origins = g_o.uniform(bounds.min, bounds.max, size=(n, 3))
    directions = _unit_directions(g_d, n)
    return RayBundle(origins, directions)


def sample_rays_surface_biased(
    bounds: BoundingVolume,
    mesh: TriangleMesh,
    n: int,
    seed: int,
    surface_fraction: float = 0.5,
    band: float = 0.1,
) -> RayBundle:
    """Uniform sampler with a fraction of origins pulled near the surface.

    The biased origins are area-weighted surface points pushed a uniform
    offset in [-band, band] along a random unit vector, then clamped into
    the box; each lies within `band` of the mesh.  Directions stay uniform.
    """
    if n < 1:
        raise ValueError("need at least one ray")
    if not 0.0 <= surface_fraction <= 1.0:
        raise ValueError("surface_fraction must be in [0, 1]")
    base = sample_rays_uniform(bounds, n, seed)
    n_surf = int(round(n * surface_fraction))
    if n_surf == 0:
        return base
    g = rng(seed, Stream.SURFACE_BIAS)
    points = _sample_surface_points(mesh, n_surf, g)
    offset_dir = _unit_directions(g, n_surf)
    offset_len = g.uniform(-band, band, size=(n_surf, 1))
    moved = np.clip(points + offset_len * offset_dir, bounds.min, bounds.max)
    origins = base.origins.copy()
    origins[:n_surf] = moved
    return RayBundle(origins, base.directions)


def aim_directions_at_ball(
    origins: np.ndarray,
    center: np.ndarray,
    radius: float,
    seed: int,
) -> np.ndarray:
    """Unit directions from each origin toward a point drawn uniformly
    inside the ball (center, radius).

    Every returned ray's line passes within `radius` of the center, so a
    convex object enclosing the ball is hit head-on rather than grazed.
    Targets come from stream SURFACE_BIAS (the object-seeking stream).
    """
    origins = np.asarray(origins, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if origins.ndim != 2 or origins.shape[1] != 3:
        raise ValueError("origins must be (N, 3)")
    if radius <= 0:
        raise ValueError("ball radius must be positive")
    n = origins.shape[0]
    g = rng(seed, Stream.SURFACE_BIAS)
    # cube-root radial law makes the targets uniform in volume
    targets = center + _unit_directions(g, n) * (
        radius * g.uniform(size=(n, 1)) ** (1.0 / 3.0)
    )
    d = targets - origins
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norms[:, 0] < 1e-12):
        raise ValueError("an origin coincides with its target")
    return d / norms


def canonicalize_to_shell(
    rays: RayBundle, center: np.ndarray, radius: float
) -> RayBundle:
    """Slide each origin along its own line to the entry point of the
    sphere (center, radius); rays whose line misses the shell keep their
    origin.

    Directions and lines are untouched, so the underlying field values
    transform by the directed-consistency rule: sliding the origin by s
    against the direction adds s to the distance of every hit.  Pinning
    origins to a fixed shell collapses the 5-D ray family the network
    must cover to the 4-D family it can interpolate.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if radius <= 0:
        raise ValueError("shell radius must be positive")
    o, d = rays.origins, rays.directions
    oc = o - center
    b = np.sum(oc * d, axis=1)
    disc = b * b - np.sum(oc * oc, axis=1) + radius * radius
    # smaller quadratic root = entry point along the full line
    t_entry = -b - np.sqrt(np.maximum(disc, 0.0))
    hit = disc > 0
    origins = np.where(hit[:, None], o + t_entry[:, None] * d, o)
    return RayBundle(origins, d.copy())


def _unit_directions(g: np.random.Generator, n: int) -> np.ndarray:
    d = g.normal(size=(n, 3))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    # a zero Gaussian triple has probability ~0 but a fixed fallback keeps
    # the sampler total
    degenerate = norms[:, 0] < 1e-12
    if degenerate.any():
        d[degenerate] = (0.0, 0.0, 1.0)
        norms[degenerate] = 1.0
    return d / norms


def _sample_surface_points(
    mesh: TriangleMesh, n: int, g: np.random.Generator
) -> np.ndarray:
    v0, v1, v2 = mesh.triangle_corners()
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    total = area.sum()
    if total <= 0:
        raise ValueError("mesh has no positive-area faces")
    faces = g.choice(mesh.num_faces, size=n, p=area / total)
    r1 = np.sqrt(g.uniform(size=(n, 1)))
    r2 = g.uniform(size=(n, 1))
    a, b, c = v0[faces], v1[faces], v2[faces]
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def make_symmetry_pairs(
    plane: SymmetryPlane,
    n: int,
    seed: int,
    extent: float = 1.0,
) -> PairBundle:
    """n mirrored ray pairs with shared origins on the plane.

    Origins are spread uniformly over a (2*extent)^2 patch of the plane
    centered at its anchor point; the partner direction is the reflection of
    the first across the plane (a fixed point when the direction lies in the
    plane).
    """
    if n < 1:
        raise ValueError("need at least one pair")
    g = rng(seed, Stream.SYMMETRY_PAIRS)
    e1, e2 = _plane_basis(plane.normal)
    ab = g.uniform(-extent, extent, size=(n, 2))
    origins = plane.point + ab[:, :1] * e1 + ab[:, 1:] * e2
    directions_a = _unit_directions(g, n)
    directions_b = plane.reflect_directions(directions_a)
    return PairBundle(origins, directions_a, directions_b, plane)


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pick = np.array([1.0, 0.0, 0.0])
    if abs(normal[0]) > 0.9:
        pick = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(normal, pick)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def normalize_to_wrist(ray: Ray, transform: RigidTransform) -> Ray:
    """Carry a ray into the wrist frame: rotate+translate the origin, rotate
    the direction."""
    return Ray(
        origin=transform.apply_points(ray.origin)[0],
        direction=transform.apply_directions(ray.direction)[0],
    )


def normalize_bundle(bundle: RayBundle, transform: RigidTransform) -> RayBundle:
    return RayBundle(
        transform.apply_points(bundle.origins),
        transform.apply_directions(bundle.directions),
    )


def generate_ground_truth(
    mesh: TriangleMesh,
    rays: RayBundle,
    bvh: Bvh | None = None,
) -> SampleSet:
    """Cast every ray against the mesh; output order matches input order."""
    if bvh is None:
        bvh = build_bvh(mesh)
    xi, depth, _ = cast_rays_batch(bvh, rays.origins, rays.directions)
    return SampleSet(rays=rays, xi=xi, depth=depth)
