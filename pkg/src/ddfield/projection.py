"""Perspective projection of 3D rays and 2D feature-pyramid sampling.

A 3D ray projects to a 2D pixel ray: its origin via p = K(R P + t)/Z, its
direction as the normalized offset towards the projection of a second point
P* = P + delta*theta.  Rays that pass (numerically) through the camera
center project to a single pixel and are flagged degenerate; downstream
aggregation falls back to the patch feature at p.

Feature maps come as a multi-resolution pyramid.  Sampling a pixel point
scales it by each level's resolution ratio, bilinearly interpolates all
channels with clamped coordinates, and concatenates levels finest-first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh, build_bvh, cast_rays_batch
from .rays import Ray, RayBundle
from .seeding import Stream, rng

DELTA_ALONG_RAY = 0.1      # wrist-frame offset used to pick P*
EPS_PROJ = 1e-6            # pixel distance below which projection collapses
EPS_Z = 1e-6               # minimum camera-frame depth
DEFAULT_SPACING = 4.0      # pixels between consecutive 2D samples


class BehindCameraError(ValueError):
    """Point does not lie strictly in front of the camera."""


@dataclass
class CameraPose:
    """Pinhole intrinsics plus world-to-camera rigid pose (x_cam = R x + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-7:
            raise ValueError(f"rotation is not orthonormal (|R'R - I| = {err:.2e})")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Ray2D:
    """Projected ray: pixel origin, unit pixel direction unless degenerate."""

    p: np.ndarray
    theta_star: np.ndarray | None
    degenerate: bool

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=np.float64).reshape(2)
        if self.degenerate:
            if self.theta_star is not None:
                raise ValueError("degenerate ray must not carry a direction")
        else:
            self.theta_star = np.asarray(self.theta_star, dtype=np.float64).reshape(2)
            if abs(float(np.linalg.norm(self.theta_star)) - 1.0) > 1e-9:
                raise ValueError("theta_star must be unit length")


@dataclass
class PyramidLevel:
    """One grid of the pyramid: (height, width, channels) row-major floats."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("level data must be (height, width, channels)")
        if min(self.data.shape) < 1:
            raise ValueError("level dimensions must be positive")
        if not np.isfinite(self.data).all():
            raise ValueError("feature values must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class FeaturePyramid:
    """Finest-first stack of grids; each next level halves the resolution
    (rounded up)."""

    levels: list[PyramidLevel]

    def __post_init__(self) -> None:
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        for prev, cur in zip(self.levels, self.levels[1:]):
            want = (-(-prev.height // 2), -(-prev.width // 2))
            if (cur.height, cur.width) != want:
                raise ValueError(
                    f"level sizes must halve (rounded up): expected {want}, "
                    f"got {(cur.height, cur.width)}"
                )

    @property
    def total_channels(self) -> int:
        return sum(l.channels for l in self.levels)


def project_point(camera: CameraPose, point: np.ndarray) -> np.ndarray:
    """Pixel coordinates of a world point; raises if at or behind the camera."""
    pix, z = project_points_batch(camera, np.atleast_2d(point), strict=True)
    return pix[0]


def project_points_batch(
    camera: CameraPose, points: np.ndarray, strict: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.  Returns (pixels (N, 2), camera depth z (N,)).

    strict=True raises BehindCameraError when any z <= EPS_Z; strict=False
    leaves NaN pixels at those entries so callers can mask.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = points @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    bad = z <= EPS_Z
    if strict and bad.any():
        raise BehindCameraError(
            f"{int(bad.sum())} points at or behind the camera (z <= {EPS_Z})"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.fx * cam[:, 0] / z + camera.cx
        y = camera.fy * cam[:, 1] / z + camera.cy
    pix = np.stack([x, y], axis=1)
    pix[bad] = np.nan
    return pix, z


def project_ray(
    camera: CameraPose, ray: Ray, delta: float = DELTA_ALONG_RAY
) -> Ray2D:
    """Project a 3D ray to its 2D pixel ray (or flag it degenerate)."""
    p, theta, degenerate = project_bundle(
        camera, RayBundle(ray.origin[None, :], ray.direction[None, :]), delta
    )
    if degenerate[0]:
        return Ray2D(p=p[0], theta_star=None, degenerate=True)
    return Ray2D(p=p[0], theta_star=theta[0], degenerate=False)


def project_bundle(
    camera: CameraPose, bundle: RayBundle, delta: float = DELTA_ALONG_RAY
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized project_ray.

    Returns (p (N, 2), theta_star (N, 2) with NaN rows where degenerate,
    degenerate (N,) bool).  Raises BehindCameraError if any endpoint fails
    the depth guard.
    """
    p, _ = project_points_batch(camera, bundle.origins, strict=True)
    q, _ = project_points_batch(
        camera, bundle.origins + delta * bundle.directions, strict=True
    )
    diff = q - p
    norm = np.linalg.norm(diff, axis=1)
    degenerate = norm < EPS_PROJ
    theta = np.full_like(diff, np.nan)
    ok = ~degenerate
    theta[ok] = diff[ok] / norm[ok, None]
    return p, theta, degenerate


def sample_2d_points(ray2d: Ray2D, k_l: int, spacing: float) -> np.ndarray:
    """K_l points marching from p along theta_star: p + i*spacing*theta_star,
    i = 1..K_l (p itself is excluded; it feeds the query side)."""
    if ray2d.degenerate:
        raise ValueError("degenerate ray has no 2D direction")
    if k_l < 1:
        raise ValueError("need at least one sample point")
    steps = np.arange(1, k_l + 1, dtype=np.float64)[:, None] * spacing
    return ray2d.p[None, :] + steps * ray2d.theta_star[None, :]


def bilinear_sample(pyramid: FeaturePyramid, point: np.ndarray) -> np.ndarray:
    """All-channel feature vector at one finest-level pixel point."""
    return bilinear_sample_batch(pyramid, np.atleast_2d(point))[0]


def bilinear_sample_batch(
    pyramid: FeaturePyramid, points: np.ndarray
) -> np.ndarray:
    """Bilinear interpolation of (N, 2) pixel points on every level.

    Points are (x, y) in finest-level pixel units; node (row i, col j)
    sits at (x=j, y=i).  Each level scales the query by its resolution
    ratio and clamps to the grid, so out-of-bounds queries return the
    nearest boundary value.  Level vectors concatenate finest-first.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be (N, 2)")
    base = pyramid.levels[0]
    parts = []
    for level in pyramid.levels:
        sx = level.width / base.width
        sy = level.height / base.height
        x = np.clip(points[:, 0] * sx, 0.0, level.width - 1.0)
        y = np.clip(points[:, 1] * sy, 0.0, level.height - 1.0)
        x0 = np.minimum(np.floor(x).astype(np.int64), level.width - 2) if level.width > 1 else np.zeros(len(x), dtype=np.int64)
        y0 = np.minimum(np.floor(y).astype(np.int64), level.height - 2) if level.height > 1 else np.zeros(len(y), dtype=np.int64)
        x0 = np.maximum(x0, 0)
        y0 = np.maximum(y0, 0)
        x1 = np.minimum(x0 + 1, level.width - 1)
        y1 = np.minimum(y0 + 1, level.height - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        d = level.data
        out = (
            d[y0, x0] * (1 - fx) * (1 - fy)
            + d[y0, x1] * fx * (1 - fy)
            + d[y1, x0] * (1 - fx) * fy
            + d[y1, x1] * fx * fy
        )
        parts.append(out)
    return np.concatenate(parts, axis=1)


def collect_ray_feature_inputs(
    pyramid: FeaturePyramid,
    camera: CameraPose,
    ray: Ray,
    k_l: int = 8,
    spacing: float = DEFAULT_SPACING,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Per-ray 2D inputs: (F_p, F_l, degenerate).

    F_p is the feature at the projected origin.  F_l holds the K_l sampled
    point features, or is empty (0, C) when the projection is degenerate;
    the aggregator then uses the patch feature F_p alone.
    """
    ray2d = project_ray(camera, ray)
    f_p = bilinear_sample(pyramid, ray2d.p)
    if ray2d.degenerate:
        return f_p, np.zeros((0, len(f_p))), True
    pts = sample_2d_points(ray2d, k_l, spacing)
    f_l = bilinear_sample_batch(pyramid, pts)
    return f_p, f_l, False


def collect_bundle_feature_inputs(
    pyramid: FeaturePyramid,
    camera: CameraPose,
    bundle: RayBundle,
    k_l: int = 8,
    spacing: float = DEFAULT_SPACING,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized collect_ray_feature_inputs.

    Returns (F_p (N, C), F_l (N, K_l, C), degenerate (N,)).  Degenerate rows
    of F_l are zero-filled and must be ignored downstream (the aggregator
    checks the flag, not the payload).
    """
    p, theta, degenerate = project_bundle(camera, bundle)
    f_p = bilinear_sample_batch(pyramid, p)
    n, c = f_p.shape
    f_l = np.zeros((n, k_l, c))
    ok = ~degenerate
    if ok.any():
        steps = np.arange(1, k_l + 1, dtype=np.float64)
        pts = (
            p[ok, None, :] + steps[None, :, None] * spacing * theta[ok, None, :]
        ).reshape(-1, 2)
        f_l[ok] = bilinear_sample_batch(pyramid, pts).reshape(-1, k_l, c)
    return f_p, f_l, degenerate


# ---------------------------------------------------------------------------
# synthetic pyramid (deterministic stand-in for a learned image encoder)


def make_synthetic_pyramid(
    mesh: TriangleMesh,
    camera: CameraPose,
    base_height: int = 64,
    base_width: int = 64,
    channels: int = 8,
    num_levels: int = 5,
    seed: int = 0,
    noise_scale: float = 0.5,
) -> FeaturePyramid:
    """Deterministic feature pyramid derived from the scene itself.

    Per level the channels are: [0] x-coordinate encoding, [1] y-coordinate
    encoding, [2] mesh silhouette mask rendered by ray casting, [3:]
    seeded smooth noise (low-resolution Gaussians upsampled bilinearly).
    Channel count must be >= 3 to fit the fixed channels.
    """
    if channels < 3:
        raise ValueError("need at least 3 channels (x, y, silhouette)")
    if num_levels < 1:
        raise ValueError("need at least one level")
    g = rng(seed, Stream.PYRAMID_NOISE)
    bvh = build_bvh(mesh)
    cam_center = camera.center()
    rot_t = camera.rotation.T

    levels = []
    h, w = base_height, base_width
    for _ in range(num_levels):
        data = np.zeros((h, w, channels))
        xs = np.arange(w, dtype=np.float64) / max(w - 1, 1)
        ys = np.arange(h, dtype=np.float64) / max(h - 1, 1)
        data[:, :, 0] = xs[None, :]
        data[:, :, 1] = ys[:, None]
        data[:, :, 2] = _silhouette(bvh, camera, cam_center, rot_t, h, w, base_height, base_width)
        for c in range(3, channels):
            data[:, :, c] = noise_scale * _smooth_noise(g, h, w)
        levels.append(PyramidLevel(data))
        h, w = -(-h // 2), -(-w // 2)
    return FeaturePyramid(levels)


def _silhouette(
    bvh, camera, cam_center, rot_t, h, w, base_h, base_w
) -> np.ndarray:
    # pixel centers of this level mapped back to finest-level pixel units
    sx = w / base_w
    sy = h / base_h
    xs = (np.arange(w) + 0.0) / sx
    ys = (np.arange(h) + 0.0) / sy
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack(
        [
            (gx.ravel() - camera.cx) / camera.fx,
            (gy.ravel() - camera.cy) / camera.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    dirs = dirs_cam @ rot_t.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.tile(cam_center, (h * w, 1))
    xi, _, _ = cast_rays_batch(bvh, origins, dirs)
    return xi.reshape(h, w).astype(np.float64)


def _smooth_noise(g: np.random.Generator, h: int, w: int) -> np.ndarray:
    ch = max(2, h // 8 + 1)
    cw = max(2, w // 8 + 1)
    coarse = g.normal(size=(ch, cw))
    yy = np.linspace(0, ch - 1, h)
    xx = np.linspace(0, cw - 1, w)
    y0 = np.minimum(yy.astype(np.int64), ch - 2)
    x0 = np.minimum(xx.astype(np.int64), cw - 2)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    return (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + coarse[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    up: np.ndarray = (0.0, 1.0, 0.0),
) -> CameraPose:
    """Camera at `eye` looking towards `target` (z forward, y down-ish)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z /= nz
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("up is parallel to the view direction")
    x /= nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return CameraPose(
        fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot, translation=-rot @ eye
    )


def default_camera(height: int = 64, width: int = 64) -> CameraPose:
    """Camera outside the unit box looking at its center; frames [-1,1]^3."""
    f = 0.625 * width
    return look_at_camera(
        eye=np.array([0.0, 0.0, -2.5]),
        target=np.zeros(3),
        fx=f,
        fy=f,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
    )
