"""Triangle meshes and exact first-hit ray casting.

Two query paths are provided: a binned-SAH BVH (`build_bvh` + `cast_ray`)
and an exhaustive brute-force oracle (`brute_force_cast`).  Both evaluate
candidate faces with the same batched intersection kernel, so their results
agree bit-for-bit: same hit flag, same distance, same face after
tie-breaking.

Conventions (fixed so results are deterministic and testable):
  * barycentric containment is edge-inclusive;
  * a ray starting on a face (t = 0) counts as a hit with distance 0,
    including the in-plane case where the origin lies inside the face;
  * among equal minimal distances the lowest face index wins;
  * zero-area faces never report hits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SAH_BINS = 8
LEAF_SIZE = 4

_DET_EPS = 1e-12       # below this the ray is treated as parallel to the plane
_PLANE_EPS = 1e-9      # origin-to-plane distance that still counts as "on the plane"
_AREA_EPS = 1e-14      # squared-norm cutoff for degenerate (zero-area) faces
_DIR_NORM_TOL = 1e-9


@dataclass
class TriangleMesh:
    """Indexed triangle soup in object/wrist-frame meters.

    vertices: (V, 3) float64, faces: (F, 3) int64.  Watertightness is not
    assumed anywhere in this module.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must have shape (F, 3)")
        if not np.isfinite(self.vertices).all():
            raise ValueError("vertex coordinates must be finite")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("face repeats a vertex index")
        self._face_data: _FaceData | None = None

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-face corner arrays (v0, v1, v2), each (F, 3)."""
        tri = self.vertices[self.faces]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


class _FaceData:
    """Precomputed per-face quantities shared by both cast paths."""

    __slots__ = ("v0", "e1", "e2", "normal", "area2", "ok")

    def __init__(self, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> None:
        self.v0 = v0
        self.e1 = v1 - v0
        self.e2 = v2 - v0
        self.normal = np.cross(self.e1, self.e2)
        self.area2 = np.einsum("ij,ij->i", self.normal, self.normal)
        self.ok = self.area2 > _AREA_EPS

    def take(self, sel: np.ndarray) -> "_FaceData":
        sub = _FaceData.__new__(_FaceData)
        sub.v0 = self.v0[sel]
        sub.e1 = self.e1[sel]
        sub.e2 = self.e2[sel]
        sub.normal = self.normal[sel]
        sub.area2 = self.area2[sel]
        sub.ok = self.ok[sel]
        return sub


def _face_data(mesh: TriangleMesh) -> _FaceData:
    if mesh._face_data is None:
        mesh._face_data = _FaceData(*mesh.triangle_corners())
    return mesh._face_data


@dataclass
class RayHit:
    """First intersection along a ray: distance, face index and hit point."""

    t: float
    face: int
    point: np.ndarray


@dataclass
class Bvh:
    """Flat binary BVH over mesh faces.

    Node i is a leaf iff count[i] > 0; leaves own prim_index[start:start+count]
    (sorted ascending within each leaf).  Internal nodes store child node ids
    in (left, right).  Built once, immutable afterwards.
    """

    aabb_min: np.ndarray   # (N, 3)
    aabb_max: np.ndarray   # (N, 3)
    left: np.ndarray       # (N,) int32, child id or -1 for leaves
    right: np.ndarray      # (N,) int32
    start: np.ndarray      # (N,) int32 into prim_index, leaves only
    count: np.ndarray      # (N,) int32, 0 for internal nodes
    prim_index: np.ndarray  # (F,) permutation of face ids
    faces: _FaceData = field(repr=False, default=None)
    _topology: tuple = field(repr=False, default=None)  # plain-list mirror

    @property
    def num_nodes(self) -> int:
        return len(self.count)

    def topology(self) -> tuple:
        """Traversal-shaped caches: plain-list node links (Python indexing
        into lists is far cheaper than into numpy scalars) and transposed
        (3, N) box bounds so the per-ray slab test reduces over the
        contiguous axis."""
        if self._topology is None:
            self._topology = (
                self.left.tolist(),
                self.right.tolist(),
                self.count.tolist(),
                self.start.tolist(),
                np.ascontiguousarray(self.aabb_min.T),
                np.ascontiguousarray(self.aabb_max.T),
            )
        return self._topology


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Build a binned-SAH BVH (8 bins, leaf size <= 4) over the mesh faces.

    Splits fall back to a centroid-median split whenever binning cannot
    separate the primitives, so construction always terminates.
    """
    n = mesh.num_faces
    if n == 0:
        raise ValueError("empty mesh")

    v0, v1, v2 = mesh.triangle_corners()
    fmin = np.minimum(np.minimum(v0, v1), v2)
    fmax = np.maximum(np.maximum(v0, v1), v2)
    centroid = (fmin + fmax) * 0.5

    order = np.arange(n, dtype=np.int64)

    aabb_min: list[np.ndarray] = []
    aabb_max: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []

    def new_node() -> int:
        aabb_min.append(np.zeros(3))
        aabb_max.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(count) - 1

    # iterative construction; stack holds (node_id, lo, hi) slices of `order`
    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        aabb_min[node] = fmin[idx].min(axis=0)
        aabb_max[node] = fmax[idx].max(axis=0)
        m = hi - lo
        if m <= LEAF_SIZE:
            order[lo:hi] = np.sort(idx)  # ascending ids make leaf ties cheap
            start[node] = lo
            count[node] = m
            continue

        cen = centroid[idx]
        cmin = cen.min(axis=0)
        cmax = cen.max(axis=0)
        extent = cmax - cmin

        best_axis = -1
        best_plane = -1
        best_cost = np.inf
        bin_of_best = None
        for axis in range(3):
            if extent[axis] <= 0.0:
                continue
            scale = SAH_BINS * (1.0 - 1e-12) / extent[axis]
            bins = ((cen[:, axis] - cmin[axis]) * scale).astype(np.int64)
            counts = np.bincount(bins, minlength=SAH_BINS)
            bmin = np.full((SAH_BINS, 3), np.inf)
            bmax = np.full((SAH_BINS, 3), -np.inf)
            for b in range(SAH_BINS):
                if counts[b]:
                    sel = bins == b
                    bmin[b] = fmin[idx[sel]].min(axis=0)
                    bmax[b] = fmax[idx[sel]].max(axis=0)
            # sweep: cost(plane p) = SA_left * n_left + SA_right * n_right
            lmin = np.minimum.accumulate(bmin, axis=0)
            lmax = np.maximum.accumulate(bmax, axis=0)
            rmin = np.minimum.accumulate(bmin[::-1], axis=0)[::-1]
            rmax = np.maximum.accumulate(bmax[::-1], axis=0)[::-1]
            lcnt = np.cumsum(counts)
            rcnt = np.cumsum(counts[::-1])[::-1]
            for p in range(SAH_BINS - 1):
                nl, nr = lcnt[p], rcnt[p + 1]
                if nl == 0 or nr == 0:
                    continue
                cost = nl * _half_area(lmin[p], lmax[p]) + nr * _half_area(
                    rmin[p + 1], rmax[p + 1]
                )
                if cost < best_cost:
                    best_cost = cost
                    best_axis = axis
                    best_plane = p
                    bin_of_best = bins

        if best_axis < 0:
            mid = lo + m // 2  # all centroids coincide: median split
        else:
            go_left = bin_of_best <= best_plane
            nl = int(go_left.sum())
            if nl == 0 or nl == m:
                mid = lo + m // 2
            else:
                order[lo:hi] = np.concatenate([idx[go_left], idx[~go_left]])
                mid = lo + nl

        lchild = new_node()
        rchild = new_node()
        left[node] = lchild
        right[node] = rchild
        stack.append((lchild, lo, mid))
        stack.append((rchild, mid, hi))

    return Bvh(
        aabb_min=np.asarray(aabb_min),
        aabb_max=np.asarray(aabb_max),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        start=np.asarray(start, dtype=np.int32),
        count=np.asarray(count, dtype=np.int32),
        prim_index=order,
        faces=_face_data(mesh),
    )


def _half_area(bmin: np.ndarray, bmax: np.ndarray) -> float:
    d = np.maximum(bmax - bmin, 0.0)
    return d[0] * d[1] + d[1] * d[2] + d[2] * d[0]


def _as_ray_batch(
    origins: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if origins.shape != directions.shape or origins.shape[1] != 3:
        raise ValueError("origins and directions must both have shape (N, 3)")
    sq = np.einsum("ij,ij->i", directions, directions)
    if np.any(np.abs(sq - 1.0) > 2.0 * _DIR_NORM_TOL):
        raise ValueError("direction not normalized")
    return origins, directions


def _intersect_kernel(
    origins: np.ndarray, directions: np.ndarray, fd: _FaceData
) -> np.ndarray:
    """Moller-Trumbore for every (ray, face) pair; t matrix (R, F), NaN on miss.

    Edge-inclusive; t >= 0 only.  Rays parallel to a face plane report a hit
    (t = 0) iff the origin lies on that plane inside the face.  Every cast
    path funnels through this one kernel, which is what makes the BVH and
    the brute-force oracle agree exactly.
    """
    r = len(origins)
    f = len(fd.v0)
    pvec = np.cross(directions[:, None, :], fd.e2[None, :, :])
    det = np.einsum("rfj,fj->rf", pvec, fd.e1)
    tvec = origins[:, None, :] - fd.v0[None, :, :]

    regular = fd.ok[None, :] & (np.abs(det) > _DET_EPS)
    t = np.full((r, f), np.nan)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / det
        u = np.einsum("rfj,rfj->rf", tvec, pvec) * inv
        qvec = np.cross(tvec, fd.e1[None, :, :])
        v = np.einsum("rfj,rj->rf", qvec, directions) * inv
        tt = np.einsum("rfj,fj->rf", qvec, fd.e2) * inv
        hit = regular & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (tt >= 0.0)
    t[hit] = tt[hit]

    parallel = fd.ok[None, :] & ~(np.abs(det) > _DET_EPS)
    if parallel.any():
        # origin exactly on the face plane and inside the face -> distance 0
        ri, fi = np.nonzero(parallel)
        w = origins[ri] - fd.v0[fi]
        nn = fd.normal[fi]
        dist = np.einsum("ij,ij->i", w, nn) / np.sqrt(fd.area2[fi])
        e1, e2 = fd.e1[fi], fd.e2[fi]
        d00 = np.einsum("ij,ij->i", e1, e1)
        d01 = np.einsum("ij,ij->i", e1, e2)
        d11 = np.einsum("ij,ij->i", e2, e2)
        d20 = np.einsum("ij,ij->i", w, e1)
        d21 = np.einsum("ij,ij->i", w, e2)
        denom = d00 * d11 - d01 * d01
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (d11 * d20 - d01 * d21) / denom
            v = (d00 * d21 - d01 * d20) / denom
        inside = (
            (np.abs(dist) <= _PLANE_EPS)
            & (denom > 0.0)
            & (u >= 0.0)
            & (v >= 0.0)
            & (u + v <= 1.0)
        )
        t[ri[inside], fi[inside]] = 0.0

    return t


def _reduce_hits(t: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray lexicographic (t, face) minimum.

    `faces` must be ascending so that the first column attaining the minimum
    is also the lowest face id.  Returns (t_best, face_best) with inf / -1
    where every face missed.
    """
    tt = np.where(np.isnan(t), np.inf, t)
    t_best = tt.min(axis=1)
    first = np.argmax(tt == t_best[:, None], axis=1)
    face_best = np.where(np.isfinite(t_best), faces[first], -1)
    return t_best, face_best


def ray_triangle_intersect(
    origin: np.ndarray,
    direction: np.ndarray,
    v0: np.ndarray,
    v1: np.ndarray,
    v2: np.ndarray,
) -> float | None:
    """Smallest t >= 0 where origin + t*direction meets the triangle, else None."""
    origins, directions = _as_ray_batch(origin, direction)
    fd = _FaceData(
        np.asarray(v0, dtype=np.float64)[None, :],
        np.asarray(v1, dtype=np.float64)[None, :],
        np.asarray(v2, dtype=np.float64)[None, :],
    )
    t = _intersect_kernel(origins, directions, fd)[0, 0]
    return None if np.isnan(t) else float(t)


def brute_force_cast(
    mesh: TriangleMesh, origin: np.ndarray, direction: np.ndarray
) -> RayHit | None:
    """First hit by exhaustive evaluation of all faces (oracle path)."""
    origins, directions = _as_ray_batch(origin, direction)
    t = _intersect_kernel(origins, directions, _face_data(mesh))
    t_best, face_best = _reduce_hits(t, np.arange(mesh.num_faces))
    if face_best[0] < 0:
        return None
    return RayHit(
        t=float(t_best[0]),
        face=int(face_best[0]),
        point=origins[0] + t_best[0] * directions[0],
    )


def brute_force_cast_batch(
    mesh: TriangleMesh,
    origins: np.ndarray,
    directions: np.ndarray,
    chunk: int = 128,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exhaustive first hit for many rays at once.

    Returns (xi, t, face): visibility int8, distance float64 (NaN on miss)
    and face id int64 (-1 on miss).  Rays are processed in chunks to bound
    the (chunk x faces) working set.
    """
    origins, directions = _as_ray_batch(origins, directions)
    n = len(origins)
    fd = _face_data(mesh)
    all_faces = np.arange(mesh.num_faces)
    xi = np.zeros(n, dtype=np.int8)
    t_out = np.full(n, np.nan)
    face_out = np.full(n, -1, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        t = _intersect_kernel(origins[s:e], directions[s:e], fd)
        t_best, face_best = _reduce_hits(t, all_faces)
        hit = face_best >= 0
        xi[s:e] = hit.astype(np.int8)
        t_out[s:e][hit] = t_best[hit]
        face_out[s:e] = face_best
    return xi, t_out, face_out


def cast_ray(
    bvh: Bvh, origin: np.ndarray, direction: np.ndarray
) -> RayHit | None:
    """BVH-accelerated first hit; result identical to brute_force_cast."""
    origins, directions = _as_ray_batch(origin, direction)
    t_best, face_best = _cast_one(bvh, origins[0], directions[0])
    if face_best < 0:
        return None
    return RayHit(
        t=t_best, face=face_best, point=origins[0] + t_best * directions[0]
    )


def cast_rays_batch(
    bvh: Bvh, origins: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BVH first hit for many rays; same (xi, t, face) layout as brute force."""
    origins, directions = _as_ray_batch(origins, directions)
    n = len(origins)
    xi = np.zeros(n, dtype=np.int8)
    t_out = np.full(n, np.nan)
    face_out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        t_best, face_best = _cast_one(bvh, origins[i], directions[i])
        if face_best >= 0:
            xi[i] = 1
            t_out[i] = t_best
            face_out[i] = face_best
    return xi, t_out, face_out


def _cast_one(
    bvh: Bvh, origin: np.ndarray, direction: np.ndarray
) -> tuple[float, int]:
    """Gather every face whose node chain the ray can reach, test them once.

    Any face the ray actually hits lies inside all of its ancestors' boxes,
    so the gathered set is a superset of the hit set and the reduction over
    it equals the brute-force reduction over all faces.  One kernel call per
    ray is also much cheaper than one per visited leaf.
    """
    lefts, rights, counts, starts, lo_t, hi_t = bvh.topology()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = (1.0 / direction)[:, None]
        o = origin[:, None]
        t0 = (lo_t - o) * inv
        t1 = (hi_t - o) * inv
        near = np.minimum(t0, t1).max(axis=0)
        far = np.maximum(t0, t1).min(axis=0)
    # 0 * inf on a slab the origin sits on yields NaN: treat as unbounded
    enter = np.where(np.isnan(near), 0.0, near)
    exit_ = np.where(np.isnan(far), np.inf, far)
    reachable = (exit_ >= np.maximum(enter, 0.0)).tolist()

    spans: list[tuple[int, int]] = []
    stack = [0]
    while stack:
        node = stack.pop()
        if not reachable[node]:
            continue
        c = counts[node]
        if c > 0:
            s = starts[node]
            spans.append((s, s + c))
        else:
            stack.append(rights[node])
            stack.append(lefts[node])

    if not spans:
        return np.inf, -1
    faces = np.sort(np.concatenate([bvh.prim_index[s:e] for s, e in spans]))
    t = _intersect_kernel(
        origin[None, :], direction[None, :], bvh.faces.take(faces)
    )
    t_best, face_best = _reduce_hits(t, faces)
    return float(t_best[0]), int(face_best[0])


def analytic_sphere_ddf(
    center: np.ndarray,
    radius: float,
    origin: np.ndarray,
    direction: np.ndarray,
) -> tuple[int, float | None]:
    """Closed-form directed distance to a sphere: (visibility, distance).

    Solves ||o + t d - c||^2 = r^2 for the smallest root t >= 0.  Visibility
    is 1 iff such a root exists; the distance is None when invisible.
    """
    xi, depth = analytic_sphere_ddf_batch(center, radius, origin, direction)
    if xi[0] == 0:
        return 0, None
    return 1, float(depth[0])


def analytic_sphere_ddf_batch(
    center: np.ndarray, radius: float, origins: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized closed-form sphere field; depths are NaN where invisible."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    origins, directions = _as_ray_batch(origins, directions)
    oc = origins - np.asarray(center, dtype=np.float64)
    b = 2.0 * np.einsum("ij,ij->i", directions, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - 4.0 * c
    hit = disc >= 0.0
    s = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - s) / 2.0
    t_far = (-b + s) / 2.0
    t = np.where(t_near >= 0.0, t_near, t_far)
    xi = hit & (t >= 0.0)
    depth = np.where(xi, t, np.nan)
    return xi.astype(np.int8), depth


# ---------------------------------------------------------------------------
# analytic test primitives


def make_box_mesh(half_extent: float = 0.5, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned cube as 12 triangles (outward-facing winding)."""
    h = half_extent
    corners = np.array(
        [
            [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
            [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
        ]
    ) + np.asarray(center, dtype=np.float64)
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # z-
            [4, 5, 6], [4, 6, 7],  # z+
            [0, 1, 5], [0, 5, 4],  # y-
            [3, 6, 2], [3, 7, 6],  # y+
            [1, 2, 6], [1, 6, 5],  # x+
            [0, 4, 7], [0, 7, 3],  # x-
        ]
    )
    return TriangleMesh(vertices=corners, faces=faces)


def make_icosphere(
    subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)
) -> TriangleMesh:
    """Icosahedron subdivided `subdivisions` times, projected onto the sphere.

    Face count is 20 * 4**subdivisions (level 4 gives 5120).
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    base = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in base]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            verts.append(m)
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        nxt = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt

    v = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(vertices=v, faces=np.asarray(faces, dtype=np.int64))


def normalize_mesh(
    mesh: TriangleMesh, target_half_extent: float = 0.9
) -> tuple[TriangleMesh, float, np.ndarray]:
    """Center the mesh and scale it to fit [-target, target]^3.

    Returns (mesh, scale, offset) with new_vertices = (old + offset) * scale.
    """
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) / 2.0
    if half <= 0:
        raise ValueError("mesh has zero extent")
    scale = target_half_extent / half
    verts = (mesh.vertices - center) * scale
    return TriangleMesh(vertices=verts, faces=mesh.faces.copy()), scale, -center
