"""Articulated 21-joint hand skeleton and its per-ray 3D features.

The skeleton is a wrist-rooted tree: joint 0 is the wrist, finger f in
{thumb=0, index=1, middle=2, ring=3, pinky=4} owns joints 1+4f (base),
2+4f (middle), 3+4f (distal) and 4+4f (tip).  Bone b connects joint b+1 to
its parent, so bone indices follow child-joint order.  The 45D pose holds
one axis-angle triple per articulated joint (base/middle/distal of each
finger, ascending joint index); wrist and tips carry no articulation.

Per-ray features:
  * closest approach between the ray half-line and the bone segments,
  * geodesic K-nearest joints of the skeleton point (along the bone, then
    through the tree),
  * the approach point expressed in each selected joint's local frame
    (local embedding, 3*K values),
  * the whole ray expressed in every joint frame (global embedding,
    21 * 6 = 126 values).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .rays import Ray, RayBundle

NUM_JOINTS = 21
NUM_BONES = 20
POSE_SIZE = 45
GLOBAL_EMBEDDING_SIZE = NUM_JOINTS * 6
_UP = np.array([0.0, 0.0, 1.0])  # frame-construction reference, see build_rest_frames
_FRAME_TOL = 1e-7


def articulated_joints() -> list[int]:
    """Joint ids carrying pose parameters: every non-wrist, non-tip joint."""
    return [j for j in range(1, NUM_JOINTS) if j % 4 != 0]


@dataclass
class HandSkeleton:
    """Joint positions, tree links and per-joint local frames.

    frame_rotations[j] columns are joint j's axes in the outer frame; the
    frame origin is the joint position.  A posed skeleton produced by
    forward_kinematics reuses this same container.
    """

    joints: np.ndarray            # (21, 3)
    parents: np.ndarray           # (21,) int64, -1 for the wrist
    frame_rotations: np.ndarray   # (21, 3, 3)
    version: int = 1
    _tree_dist: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        self.joints = np.ascontiguousarray(self.joints, dtype=np.float64)
        self.parents = np.ascontiguousarray(self.parents, dtype=np.int64)
        self.frame_rotations = np.ascontiguousarray(
            self.frame_rotations, dtype=np.float64
        )
        if self.joints.shape != (NUM_JOINTS, 3):
            raise ValueError(f"need {NUM_JOINTS} joints")
        if self.parents.shape != (NUM_JOINTS,):
            raise ValueError("parents must be (21,)")
        if self.frame_rotations.shape != (NUM_JOINTS, 3, 3):
            raise ValueError("frame_rotations must be (21, 3, 3)")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, NUM_JOINTS):
            p = self.parents[j]
            if not 0 <= p < NUM_JOINTS:
                raise ValueError(f"joint {j} has parent {p} out of range")
            # walking up must reach the root without revisiting
            seen = {j}
            while p != -1:
                if p in seen:
                    raise ValueError("parent links form a cycle")
                seen.add(int(p))
                p = self.parents[p]
        lengths = self.bone_lengths()
        if (lengths <= 0).any():
            raise ValueError("every bone must have positive length")
        eye = np.eye(3)
        for j in range(NUM_JOINTS):
            r = self.frame_rotations[j]
            if np.abs(r.T @ r - eye).max() > _FRAME_TOL:
                raise ValueError(f"frame {j} is not orthonormal")

    def bones(self) -> np.ndarray:
        """(20, 2) array of (parent joint, child joint); bone b has child b+1."""
        children = np.arange(1, NUM_JOINTS)
        return np.stack([self.parents[children], children], axis=1)

    def bone_lengths(self) -> np.ndarray:
        b = self.bones()
        return np.linalg.norm(self.joints[b[:, 1]] - self.joints[b[:, 0]], axis=1)

    def tree_distances(self) -> np.ndarray:
        """(21, 21) matrix of path lengths along the bone graph."""
        if self._tree_dist is None:
            # unique tree paths: propagate depth sums from the root outward
            depth = np.zeros(NUM_JOINTS)
            order = self._topological_order()
            for j in order[1:]:
                p = self.parents[j]
                depth[j] = depth[p] + np.linalg.norm(
                    self.joints[j] - self.joints[p]
                )
            # distance = depth[i] + depth[j] - 2*depth[lca(i, j)]
            anc = [self._ancestors(j) for j in range(NUM_JOINTS)]
            d = np.zeros((NUM_JOINTS, NUM_JOINTS))
            for i in range(NUM_JOINTS):
                for j in range(i + 1, NUM_JOINTS):
                    common = max(anc[i] & anc[j], key=lambda a: depth[a])
                    d[i, j] = d[j, i] = depth[i] + depth[j] - 2 * depth[common]
            self._tree_dist = d
        return self._tree_dist

    def _topological_order(self) -> list[int]:
        order = [0]
        pending = [j for j in range(1, NUM_JOINTS)]
        placed = {0}
        while pending:
            rest = []
            for j in pending:
                if self.parents[j] in placed:
                    order.append(j)
                    placed.add(j)
                else:
                    rest.append(j)
            if len(rest) == len(pending):
                raise ValueError("kinematic tree is disconnected")
            pending = rest
        return order

    def _ancestors(self, j: int) -> set[int]:
        out = {j}
        while self.parents[j] != -1:
            j = int(self.parents[j])
            out.add(j)
        return out


@dataclass
class HandPose:
    """45 articulation scalars: one axis-angle triple per articulated joint.

    Construction canonicalizes each triple to magnitude <= pi (same
    rotation, shortest representative)."""

    theta: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if self.theta.shape != (POSE_SIZE,):
            raise ValueError(f"pose must have exactly {POSE_SIZE} parameters")
        if not np.isfinite(self.theta).all():
            raise ValueError("pose parameters must be finite")
        self.theta = _canonicalize(self.theta.reshape(-1, 3)).reshape(-1)

    @staticmethod
    def zero() -> "HandPose":
        return HandPose(np.zeros(POSE_SIZE))


def _canonicalize(aa: np.ndarray) -> np.ndarray:
    """Wrap each axis-angle row to magnitude <= pi, keeping the rotation."""
    out = aa.copy()
    angle = np.linalg.norm(aa, axis=1)
    big = angle > np.pi
    for i in np.flatnonzero(big):
        a = angle[i]
        wrapped = np.mod(a, 2 * np.pi)
        if wrapped > np.pi:
            wrapped -= 2 * np.pi  # negative: flip the axis
        out[i] = aa[i] / a * wrapped
    return out


def rotation_from_axis_angle(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula; identity below 1e-12 magnitude."""
    aa = np.asarray(aa, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(aa))
    if angle < 1e-12:
        return np.eye(3)
    k = aa / angle
    kx = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def build_rest_frames(joints: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """Local frames from geometry alone.

    x-axis: bone direction towards the lowest-index child (tips point away
    from their parent instead); z-axis: normalize(cross(x, up)) with the
    global up (0,0,1), well defined because the bundled rest hand is flat
    in z=0; y-axis completes the right-handed frame.
    """
    frames = np.zeros((NUM_JOINTS, 3, 3))
    children: dict[int, list[int]] = {j: [] for j in range(NUM_JOINTS)}
    for j in range(1, NUM_JOINTS):
        children[int(parents[j])].append(j)
    for j in range(NUM_JOINTS):
        if children[j]:
            x = joints[children[j][0]] - joints[j]
        else:
            x = joints[j] - joints[int(parents[j])]
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            raise ValueError(f"cannot orient joint {j}: zero bone")
        x = x / nx
        z = np.cross(x, _UP)
        nz = np.linalg.norm(z)
        if nz < 1e-9:
            raise ValueError(f"cannot orient joint {j}: bone parallel to up")
        z = z / nz
        y = np.cross(z, x)
        frames[j] = np.stack([x, y, z], axis=1)
    return frames


def load_rest_skeleton() -> HandSkeleton:
    """Parse the bundled rest-skeleton data file."""
    text = (
        resources.files("ddfield").joinpath("data/rest_skeleton.txt").read_text()
    )
    return parse_skeleton_text(text)


def parse_skeleton_text(text: str) -> HandSkeleton:
    version = None
    joints = np.full((NUM_JOINTS, 3), np.nan)
    parents = np.full(NUM_JOINTS, -2, dtype=np.int64)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "version":
            if version is not None:
                raise ValueError(f"line {lineno}: duplicate version")
            version = int(parts[1])
        elif parts[0] == "j":
            if version is None:
                raise ValueError(f"line {lineno}: version must come first")
            if len(parts) != 6:
                raise ValueError(f"line {lineno}: joint line needs 6 fields")
            j = int(parts[1])
            if not 0 <= j < NUM_JOINTS:
                raise ValueError(f"line {lineno}: joint id {j} out of range")
            if parents[j] != -2:
                raise ValueError(f"line {lineno}: joint {j} repeated")
            parents[j] = int(parts[2])
            joints[j] = [float(v) for v in parts[3:6]]
        else:
            raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
    if version != 1:
        raise ValueError(f"unsupported skeleton file version: {version}")
    if (parents == -2).any():
        missing = np.flatnonzero(parents == -2).tolist()
        raise ValueError(f"missing joints: {missing}")
    frames = build_rest_frames(joints, parents)
    return HandSkeleton(
        joints=joints, parents=parents, frame_rotations=frames, version=version
    )


def forward_kinematics(rest: HandSkeleton, pose: HandPose) -> HandSkeleton:
    """Pose the skeleton: each articulated joint rotates its subtree.

    The axis-angle triple of joint j acts in joint j's local frame; the
    world effect is F_j rod(aa_j) F_j', accumulated down the tree.  Bone
    lengths are preserved exactly up to float rounding and the wrist stays
    fixed.
    """
    slots = {j: i for i, j in enumerate(articulated_joints())}
    aa = pose.theta.reshape(-1, 3)
    order = rest._topological_order()

    world_rot = np.zeros((NUM_JOINTS, 3, 3))
    posed = np.zeros((NUM_JOINTS, 3))
    world_rot[0] = np.eye(3)
    posed[0] = rest.joints[0]
    for j in order[1:]:
        p = int(rest.parents[j])
        posed[j] = posed[p] + world_rot[p] @ (rest.joints[j] - rest.joints[p])
        if j in slots:
            f = rest.frame_rotations[j]
            local = f @ rotation_from_axis_angle(aa[slots[j]]) @ f.T
            world_rot[j] = world_rot[p] @ local
        else:
            world_rot[j] = world_rot[p]

    frames = np.einsum("jab,jbc->jac", world_rot, rest.frame_rotations)
    return HandSkeleton(
        joints=posed,
        parents=rest.parents.copy(),
        frame_rotations=frames,
        version=rest.version,
    )


# ---------------------------------------------------------------------------
# ray-skeleton queries


def ray_skeleton_closest(
    ray: Ray, skeleton: HandSkeleton
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Closest approach between the ray half-line and the bone segments.

    Returns (P_S on the ray, P_D on the skeleton, bone index, distance);
    equal distances resolve to the lowest bone index.
    """
    p_s, p_d, bone, dist = ray_skeleton_closest_batch(
        RayBundle(ray.origin[None, :], ray.direction[None, :]), skeleton
    )
    return p_s[0], p_d[0], int(bone[0]), float(dist[0])


def ray_skeleton_closest_batch(
    bundle: RayBundle, skeleton: HandSkeleton
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized closest approach for N rays against all 20 bones.

    The constrained quadratic (t >= 0, s in [0, 1]) is solved by candidate
    enumeration: the unconstrained stationary point plus each clamped edge.
    Segment-endpoint candidates use the endpoint coordinates directly and
    the shared formula t = max(0, d.(q - o)), so two bones meeting at a
    joint produce bit-identical distances and ties resolve by bone index.
    """
    o = bundle.origins            # (N, 3)
    d = bundle.directions         # (N, 3)
    n = len(o)
    b = skeleton.bones()
    a_pt = skeleton.joints[b[:, 0]]   # (B, 3) bone start (parent joint)
    b_pt = skeleton.joints[b[:, 1]]   # (B, 3) bone end (child joint)
    u = b_pt - a_pt                   # (B, 3)

    w = o[:, None, :] - a_pt[None, :, :]        # (N, B, 3)
    uu = np.einsum("bj,bj->b", u, u)[None, :]
    du = np.einsum("nj,bj->nb", d, u)
    dw = np.einsum("nbj,nj->nb", w, d)
    uw = np.einsum("nbj,bj->nb", w, u)

    best = np.full((n, NUM_BONES), np.inf)
    best_t = np.zeros((n, NUM_BONES))
    best_q = np.zeros((n, NUM_BONES, 3))

    def consider(t, q, mask=None):
        # distance is always evaluated straight from the candidate point q,
        # so candidates at a shared joint produce bit-identical values for
        # both incident bones and ties stay exact
        nonlocal best, best_t, best_q
        diff = o[:, None, :] + t[:, :, None] * d[:, None, :] - q
        d2 = np.einsum("nbj,nbj->nb", diff, diff)
        if mask is not None:
            d2 = np.where(mask, d2, np.inf)
        better = d2 < best
        best = np.where(better, d2, best)
        best_t = np.where(better, t, best_t)
        best_q = np.where(better[:, :, None], q, best_q)

    # candidate 0: unconstrained stationary point of |w + t d - s u|^2
    # (directions are unit so d.d = 1)
    det = uu - du * du
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-dw * uu + du * uw) / det
        s0 = (uw - du * dw) / det
    feasible = (det > 1e-12) & (t0 >= 0.0) & (s0 >= 0.0) & (s0 <= 1.0)
    q0 = a_pt[None, :, :] + s0[:, :, None] * u[None, :, :]
    consider(np.where(feasible, t0, 0.0), np.where(feasible[:, :, None], q0, 0.0), feasible)

    # edge t = 0: nearest segment point to the origin (exact joint
    # coordinates where the clamp saturates)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_edge = np.clip(uw / uu, 0.0, 1.0)
    q_edge = a_pt[None, :, :] + s_edge[:, :, None] * u[None, :, :]
    sat = s_edge == 1.0
    if sat.any():
        q_edge[sat] = np.broadcast_to(b_pt[None], (n, NUM_BONES, 3))[sat]
    consider(np.zeros((n, NUM_BONES)), q_edge)

    # edges s = 0 / s = 1: nearest ray point to each joint, one shared form
    for q_end in (a_pt, b_pt):
        t_end = np.maximum(
            np.einsum("nbj,nj->nb", q_end[None, :, :] - o[:, None, :], d), 0.0
        )
        consider(t_end, np.broadcast_to(q_end[None], (n, NUM_BONES, 3)))

    # lowest bone index wins ties: first column attaining the row minimum
    bone = np.argmax(best == best.min(axis=1, keepdims=True), axis=1)
    rows = np.arange(n)
    d_best = np.sqrt(best[rows, bone])
    p_s = o + best_t[rows, bone][:, None] * d
    p_d = best_q[rows, bone]
    return p_s, p_d, bone.astype(np.int64), d_best


def geodesic_knn(
    skeleton: HandSkeleton, p_d: np.ndarray, bone: int, k: int
) -> np.ndarray:
    """K nearest joints of a skeleton point, by distance along the bones.

    p_d must lie on the given bone (checked within 1e-6).  Distance runs
    along the bone to either endpoint, then through the tree; ties resolve
    by lowest joint index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > NUM_JOINTS:
        raise ValueError(f"k must be <= {NUM_JOINTS}")
    p_d = np.asarray(p_d, dtype=np.float64).reshape(3)
    b = skeleton.bones()[bone]
    a_pt, b_pt = skeleton.joints[b[0]], skeleton.joints[b[1]]
    u = b_pt - a_pt
    s = float(np.clip((p_d - a_pt) @ u / (u @ u), 0.0, 1.0))
    off = np.linalg.norm(a_pt + s * u - p_d)
    if off > 1e-6:
        raise ValueError(f"point is {off:.2e} away from bone {bone}")
    return _geodesic_knn_core(
        skeleton,
        np.array([bone]),
        np.array([[np.linalg.norm(p_d - a_pt), np.linalg.norm(p_d - b_pt)]]),
        k,
    )[0]


def geodesic_knn_batch(
    skeleton: HandSkeleton,
    p_d: np.ndarray,
    bone: np.ndarray,
    k: int,
) -> np.ndarray:
    """Vectorized geodesic_knn for points already known to sit on their bones."""
    if not 1 <= k <= NUM_JOINTS:
        raise ValueError(f"k must be in [1, {NUM_JOINTS}]")
    bones = skeleton.bones()
    a_pt = skeleton.joints[bones[bone, 0]]
    b_pt = skeleton.joints[bones[bone, 1]]
    ends = np.stack(
        [
            np.linalg.norm(p_d - a_pt, axis=1),
            np.linalg.norm(p_d - b_pt, axis=1),
        ],
        axis=1,
    )
    return _geodesic_knn_core(skeleton, bone, ends, k)


def _geodesic_knn_core(
    skeleton: HandSkeleton, bone: np.ndarray, end_dist: np.ndarray, k: int
) -> np.ndarray:
    tree = skeleton.tree_distances()
    bones = skeleton.bones()
    endpoint_ids = bones[bone]           # (N, 2) joint ids
    # route through whichever bone endpoint is cheaper per target joint
    via = end_dist[:, :, None] + tree[endpoint_ids]   # (N, 2, 21)
    dist = via.min(axis=1)                            # (N, 21)
    order = np.argsort(dist, axis=1, kind="stable")   # stable: ties by joint id
    return order[:, :k]


# ---------------------------------------------------------------------------
# embeddings


def local_intersection_feature(
    p_s: np.ndarray, skeleton: HandSkeleton, joint_ids: np.ndarray
) -> np.ndarray:
    """P_S expressed in each selected joint's frame, concatenated (3K values)."""
    joint_ids = np.asarray(joint_ids, dtype=np.int64).reshape(-1)
    if len(np.unique(joint_ids)) != len(joint_ids):
        raise ValueError("joint ids must be distinct")
    return local_intersection_feature_batch(
        np.asarray(p_s, dtype=np.float64).reshape(1, 3), skeleton,
        joint_ids[None, :],
    )[0]


def local_intersection_feature_batch(
    p_s: np.ndarray, skeleton: HandSkeleton, joint_ids: np.ndarray
) -> np.ndarray:
    """(N, 3K) local coordinates for N points and their per-point joint lists."""
    rot = skeleton.frame_rotations[joint_ids]       # (N, K, 3, 3)
    origin = skeleton.joints[joint_ids]             # (N, K, 3)
    rel = p_s[:, None, :] - origin
    local = np.einsum("nkab,nkb->nka", rot.transpose(0, 1, 3, 2), rel)
    n, k = joint_ids.shape
    return local.reshape(n, 3 * k)


def global_hand_embedding(ray: Ray, skeleton: HandSkeleton) -> np.ndarray:
    """Ray origin and direction in every joint frame: 21 * 6 = 126 values."""
    return global_hand_embedding_batch(
        RayBundle(ray.origin[None, :], ray.direction[None, :]), skeleton
    )[0]


def global_hand_embedding_batch(
    bundle: RayBundle, skeleton: HandSkeleton
) -> np.ndarray:
    rot_t = skeleton.frame_rotations.transpose(0, 2, 1)   # (21, 3, 3)
    rel = bundle.origins[:, None, :] - skeleton.joints[None, :, :]
    local_o = np.einsum("jab,njb->nja", rot_t, rel)
    local_d = np.einsum("jab,nb->nja", rot_t, bundle.directions)
    out = np.concatenate([local_o, local_d], axis=2)      # (N, 21, 6)
    return out.reshape(len(bundle), GLOBAL_EMBEDDING_SIZE)
