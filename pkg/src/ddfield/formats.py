"""On-disk formats: ray datasets, checkpoints, pyramids, PLY/OBJ, configs.

Binary layouts are little-endian with f32 payloads (f64 stays in memory);
every loader re-validates the stored invariants and names the first field
that fails.  JSON carries the human-auditable control plane: run configs
and metric reports.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from .geometry import TriangleMesh
from .network import DdfNetwork, NetworkConfig
from .projection import FeaturePyramid, PyramidLevel
from .rays import RayBundle, SampleSet
from .training import TrainConfig

__all__ = [
    "RunConfig",
    "load_checkpoint",
    "load_mesh_obj",
    "load_ply",
    "load_pyramid",
    "load_ray_dataset",
    "load_run_config",
    "save_checkpoint",
    "save_mesh_obj",
    "save_ply",
    "save_pyramid",
    "save_ray_dataset",
]

MAGIC_RAYS = b"DDFR"
MAGIC_NET = b"DDFN"
MAGIC_PYRAMID = b"DDFP"
VERSION = 1
FLAG_GROUND_TRUTH = 1
SEED_ENV_VAR = "DDF_SEED"

_HEADER = struct.Struct("<4sHQH")      # magic, version, count, flags
_UNIT_FILE_TOL = 1e-6


class FileFormatError(ValueError):
    """A file violated its format contract; message names the field."""


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated file while reading {what}")
    return data


def _check_header(data: bytes, magic: bytes) -> tuple[int, int]:
    got_magic, version, count, flags = _HEADER.unpack(data)
    if got_magic != magic:
        raise FileFormatError(
            f"magic: expected {magic.decode()}, got {got_magic!r}"
        )
    if version != VERSION:
        raise FileFormatError(f"version: unsupported {version}")
    return count, flags


# ---------------------------------------------------------------------------
# ray datasets (DDFR)


def save_ray_dataset(path, data: SampleSet | RayBundle) -> None:
    """Rays, or rays plus ground truth, as packed little-endian records."""
    has_gt = isinstance(data, SampleSet)
    rays = data.rays if has_gt else data
    n = len(rays)
    flags = FLAG_GROUND_TRUTH if has_gt else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC_RAYS, VERSION, n, flags))
        f.write(rays.origins.astype("<f4").tobytes())
        f.write(rays.directions.astype("<f4").tobytes())
        if has_gt:
            f.write(data.xi.astype("u1").tobytes())
            f.write(data.depth.astype("<f4").tobytes())


def load_ray_dataset(path) -> SampleSet | RayBundle:
    """Inverse of save_ray_dataset; the flags bit decides the return type.

    Stored directions are checked against the 1e-6 file invariant, then
    re-normalized to shed f32 quantization before entering RayBundle.
    """
    with open(path, "rb") as f:
        count, flags = _check_header(
            _read_exact(f, _HEADER.size, "header"), MAGIC_RAYS
        )
        origins = np.frombuffer(
            _read_exact(f, 12 * count, "origins"), dtype="<f4"
        ).astype(np.float64).reshape(count, 3)
        directions = np.frombuffer(
            _read_exact(f, 12 * count, "directions"), dtype="<f4"
        ).astype(np.float64).reshape(count, 3)
        norms = np.linalg.norm(directions, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_FILE_TOL):
            raise FileFormatError("directions: stored rows are not unit length")
        rays = RayBundle(origins, directions / norms[:, None])
        if not flags & FLAG_GROUND_TRUTH:
            if f.read(1):
                raise FileFormatError("record count: trailing bytes after rays")
            return rays
        xi = np.frombuffer(_read_exact(f, count, "xi"), dtype="u1").astype(np.int8)
        depth = np.frombuffer(
            _read_exact(f, 4 * count, "depth"), dtype="<f4"
        ).astype(np.float64)
        if f.read(1):
            raise FileFormatError("record count: trailing bytes after records")
    try:
        return SampleSet(rays, xi, depth)
    except ValueError as e:
        raise FileFormatError(f"ground truth: {e}") from e


# ---------------------------------------------------------------------------
# checkpoints (DDFN)


def save_checkpoint(path, net: DdfNetwork) -> None:
    """Config echo plus every named parameter, f32, in canonical order."""
    cfg = net.config
    blob = json.dumps({
        "width": cfg.width,
        "pe_bands_origin": cfg.pe_bands_origin,
        "pe_bands_dir": cfg.pe_bands_dir,
        "heads": cfg.heads,
        "image_channels": cfg.image_channels,
        "local_neighbors": cfg.local_neighbors,
    }, sort_keys=True).encode()
    named = net.parameters()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC_NET, VERSION, len(named), 0))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, p in named:
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path) -> DdfNetwork:
    """Rebuild the network from the config echo and stored parameters."""
    with open(path, "rb") as f:
        count, _ = _check_header(
            _read_exact(f, _HEADER.size, "header"), MAGIC_NET
        )
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            cfg_dict = json.loads(_read_exact(f, blob_len, "config"))
            config = NetworkConfig(**cfg_dict)
        except (ValueError, TypeError) as e:
            raise FileFormatError(f"config: {e}") from e
        stored = {}
        order = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(
                _read_exact(f, 4 * size, f"data for {name}"), dtype="<f4"
            ).astype(np.float64).reshape(shape)
            stored[name] = data
            order.append(name)
        if f.read(1):
            raise FileFormatError("record count: trailing bytes after parameters")

    net = DdfNetwork.create(config, seed=0)
    named = net.parameters()
    expect = [name for name, _ in named]
    if order != expect:
        raise FileFormatError("parameter blocks: name order mismatch")
    for name, p in named:
        if stored[name].shape != p.data.shape:
            raise FileFormatError(f"parameter {name}: shape mismatch")
        p.data = stored[name]
    return net


# ---------------------------------------------------------------------------
# feature pyramids (DDFP)


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC_PYRAMID, VERSION, len(pyramid.levels), 0))
        for level in pyramid.levels:
            f.write(struct.pack(
                "<III", level.height, level.width, level.channels
            ))
            f.write(level.data.astype("<f4").tobytes())


def load_pyramid(path) -> FeaturePyramid:
    with open(path, "rb") as f:
        count, _ = _check_header(
            _read_exact(f, _HEADER.size, "header"), MAGIC_PYRAMID
        )
        levels = []
        for i in range(count):
            h, w, c = struct.unpack("<III", _read_exact(f, 12, "level shape"))
            data = np.frombuffer(
                _read_exact(f, 4 * h * w * c, f"level {i} data"), dtype="<f4"
            ).astype(np.float64).reshape(h, w, c)
            levels.append(PyramidLevel(data))
        if f.read(1):
            raise FileFormatError("record count: trailing bytes after levels")
    try:
        return FeaturePyramid(levels)
    except ValueError as e:
        raise FileFormatError(f"levels: {e}") from e


# ---------------------------------------------------------------------------
# PLY point clouds


def save_ply(path, cloud, binary: bool = False) -> None:
    """Vertex-only PLY; the frame scale rides in a comment."""
    from .recon import PointCloud

    assert isinstance(cloud, PointCloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"comment scale_mm {cloud.scale_mm!r}\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    points = cloud.points.astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode())
        if binary:
            f.write(points.tobytes())
        else:
            # 9 significant digits round-trip any f32 exactly
            lines = "\n".join(
                f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in points
            )
            f.write(lines.encode())
            if len(cloud):
                f.write(b"\n")


def load_ply(path):
    from .recon import PointCloud

    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FileFormatError("header: not a PLY file")
    header_lines = raw[:end].decode().splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    count = None
    scale_mm = 1.0
    props = []
    for line in header_lines[1:]:
        parts = line.split()
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) == 3 and parts[1] == "scale_mm":
            scale_mm = float(parts[2])
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise FileFormatError(f"element: unsupported {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"format: unsupported {fmt}")
    if count is None:
        raise FileFormatError("element: vertex count missing")
    if props != ["x", "y", "z"]:
        raise FileFormatError("property: expected exactly float x, y, z")

    if fmt == "ascii":
        points = np.array(
            [float(v) for v in body.split()], dtype=np.float64
        )
    else:
        if len(body) < 12 * count:
            raise FileFormatError("truncated file while reading vertices")
        points = np.frombuffer(body[: 12 * count], dtype="<f4").astype(np.float64)
    if points.size != 3 * count:
        raise FileFormatError("element: vertex count does not match body")
    return PointCloud(points.reshape(count, 3), scale_mm=scale_mm)


# ---------------------------------------------------------------------------
# OBJ meshes


def save_mesh_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def load_mesh_obj(path) -> TriangleMesh:
    """Vertices and fan-triangulated faces; everything else is skipped.

    Indices are 1-based per the OBJ convention; `v/vt/vn` face forms keep
    only the vertex index.
    """
    vertices = []
    faces = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FileFormatError(
                        f"line {lineno}: vertex needs 3 coordinates"
                    )
                try:
                    vertices.append([float(v) for v in parts[1:4]])
                except ValueError:
                    raise FileFormatError(
                        f"line {lineno}: malformed vertex coordinate"
                    ) from None
            else:
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise FileFormatError(
                        f"line {lineno}: malformed face index"
                    ) from None
                if len(idx) < 3:
                    raise FileFormatError(
                        f"line {lineno}: face needs at least 3 vertices"
                    )
                if any(i <= 0 for i in idx):
                    raise FileFormatError(
                        f"line {lineno}: OBJ indices are 1-based"
                    )
                for k in range(1, len(idx) - 1):      # polygon fan
                    faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
    if not faces:
        raise FileFormatError("mesh has zero faces")
    try:
        return TriangleMesh(np.array(vertices, dtype=np.float64),
                            np.array(faces, dtype=np.int64))
    except ValueError as e:
        raise FileFormatError(str(e)) from e


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a run needs, JSON-serializable with strict keys.

    `K_l` counts 2D line samples, `K_3D` local skeleton neighbors; the
    pe_bands pair is (origin bands, direction bands).
    """

    width: int = 128
    pe_bands: tuple[int, int] = (6, 4)
    heads: int = 2
    K_l: int = 8
    K_3D: int = 8
    lambda1: float = 5.0
    lambda2: float = 0.5
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 512
    seed: int = 0
    mesh: str | None = None
    rays: str | None = None
    pyramid: str | None = None
    out: str | None = None
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    camera: tuple[int, int] = (64, 64)
    symmetry_plane: dict | None = None

    def __post_init__(self):
        self.pe_bands = tuple(self.pe_bands)
        if len(self.pe_bands) != 2:
            raise ValueError("pe_bands must be a (origin, direction) pair")
        if self.K_l < 1 or self.K_3D < 1:
            raise ValueError("K_l and K_3D must be positive")
        if self.symmetry_plane is not None:
            if set(self.symmetry_plane) != {"point", "normal"}:
                raise ValueError("symmetry_plane needs exactly point and normal")

    def network_config(self, image_channels: int) -> NetworkConfig:
        return NetworkConfig(
            width=self.width,
            pe_bands_origin=self.pe_bands[0],
            pe_bands_dir=self.pe_bands[1],
            heads=self.heads,
            image_channels=image_channels,
            local_neighbors=self.K_3D,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, lr=self.lr,
            epochs=self.epochs, batch=self.batch, seed=self.seed,
        )

    def as_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            value = getattr(self, f_.name)
            if isinstance(value, tuple):
                value = _tuples_to_lists(value)
            out[f_.name] = value
        return out


def _tuples_to_lists(value):
    if isinstance(value, tuple):
        return [_tuples_to_lists(v) for v in value]
    return value


def load_run_config(path) -> RunConfig:
    """Parse and validate a config file; DDF_SEED overrides the seed."""
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise FileFormatError("config: top level must be an object")
    known = {f_.name for f_ in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise FileFormatError(f"config: unknown key {unknown[0]!r}")
    if "bounds" in raw:
        raw["bounds"] = tuple(tuple(side) for side in raw["bounds"])
    for key in ("pe_bands", "camera"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        config = RunConfig(**raw)
    except (TypeError, ValueError) as e:
        raise FileFormatError(f"config: {e}") from e
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise FileFormatError(
                f"config: {SEED_ENV_VAR} must be an integer"
            ) from None
    return config


def save_run_config(path, config: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(config.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
