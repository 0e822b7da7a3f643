"""Command-line surface: generate -> fit -> evaluate -> convert.

Exit codes: 0 success, 1 usage error, 2 data error.  Every command is
deterministic given its flags (and DDF_SEED, which overrides config
seeds), so reruns produce byte-identical output files.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .features import FeatureExtractor
from .formats import (
    FileFormatError,
    load_checkpoint,
    load_mesh_obj,
    load_ply,
    load_pyramid,
    load_ray_dataset,
    load_run_config,
    save_checkpoint,
    save_mesh_obj,
    save_ply,
    save_pyramid,
    save_ray_dataset,
)
from .geometry import normalize_mesh
from .hand import load_rest_skeleton
from .network import DdfNetwork
from .projection import default_camera, make_synthetic_pyramid
from .rays import (
    BoundingVolume,
    RayBundle,
    SampleSet,
    SymmetryPlane,
    generate_ground_truth,
    make_symmetry_pairs,
    sample_rays_surface_biased,
    sample_rays_uniform,
)
from .recon import (
    MeshFieldEvaluator,
    NetworkFieldEvaluator,
    compute_metrics,
    ddf_to_mesh,
    ddf_to_pointcloud,
    sample_mesh_surface,
)
from .training import PairData, TrainingData, fit, gradient_check

__all__ = ["cli_main", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with 2."""

    def error(self, message):
        raise _UsageError(message)


def _box(extent: float) -> BoundingVolume:
    return BoundingVolume(min=-extent * np.ones(3), max=extent * np.ones(3))


def _vector(text: str) -> np.ndarray:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated values, got {text!r}")
    return np.array(parts)


def _interleave_pairs(pairs) -> RayBundle:
    n = len(pairs.origins)
    origins = np.repeat(pairs.origins, 2, axis=0)
    directions = np.empty((2 * n, 3))
    directions[0::2] = pairs.directions_a
    directions[1::2] = pairs.directions_b
    return RayBundle(origins, directions)


def _split_pairs(bundle: RayBundle) -> tuple[RayBundle, RayBundle]:
    if len(bundle) % 2:
        raise FileFormatError("pair file must hold an even ray count")
    return (
        RayBundle(bundle.origins[0::2], bundle.directions[0::2]),
        RayBundle(bundle.origins[1::2], bundle.directions[1::2]),
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_rays(args) -> int:
    box = _box(args.extent)
    if args.surface_mesh:
        mesh = load_mesh_obj(args.surface_mesh)
        rays = sample_rays_surface_biased(
            box, mesh, args.n, args.seed,
            surface_fraction=args.surface_fraction, band=args.band,
        )
    else:
        rays = sample_rays_uniform(box, args.n, args.seed)
    save_ray_dataset(args.out, rays)
    print(f"wrote {args.n} rays to {args.out}")
    if args.pairs_out:
        plane = SymmetryPlane(
            point=_vector(args.plane_point), normal=_vector(args.plane_normal)
        )
        pairs = make_symmetry_pairs(plane, args.pairs, args.seed,
                                    extent=args.extent)
        save_ray_dataset(args.pairs_out, _interleave_pairs(pairs))
        print(f"wrote {args.pairs} mirrored pairs to {args.pairs_out}")
    return EXIT_OK


def _cmd_gen_gt(args) -> int:
    mesh = load_mesh_obj(args.mesh)
    if args.normalize:
        mesh, scale, _ = normalize_mesh(mesh)
        print(f"normalized mesh into [-0.9, 0.9]^3 (scale {scale:.6g})")
    loaded = load_ray_dataset(args.rays)
    rays = loaded.rays if isinstance(loaded, SampleSet) else loaded
    samples = generate_ground_truth(mesh, rays)
    save_ray_dataset(args.out, samples)
    visible = int(samples.xi.sum())
    print(f"wrote {len(samples)} samples ({visible} visible) to {args.out}")
    return EXIT_OK


def _cmd_make_pyramid(args) -> int:
    mesh = load_mesh_obj(args.mesh)
    camera = default_camera(args.height, args.width)
    pyramid = make_synthetic_pyramid(
        mesh, camera,
        base_height=args.height, base_width=args.width,
        channels=args.channels, num_levels=args.levels, seed=args.seed,
    )
    save_pyramid(args.out, pyramid)
    print(f"wrote {args.levels}-level pyramid "
          f"({pyramid.total_channels} channels) to {args.out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    config = load_run_config(args.config)
    for name in ("rays", "pyramid"):
        if getattr(config, name) is None:
            raise FileFormatError(f"config: {name} path is required for fit")
    out = args.out or config.out
    if out is None:
        raise FileFormatError("config: no checkpoint output path")

    samples = load_ray_dataset(config.rays)
    if not isinstance(samples, SampleSet):
        raise FileFormatError("rays: fit needs ground truth (run gen-gt)")
    pyramid = load_pyramid(config.pyramid)
    camera = default_camera(*config.camera)
    extractor = FeatureExtractor(
        pyramid, camera, load_rest_skeleton(),
        line_samples=config.K_l, local_neighbors=config.K_3D,
    )
    data = TrainingData(
        extractor.extract(samples.rays), samples.xi, samples.depth
    )
    pairs = None
    if args.pairs:
        side_a, side_b = _split_pairs(load_ray_dataset(args.pairs))
        pairs = PairData(extractor.extract(side_a), extractor.extract(side_b))

    net = DdfNetwork.create(
        config.network_config(pyramid.total_channels), seed=config.seed
    )
    logs = fit(net, data, config.train_config(), pairs=pairs)
    save_checkpoint(out, net)
    log_path = args.log or f"{out}.loss.json"
    with open(log_path, "w") as f:
        json.dump(logs, f, sort_keys=True)
        f.write("\n")
    print(f"final loss {logs[-1]['total']:.6f}; "
          f"checkpoint {out}, log {log_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.pred:
        if not args.gt:
            raise _UsageError("--pred needs --gt")
        pred = load_ply(args.pred)
        gt = load_ply(args.gt)
    else:
        if not (args.checkpoint and args.mesh and args.pyramid):
            raise _UsageError(
                "eval needs either --pred/--gt clouds or "
                "--checkpoint/--mesh/--pyramid"
            )
        mesh = load_mesh_obj(args.mesh)
        net = load_checkpoint(args.checkpoint)
        pyramid = load_pyramid(args.pyramid)
        extractor = FeatureExtractor(pyramid, default_camera(64, 64),
                                     load_rest_skeleton())
        field = NetworkFieldEvaluator(net, extractor)
        rays = sample_rays_uniform(_box(1.0), 4 * args.points, args.seed)
        cloud = ddf_to_pointcloud(field, rays, scale_mm=args.scale)
        if len(cloud) == 0:
            raise FileFormatError("checkpoint: field sees nothing on eval rays")
        pred = cloud if len(cloud) <= args.points else type(cloud)(
            cloud.points[: args.points], scale_mm=cloud.scale_mm
        )
        gt = sample_mesh_surface(mesh, args.points, args.seed,
                                 scale_mm=args.scale)
    report = compute_metrics(pred, gt).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_convert(args) -> int:
    if bool(args.mesh) == bool(args.checkpoint):
        raise _UsageError("convert needs exactly one of --mesh / --checkpoint")
    if args.mesh:
        field = MeshFieldEvaluator(load_mesh_obj(args.mesh))
    else:
        if not args.pyramid:
            raise _UsageError("--checkpoint conversion needs --pyramid")
        net = load_checkpoint(args.checkpoint)
        pyramid = load_pyramid(args.pyramid)
        extractor = FeatureExtractor(pyramid, default_camera(64, 64),
                                     load_rest_skeleton())
        field = NetworkFieldEvaluator(net, extractor)

    out = args.out
    if out.endswith(".ply"):
        rays = sample_rays_uniform(_box(args.extent), args.n, args.seed)
        cloud = ddf_to_pointcloud(field, rays, scale_mm=args.scale)
        save_ply(out, cloud, binary=args.binary)
        print(f"wrote {len(cloud)} points to {out}")
    elif out.endswith(".obj"):
        mesh = ddf_to_mesh(
            field, grid_resolution=args.resolution,
            directions_per_point=args.directions,
            iso=args.iso, bounds=_box(args.extent),
        )
        save_mesh_obj(out, mesh)
        print(f"wrote {mesh.num_faces} faces to {out}")
    else:
        raise _UsageError("--out must end in .ply or .obj")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from ddfield.network import NetworkConfig

    g = np.random.default_rng(args.seed)
    channels, neighbors = 4, 2
    config = NetworkConfig(
        width=args.width, pe_bands_origin=1, pe_bands_dir=1,
        image_channels=channels, local_neighbors=neighbors,
    )
    net = DdfNetwork.create(config, seed=args.seed)

    from .features import FeatureBundle

    n = args.samples
    directions = g.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    feats = FeatureBundle(
        origins=g.uniform(-1, 1, size=(n, 3)),
        directions=directions,
        pixel_feats=g.normal(size=(n, channels)),
        line_feats=g.normal(size=(n, 3, channels)),
        line_valid=np.ones(n, dtype=bool),
        skeleton_feats=g.normal(size=(n, 126)),
        contact_feats=g.normal(size=(n, 3 * neighbors)),
    )
    visible = (g.uniform(size=n) > 0.4).astype(np.int8)
    depth = np.where(visible == 1, g.uniform(0.5, 2.0, size=n), np.nan)
    report = gradient_check(net, TrainingData(feats, visible, depth))
    print(f"max relative error {report.max_rel_error:.3e} "
          f"(worst: {report.worst_parameter})")
    if not report.passed(tol=args.tol):
        print(f"FAIL: above tolerance {args.tol:g}", file=sys.stderr)
        return EXIT_DATA
    print(f"PASS: within tolerance {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="ddf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rays", help="sample a ray dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--surface-mesh", help="bias origins near this mesh")
    p.add_argument("--surface-fraction", type=float, default=0.5)
    p.add_argument("--band", type=float, default=0.1)
    p.add_argument("--pairs-out", help="also write mirrored pairs here")
    p.add_argument("--pairs", type=int, default=0)
    p.add_argument("--plane-point", default="0,0,0")
    p.add_argument("--plane-normal", default="1,0,0")
    p.set_defaults(run=_cmd_gen_rays)

    p = sub.add_parser("gen-gt", help="cast rays against a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--rays", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(run=_cmd_gen_gt)

    p = sub.add_parser("make-pyramid", help="synthetic feature pyramid")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_make_pyramid)

    p = sub.add_parser("fit", help="train a network from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="checkpoint path (overrides config)")
    p.add_argument("--log", help="loss log path")
    p.add_argument("--pairs", help="interleaved pair dataset from gen-rays")
    p.set_defaults(run=_cmd_fit)

    p = sub.add_parser("eval", help="metrics between clouds or vs a mesh")
    p.add_argument("--pred", help="predicted cloud (.ply)")
    p.add_argument("--gt", help="ground-truth cloud (.ply)")
    p.add_argument("--checkpoint")
    p.add_argument("--mesh")
    p.add_argument("--pyramid")
    p.add_argument("--points", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0,
                   help="millimetres per working unit")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("convert", help="field to .ply cloud or .obj mesh")
    p.add_argument("--mesh", help="exact field from this mesh")
    p.add_argument("--checkpoint", help="learned field from this checkpoint")
    p.add_argument("--pyramid")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--resolution", type=int, default=48)
    p.add_argument("--directions", type=int, default=32)
    p.add_argument("--iso", type=float)
    p.set_defaults(run=_cmd_convert)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(run=_cmd_gradcheck)

    return parser


def cli_main(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.run(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileFormatError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
