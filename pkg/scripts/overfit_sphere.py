"""Overfit the field network to a unit sphere and score the reconstruction.

Runs the whole pipeline on synthetic inputs: cast ground-truth rays against
an icosphere, extract projected-image / hand-skeleton features, fit the
network, then shoot inward rays from a shell and compare the recovered
point cloud against the exact sphere.  With the defaults this takes about
two minutes single-threaded and ends well above 0.98 held-out visibility
accuracy with an F-score of 1.0.

Usage:
    python scripts/overfit_sphere.py [--epochs 100] [--out sphere.ddfn]
"""

import argparse
import time

import numpy as np

from ddfield.features import FeatureExtractor
from ddfield.formats import save_checkpoint, save_ply
from ddfield.geometry import make_icosphere
from ddfield.hand import load_rest_skeleton
from ddfield.network import DdfNetwork, NetworkConfig
from ddfield.projection import default_camera, make_synthetic_pyramid
from ddfield.rays import (
    RayBundle,
    SymmetryPlane,
    aim_directions_at_ball,
    canonicalize_to_shell,
    generate_ground_truth,
    make_symmetry_pairs,
    sample_rays_uniform,
    unit_cube,
)
from ddfield.recon import PointCloud, f_score, fibonacci_directions
from ddfield.seeding import Stream, rng
from ddfield.training import PairData, TrainConfig, TrainingData, fit, predict


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=20000)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--seed", type=int, default=11, help="ray sampling seed")
    ap.add_argument("--net-seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="checkpoint path (.ddfn)")
    ap.add_argument("--cloud", default=None, help="reconstructed cloud path (.ply)")
    args = ap.parse_args()

    start = time.time()
    center = np.zeros(3)
    radius, shell = 1.0, 1.2
    mesh = make_icosphere(subdivisions=4, radius=radius)
    camera = default_camera(64, 64)
    pyramid = make_synthetic_pyramid(mesh, camera, seed=0)
    extractor = FeatureExtractor(pyramid, camera, load_rest_skeleton())

    # half the directions aim at a ball inside the sphere (plentiful head-on
    # hits), and every origin slides onto a fixed shell around the object
    n = args.rays
    raw = sample_rays_uniform(unit_cube(), n, seed=args.seed)
    origins, directions = raw.origins.copy(), raw.directions.copy()
    directions[: n // 2] = aim_directions_at_ball(
        origins[: n // 2], center, 0.7, seed=args.seed
    )
    rays = canonicalize_to_shell(RayBundle(origins, directions), center, shell)
    samples = generate_ground_truth(mesh, rays)
    print(f"rays cast: {n}, visible: {int(samples.xi.sum())}")

    perm = rng(args.seed, Stream.HOLDOUT_SPLIT).permutation(n)
    split = int(0.9 * n)
    train_idx, test_idx = perm[:split], perm[split:]
    feats = extractor.extract(rays)
    data = TrainingData(
        feats.take(train_idx), samples.xi[train_idx], samples.depth[train_idx]
    )

    plane = SymmetryPlane(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    mirrored = make_symmetry_pairs(plane, 2000, seed=args.seed)
    side_a = canonicalize_to_shell(
        RayBundle(mirrored.origins, mirrored.directions_a), center, shell
    )
    side_b = canonicalize_to_shell(
        RayBundle(mirrored.origins, mirrored.directions_b), center, shell
    )
    pairs = PairData(extractor.extract(side_a), extractor.extract(side_b))

    net = DdfNetwork.create(
        NetworkConfig(image_channels=pyramid.total_channels), seed=args.net_seed
    )
    config = TrainConfig(epochs=args.epochs, batch=args.batch, seed=args.net_seed)
    logs = fit(net, data, config, pairs=pairs)
    print(f"final losses: {logs[-1]}")

    prob, dist = predict(net, feats.take(test_idx))
    accuracy = ((prob > 0.5).astype(np.int8) == samples.xi[test_idx]).mean()
    hit = samples.xi[test_idx] == 1
    depth_mae = np.abs(dist[hit] - samples.depth[test_idx][hit]).mean()

    look = fibonacci_directions(10000)
    eval_rays = RayBundle(center + shell * look, -look)
    eval_prob, eval_dist = predict(net, extractor.extract(eval_rays))
    visible = eval_prob > 0.5
    points = (eval_rays.origins + eval_dist[:, None] * eval_rays.directions)[visible]
    cloud = PointCloud(points)
    reference = PointCloud(center + radius * fibonacci_directions(10000))
    bounds = unit_cube()
    tau = 0.01 * float(np.linalg.norm(bounds.max - bounds.min))
    f = f_score(cloud, reference, tau)

    print(
        f"held-out visibility accuracy: {accuracy:.4f}\n"
        f"held-out visible depth MAE:   {depth_mae:.4f}\n"
        f"reconstruction F-score:       {f:.4f} ({len(cloud)} points, tau={tau:.4f})\n"
        f"elapsed: {time.time() - start:.0f}s"
    )
    if args.out:
        save_checkpoint(args.out, net)
        print(f"checkpoint -> {args.out}")
    if args.cloud:
        save_ply(args.cloud, cloud)
        print(f"cloud -> {args.cloud}")


if __name__ == "__main__":
    main()
