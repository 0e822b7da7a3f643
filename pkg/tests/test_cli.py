"""Command-line pipeline: every subcommand, exit codes, determinism."""

import hashlib
import json

import numpy as np
import pytest

from ddfield.cli import cli_main
from ddfield.formats import (
    load_checkpoint,
    load_ply,
    load_ray_dataset,
    save_mesh_obj,
    save_run_config,
    RunConfig,
)
from ddfield.geometry import make_icosphere
from ddfield.rays import SampleSet

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def sphere_obj(tmp_path):
    path = tmp_path / "sphere.obj"
    save_mesh_obj(path, make_icosphere(subdivisions=2, radius=0.6))
    return str(path)


def test_usage_errors_exit_1(capsys):
    assert cli_main(["no-such-command"]) == 1
    assert cli_main(["gen-rays"]) == 1          # missing required flags
    assert cli_main(["convert", "--out", "x.ply"]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err


def test_data_errors_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.obj")
    assert cli_main(["gen-gt", "--mesh", missing,
                     "--rays", missing, "--out", missing]) == 2
    assert "data error" in capsys.readouterr().err


def test_gen_rays_and_gt_pipeline(tmp_path, sphere_obj, capsys):
    rays_path = str(tmp_path / "rays.ddfr")
    gt_path = str(tmp_path / "gt.ddfr")
    assert cli_main(["gen-rays", "--n", "300", "--seed", "4",
                     "--out", rays_path]) == 0
    assert cli_main(["gen-gt", "--mesh", sphere_obj,
                     "--rays", rays_path, "--out", gt_path]) == 0
    samples = load_ray_dataset(gt_path)
    assert isinstance(samples, SampleSet)
    assert len(samples) == 300
    assert 0 < samples.xi.sum() < 300
    out = capsys.readouterr().out
    assert "visible" in out


def test_gen_rays_pairs_file_interleaves(tmp_path):
    rays_path = str(tmp_path / "rays.ddfr")
    pairs_path = str(tmp_path / "pairs.ddfr")
    assert cli_main(["gen-rays", "--n", "10", "--out", rays_path,
                     "--pairs-out", pairs_path, "--pairs", "6",
                     "--plane-normal", "0,1,0"]) == 0
    bundle = load_ray_dataset(pairs_path)
    assert len(bundle) == 12
    # paired rays share an origin; partner directions mirror across y
    np.testing.assert_allclose(bundle.origins[0::2], bundle.origins[1::2],
                               atol=1e-6)
    mirrored = bundle.directions[0::2].copy()
    mirrored[:, 1] *= -1
    np.testing.assert_allclose(bundle.directions[1::2], mirrored, atol=1e-6)


def test_make_pyramid_is_deterministic(tmp_path, sphere_obj):
    a, b = str(tmp_path / "a.ddfp"), str(tmp_path / "b.ddfp")
    base = ["make-pyramid", "--mesh", sphere_obj, "--height", "16",
            "--width", "16", "--channels", "3", "--levels", "2"]
    assert cli_main(base + ["--out", a]) == 0
    assert cli_main(base + ["--out", b]) == 0
    assert sha(a) == sha(b)


def _write_fit_inputs(tmp_path, sphere_obj):
    rays_path = str(tmp_path / "rays.ddfr")
    gt_path = str(tmp_path / "gt.ddfr")
    pyr_path = str(tmp_path / "p.ddfp")
    cfg_path = str(tmp_path / "run.json")
    assert cli_main(["gen-rays", "--n", "120", "--seed", "2",
                     "--out", rays_path]) == 0
    assert cli_main(["gen-gt", "--mesh", sphere_obj,
                     "--rays", rays_path, "--out", gt_path]) == 0
    assert cli_main(["make-pyramid", "--mesh", sphere_obj, "--height", "16",
                     "--width", "16", "--channels", "3", "--levels", "2",
                     "--out", pyr_path]) == 0
    config = RunConfig(
        width=16, pe_bands=(1, 1), epochs=2, batch=64, seed=0,
        rays=gt_path, pyramid=pyr_path, camera=(16, 16),
        out=str(tmp_path / "model.ddfn"),
    )
    save_run_config(cfg_path, config)
    return cfg_path, config


def test_fit_eval_convert_round_trip(tmp_path, sphere_obj):
    cfg_path, config = _write_fit_inputs(tmp_path, sphere_obj)
    assert cli_main(["fit", "--config", cfg_path]) == 0
    log = json.load(open(config.out + ".loss.json"))
    assert len(log) == 2 and log[0]["epoch"] == 0
    net = load_checkpoint(config.out)
    assert net.config.width == 16

    metrics_path = str(tmp_path / "m.json")
    assert cli_main(["eval", "--checkpoint", config.out,
                     "--mesh", sphere_obj, "--pyramid", config.pyramid,
                     "--points", "200", "--out", metrics_path]) == 0
    report = json.load(open(metrics_path))
    assert report["units"] == "mm2"
    assert 0.0 <= report["f5"] <= 1.0

    cloud_path = str(tmp_path / "c.ply")
    assert cli_main(["convert", "--checkpoint", config.out,
                     "--pyramid", config.pyramid, "--n", "100",
                     "--out", cloud_path]) == 0
    load_ply(cloud_path)


def test_fit_runs_are_hash_identical(tmp_path, sphere_obj):
    cfg_path, config = _write_fit_inputs(tmp_path, sphere_obj)
    out_a, out_b = str(tmp_path / "a.ddfn"), str(tmp_path / "b.ddfn")
    assert cli_main(["fit", "--config", cfg_path, "--out", out_a]) == 0
    assert cli_main(["fit", "--config", cfg_path, "--out", out_b]) == 0
    assert sha(out_a) == sha(out_b)
    assert sha(out_a + ".loss.json") == sha(out_b + ".loss.json")


def test_fit_rejects_rays_without_ground_truth(tmp_path, sphere_obj, capsys):
    cfg_path, config = _write_fit_inputs(tmp_path, sphere_obj)
    raw = json.load(open(cfg_path))
    rays_only = str(tmp_path / "plain.ddfr")
    assert cli_main(["gen-rays", "--n", "50", "--out", rays_only]) == 0
    raw["rays"] = rays_only
    json.dump(raw, open(cfg_path, "w"))
    assert cli_main(["fit", "--config", cfg_path]) == 2
    assert "ground truth" in capsys.readouterr().err


def test_eval_identity_clouds(tmp_path, sphere_obj, capsys):
    cloud_path = str(tmp_path / "cloud.ply")
    assert cli_main(["convert", "--mesh", sphere_obj, "--n", "500",
                     "--out", cloud_path]) == 0
    capsys.readouterr()
    assert cli_main(["eval", "--pred", cloud_path, "--gt", cloud_path]) == 0
    report = json.loads(capsys.readouterr().out.strip())
    assert report["f5"] == 1.0 and report["f10"] == 1.0 and report["cd"] == 0.0


def test_convert_mesh_field_to_obj(tmp_path, sphere_obj):
    out = str(tmp_path / "surface.obj")
    assert cli_main(["convert", "--mesh", sphere_obj, "--out", out,
                     "--resolution", "24", "--directions", "12"]) == 0
    from ddfield.formats import load_mesh_obj

    surf = load_mesh_obj(out)
    radii = np.linalg.norm(surf.vertices, axis=1)
    assert np.percentile(np.abs(radii - 0.6), 95) < 0.12


def test_gradcheck_passes_and_reports(capsys):
    assert cli_main(["gradcheck", "--seed", "7", "--samples", "4"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "PASS" in out
