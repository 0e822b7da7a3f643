"""Loss assembly, Adam, the fit loop, prediction, and the gradient audit."""

import math

import numpy as np
import pytest

from ddfield.autodiff import parameter, tensor
from ddfield.features import FeatureBundle
from ddfield.network import DdfNetwork, NetworkConfig
from ddfield.training import (
    AdamState,
    LossBreakdown,
    PairData,
    TrainConfig,
    TrainingData,
    adam_step,
    fit,
    gradient_check,
    loss_terms,
    predict,
)

CHANNELS = 4
NEIGHBORS = 2
LINE_SAMPLES = 3


def tiny_config() -> NetworkConfig:
    return NetworkConfig(
        width=16,
        pe_bands_origin=1,
        pe_bands_dir=1,
        heads=2,
        image_channels=CHANNELS,
        local_neighbors=NEIGHBORS,
    )


def synthetic_bundle(n: int, seed: int) -> FeatureBundle:
    g = np.random.default_rng(seed)
    directions = g.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return FeatureBundle(
        origins=g.uniform(-1, 1, size=(n, 3)),
        directions=directions,
        pixel_feats=g.normal(size=(n, CHANNELS)),
        line_feats=g.normal(size=(n, LINE_SAMPLES, CHANNELS)),
        line_valid=np.ones(n, dtype=bool),
        skeleton_feats=g.normal(size=(n, 126)),
        contact_feats=g.normal(size=(n, 3 * NEIGHBORS)),
    )


def synthetic_data(n: int, seed: int) -> TrainingData:
    feats = synthetic_bundle(n, seed)
    visible = (feats.origins[:, 0] > 0).astype(np.int8)
    depth = np.where(visible == 1, 1.0 + 0.1 * feats.origins[:, 1], np.nan)
    return TrainingData(feats, visible, depth)


# ---------------------------------------------------------------------------
# loss


def test_loss_breakdown_total_identity_enforced():
    LossBreakdown(0.1, 0.2, 0.4, lambda1=5.0, lambda2=0.5, total=1.3)
    with pytest.raises(ValueError):
        LossBreakdown(0.1, 0.2, 0.4, lambda1=5.0, lambda2=0.5, total=1.0)
    with pytest.raises(ValueError):
        LossBreakdown(-0.1, 0.2, 0.4, lambda1=5.0, lambda2=0.5, total=0.0)


def test_loss_terms_hand_computed():
    vis_logits = tensor([0.0])
    d_hats = tensor([1.5])
    total, bd = loss_terms(
        vis_logits, d_hats,
        visible=np.array([1]), depth=np.array([1.3]),
        lambda1=5.0, lambda2=0.5,
        pair_preds=(tensor([2.0]), tensor([1.2])),
    )
    assert bd.l_vis == pytest.approx(math.log(2.0), abs=1e-12)
    assert bd.l_depth == pytest.approx(0.2, abs=1e-12)
    assert bd.l_sym == pytest.approx(0.8, abs=1e-12)
    assert total.item() == pytest.approx(math.log(2.0) + 1.0 + 0.4, abs=1e-12)
    assert bd.total == pytest.approx(total.item(), abs=1e-12)


def test_loss_invisible_rays_carry_no_depth_signal():
    total, bd = loss_terms(
        tensor([0.0, 0.0]), tensor([0.7, 0.9]),
        visible=np.array([0, 0]), depth=np.array([np.nan, np.nan]),
        lambda1=5.0, lambda2=0.5,
    )
    assert bd.l_depth == 0.0
    assert np.isfinite(total.item())


def test_loss_depth_gate_narrows_supervision():
    # second ray visible but withheld from the depth term by the gate
    _, bd = loss_terms(
        tensor([3.0, 3.0]), tensor([1.4, 9.0]),
        visible=np.array([1, 1]), depth=np.array([1.0, 2.0]),
        lambda1=1.0, lambda2=0.0,
        depth_gate=np.array([True, False]),
    )
    assert bd.l_depth == pytest.approx(0.4 / 2, abs=1e-12)


def test_loss_rejects_mismatched_lengths():
    with pytest.raises(ValueError, match="length"):
        loss_terms(
            tensor([0.0, 0.0]), tensor([1.0, 1.0]),
            visible=np.array([1]), depth=np.array([1.0]),
            lambda1=1.0, lambda2=0.0,
        )


def test_loss_without_pairs_omits_symmetry_node():
    total, bd = loss_terms(
        tensor([0.5]), tensor([1.0]),
        visible=np.array([1]), depth=np.array([0.8]),
        lambda1=2.0, lambda2=0.5,
    )
    assert bd.l_sym == 0.0
    assert total.item() == pytest.approx(bd.l_vis + 2.0 * bd.l_depth, abs=1e-12)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_no_gradient_means_no_movement():
    p = parameter(np.array([1.0, -2.0]))
    state = AdamState.create([p], lr=0.1)
    adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_follows_gradient_sign():
    p = parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -0.7, 2.0])
    state = AdamState.create([p], lr=1e-2)
    adam_step([p], state)
    expected = np.array([1.0, -2.0, 0.5]) - 1e-2 * np.sign(p.grad)
    np.testing.assert_allclose(p.data, expected, atol=1e-6)


def test_adam_rejects_foreign_parameter_list():
    p = parameter(np.zeros(2))
    q = parameter(np.zeros(2))
    state = AdamState.create([p], lr=0.1)
    with pytest.raises(ValueError):
        adam_step([p, q], state)


def test_adam_is_deterministic():
    def run():
        p = parameter(np.array([0.4, -0.4]))
        state = AdamState.create([p], lr=1e-3)
        for step in range(5):
            p.grad = np.array([1.0, -1.0]) * (step + 1)
            adam_step([p], state)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# training data plumbing


def test_training_data_gate_cannot_cover_misses():
    feats = synthetic_bundle(4, seed=0)
    visible = np.array([1, 0, 1, 0], dtype=np.int8)
    depth = np.where(visible == 1, 1.0, np.nan)
    with pytest.raises(ValueError, match="invisible"):
        TrainingData(feats, visible, depth,
                     depth_gate=np.array([True, True, False, False]))


def test_fit_rejects_empty_dataset():
    data = synthetic_data(0, seed=0)
    net = DdfNetwork.create(tiny_config(), seed=3)
    with pytest.raises(ValueError, match="empty"):
        fit(net, data, TrainConfig(epochs=1, batch=8, seed=0))


# ---------------------------------------------------------------------------
# fit loop


def test_fit_reduces_training_loss():
    data = synthetic_data(60, seed=1)
    net = DdfNetwork.create(tiny_config(), seed=3)
    logs = fit(net, data, TrainConfig(epochs=30, batch=16, seed=0, lr=1e-3))
    assert logs[-1]["total"] < logs[0]["total"]


def test_fit_log_records_are_complete():
    data = synthetic_data(20, seed=2)
    net = DdfNetwork.create(tiny_config(), seed=3)
    logs = fit(net, data, TrainConfig(epochs=3, batch=8, seed=0))
    assert [r["epoch"] for r in logs] == [0, 1, 2]
    for r in logs:
        assert set(r) == {"epoch", "visibility", "depth", "symmetry", "total"}
        assert all(np.isfinite(v) for v in r.values())
        assert r["symmetry"] == 0.0


def test_fit_is_bit_deterministic():
    def run():
        data = synthetic_data(40, seed=4)
        net = DdfNetwork.create(tiny_config(), seed=3)
        logs = fit(net, data, TrainConfig(epochs=4, batch=16, seed=7))
        return [p.data.copy() for _, p in net.parameters()], logs

    params_a, logs_a = run()
    params_b, logs_b = run()
    assert logs_a == logs_b
    for a, b in zip(params_a, params_b):
        np.testing.assert_array_equal(a, b)


def test_lambda2_zero_with_pairs_matches_run_without_pairs():
    # the symmetry branch must not perturb the trajectory when disabled
    data = synthetic_data(40, seed=5)
    pairs = PairData(synthetic_bundle(10, seed=6), synthetic_bundle(10, seed=7))

    net_a = DdfNetwork.create(tiny_config(), seed=3)
    fit(net_a, data, TrainConfig(epochs=3, batch=16, seed=0, lambda2=0.0), pairs=pairs)
    net_b = DdfNetwork.create(tiny_config(), seed=3)
    fit(net_b, data, TrainConfig(epochs=3, batch=16, seed=0, lambda2=0.0))

    for (_, pa), (_, pb) in zip(net_a.parameters(), net_b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_fit_with_pairs_logs_symmetry_term():
    data = synthetic_data(30, seed=8)
    pairs = PairData(synthetic_bundle(8, seed=9), synthetic_bundle(8, seed=10))
    net = DdfNetwork.create(tiny_config(), seed=3)
    logs = fit(net, data, TrainConfig(epochs=2, batch=16, seed=0), pairs=pairs)
    assert logs[0]["symmetry"] > 0.0


# ---------------------------------------------------------------------------
# prediction


def test_predict_shapes_ranges_and_batching():
    data = synthetic_data(20, seed=11)
    net = DdfNetwork.create(tiny_config(), seed=3)
    probs, dists = predict(net, data.features, batch=7)
    assert probs.shape == dists.shape == (20,)
    assert np.all((probs > 0) & (probs < 1))
    assert np.all(dists >= 0)
    # BLAS reduction order varies with batch shape; equality is only up to ulp
    probs2, dists2 = predict(net, data.features, batch=64)
    np.testing.assert_allclose(probs, probs2, rtol=1e-12, atol=0)
    np.testing.assert_allclose(dists, dists2, rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# finite-difference audit


def test_gradient_check_on_tiny_network():
    data = synthetic_data(6, seed=12)
    pairs = PairData(synthetic_bundle(2, seed=13), synthetic_bundle(2, seed=14))
    net = DdfNetwork.create(tiny_config(), seed=3)
    report = gradient_check(net, data, pairs=pairs)
    assert report.passed(tol=1e-3)
    assert report.worst_parameter in report.per_parameter
    assert report.max_rel_error == max(report.per_parameter.values())
