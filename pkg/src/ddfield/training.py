"""Loss, optimizer, training loop, and the finite-difference audit.

The loss has three terms: binary cross-entropy on the visibility logit,
an L1 depth term gated by ground-truth visibility (misses carry no
depth signal), and an L1 consistency term between the predictions of
mirrored ray pairs.  Training is plain Adam over full-batch shuffled
minibatches, deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, tensor, zero_grad
from .features import FeatureBundle
from .network import DdfNetwork, aggregate_2d_batch, forward_batch
from .seeding import Stream, rng

__all__ = [
    "AdamState",
    "GradCheckReport",
    "LossBreakdown",
    "PairData",
    "TrainConfig",
    "TrainingData",
    "adam_step",
    "fit",
    "gradient_check",
    "loss_terms",
    "predict",
]

PROB_CLAMP = 1e-7       # BCE probability clamp


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms; total = l_vis + lambda1*l_depth + lambda2*l_sym."""

    l_vis: float
    l_depth: float
    l_sym: float
    lambda1: float
    lambda2: float
    total: float

    def __post_init__(self):
        for name in ("l_vis", "l_depth", "l_sym", "total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        want = self.l_vis + self.lambda1 * self.l_depth + self.lambda2 * self.l_sym
        if abs(self.total - want) > 1e-9:
            raise ValueError("loss total does not match its terms")


@dataclass
class TrainingData:
    """Supervised rays: features plus ground truth.

    depth_gate masks which rays contribute to the depth term; it defaults
    to the ground-truth visibility and can only shrink it (a miss has no
    depth to supervise).
    """

    features: FeatureBundle
    visible: np.ndarray                  # (N,) 0/1
    depth: np.ndarray                    # (N,), NaN exactly where invisible
    depth_gate: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.features)
        self.visible = np.asarray(self.visible)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.visible.shape != (n,) or self.depth.shape != (n,):
            raise ValueError("ground truth shape mismatch")
        if self.depth_gate is None:
            self.depth_gate = self.visible.astype(bool)
        else:
            self.depth_gate = np.asarray(self.depth_gate, dtype=bool)
            if self.depth_gate.shape != (n,):
                raise ValueError("depth_gate shape mismatch")
            if np.any(self.depth_gate & (self.visible == 0)):
                raise ValueError("cannot supervise depth on invisible rays")


@dataclass
class PairData:
    """Mirrored ray pairs; the loss pulls the two predictions together."""

    side_a: FeatureBundle
    side_b: FeatureBundle

    def __post_init__(self):
        if len(self.side_a) != len(self.side_b):
            raise ValueError("pair sides differ in length")

    def __len__(self) -> int:
        return len(self.side_a)


@dataclass
class TrainConfig:
    lambda1: float = 5.0
    lambda2: float = 0.5
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def loss_terms(
    vis_logits: Tensor,
    d_hats: Tensor,
    visible: np.ndarray,
    depth: np.ndarray,
    lambda1: float,
    lambda2: float,
    pair_preds: tuple[Tensor, Tensor] | None = None,
    depth_gate: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Assemble the three-term loss; returns (total node, float breakdown).

    The depth term averages gate * |prediction - truth| over ALL samples;
    gate defaults to ground-truth visibility.  NaN depths sit outside the
    gate and are replaced by zero before entering the graph.
    """
    y = np.asarray(visible, dtype=np.float64)
    if y.shape != tuple(vis_logits.shape):
        raise ValueError("predictions and ground truth differ in length")
    gate = y if depth_gate is None else np.asarray(depth_gate, dtype=np.float64)
    depth_safe = np.where(gate > 0, depth, 0.0)
    if not np.all(np.isfinite(depth_safe)):
        raise ValueError("gated depth values must be finite")

    prob = vis_logits.sigmoid().clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(prob.log() * y + (1.0 - prob).log() * (1.0 - y))
    l_vis = bce.mean()

    l_depth = ((d_hats - tensor(depth_safe)).abs() * gate).mean()

    if pair_preds is None:
        l_sym = None
        total = l_vis + lambda1 * l_depth
        sym_value = 0.0
    else:
        l_sym = (pair_preds[0] - pair_preds[1]).abs().mean()
        total = l_vis + lambda1 * l_depth + lambda2 * l_sym
        sym_value = l_sym.item()

    breakdown = LossBreakdown(
        l_vis=l_vis.item(),
        l_depth=l_depth.item(),
        l_sym=sym_value,
        lambda1=lambda1,
        lambda2=lambda2,
        total=l_vis.item() + lambda1 * l_depth.item() + lambda2 * sym_value,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params, lr: float = 1e-4) -> "AdamState":
        state = cls(lr=lr)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place on param data."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError("gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# forward plumbing shared by fit / predict / gradient_check


def _forward_features(net: DdfNetwork, feats: FeatureBundle, idx):
    """Aggregate image features and run the trunk on a feature slice."""
    sliced = feats.take(idx)
    image = aggregate_2d_batch(
        net.attention, sliced.pixel_feats, sliced.line_feats, sliced.line_valid
    )
    return forward_batch(
        net, sliced.origins, sliced.directions, image,
        sliced.skeleton_feats, sliced.contact_feats,
    )


def _batch_loss(net, data: TrainingData, idx, pairs, pair_idx, cfg):
    vis_logits, d_hats = _forward_features(net, data.features, idx)
    pair_preds = None
    if pairs is not None and pair_idx is not None and len(pair_idx) > 0:
        _, d_a = _forward_features(net, pairs.side_a, pair_idx)
        _, d_b = _forward_features(net, pairs.side_b, pair_idx)
        pair_preds = (d_a, d_b)
    return loss_terms(
        vis_logits, d_hats,
        data.visible[idx], data.depth[idx],
        cfg.lambda1, cfg.lambda2,
        pair_preds=pair_preds,
        depth_gate=np.asarray(data.depth_gate, dtype=np.float64)[idx],
    )


def fit(
    net: DdfNetwork,
    data: TrainingData,
    config: TrainConfig,
    pairs: PairData | None = None,
) -> list[dict]:
    """Train in place; returns one log record per epoch.

    Sample order reshuffles every epoch from a dedicated seed stream;
    pairs shuffle from their own stream so a run without pairs follows
    the identical parameter trajectory when lambda2 is zero.
    """
    n = len(data.features)
    if n == 0:
        raise ValueError("empty dataset")
    params = [t for _, t in net.parameters()]
    state = AdamState.create(params, lr=config.lr)
    shuffle_g = rng(config.seed, Stream.BATCH_SHUFFLE)
    pair_g = rng(config.seed, Stream.PAIR_SHUFFLE)

    n_batches = math.ceil(n / config.batch)
    m = len(pairs) if pairs is not None else 0
    pair_chunk = math.ceil(m / n_batches) if m else 0

    logs = []
    for epoch in range(config.epochs):
        perm = shuffle_g.permutation(n)
        pair_perm = pair_g.permutation(m) if m else None
        vis_sum = depth_sum = sym_sum = total_sum = 0.0
        sym_count = 0
        for b in range(n_batches):
            idx = perm[b * config.batch : (b + 1) * config.batch]
            pair_idx = None
            if m:
                pair_idx = pair_perm[b * pair_chunk : (b + 1) * pair_chunk]
            total, bd = _batch_loss(net, data, idx, pairs, pair_idx, config)
            zero_grad(params)
            total.backward()
            adam_step(params, state)

            k = len(idx)
            vis_sum += bd.l_vis * k
            depth_sum += bd.l_depth * k
            total_sum += bd.total * k
            if pair_idx is not None and len(pair_idx) > 0:
                sym_sum += bd.l_sym * len(pair_idx)
                sym_count += len(pair_idx)
        logs.append({
            "epoch": epoch,
            "visibility": vis_sum / n,
            "depth": depth_sum / n,
            "symmetry": sym_sum / sym_count if sym_count else 0.0,
            "total": total_sum / n,
        })
    return logs


def predict(
    net: DdfNetwork, feats: FeatureBundle, batch: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """Inference over a bundle: (visibility probability, distance)."""
    n = len(feats)
    probs = np.empty(n)
    dists = np.empty(n)
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        vis_logits, d_hats = _forward_features(net, feats, idx)
        probs[idx] = 1.0 / (1.0 + np.exp(-vis_logits.data))
        dists[idx] = d_hats.data
    return probs, dists


# ---------------------------------------------------------------------------
# finite-difference audit


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def gradient_check(
    net: DdfNetwork,
    data: TrainingData,
    pairs: PairData | None = None,
    lambda1: float = 5.0,
    lambda2: float = 0.5,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    Relative error per entry is |a - f| / max(|a|, |f|, 0.01): entries
    with both gradients below 0.01 are compared absolutely at 1e-5 scale
    so finite-difference noise on near-zero entries cannot dominate.
    """
    cfg = TrainConfig(lambda1=lambda1, lambda2=lambda2)
    idx = np.arange(len(data.features))
    pair_idx = np.arange(len(pairs)) if pairs is not None else None

    def eval_total() -> float:
        total, _ = _batch_loss(net, data, idx, pairs, pair_idx, cfg)
        return total.item()

    named = net.parameters()
    params = [t for _, t in named]
    zero_grad(params)
    total, _ = _batch_loss(net, data, idx, pairs, pair_idx, cfg)
    total.backward()

    per_parameter = {}
    worst = ("", 0.0)
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_total()
            flat[i] = orig - step
            down = eval_total()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-2)
            err = max(err, rel)
        per_parameter[name] = err
        if err > worst[1]:
            worst = (name, err)
    return GradCheckReport(
        max_rel_error=worst[1],
        worst_parameter=worst[0],
        per_parameter=per_parameter,
    )
