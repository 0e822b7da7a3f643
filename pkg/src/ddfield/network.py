"""Conditional directed-distance predictor.

A ray is encoded with NeRF-style positional encoding, enriched with image
features (the projected-pixel feature attended over samples along the
projected line), a global skeleton embedding, and local joint-frame
coordinates, then passed through an 8-layer MLP.  A visibility logit
branches off after layer 3; the encoded ray is concatenated back into
layer 4's input; the distance head applies softplus so predictions are
non-negative by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, parameter, tensor
from .hand import GLOBAL_EMBEDDING_SIZE
from .seeding import Stream, rng

__all__ = [
    "AttentionBlock",
    "DdfNetwork",
    "NetworkConfig",
    "aggregate_2d",
    "aggregate_2d_batch",
    "attention_weights",
    "encoded_ray_length",
    "forward",
    "forward_batch",
    "positional_encode",
    "positional_encode_batch",
]


def positional_encode_batch(x: np.ndarray, bands: int) -> np.ndarray:
    """Encode (N, d) rows as [x, sin(2^0 pi x), cos(2^0 pi x), ...].

    The identity passthrough comes first, then sin/cos pairs per
    frequency band, each block keeping the d components together.
    Output width is d * (1 + 2 * bands).
    """
    x = np.asarray(x, dtype=np.float64)
    if bands < 0:
        raise ValueError("bands must be non-negative")
    parts = [x]
    for b in range(bands):
        arg = (2.0**b * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def positional_encode(x, bands: int) -> np.ndarray:
    """Encode a single d-vector; see positional_encode_batch."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return positional_encode_batch(x[None, :], bands)[0]


def encoded_ray_length(bands_origin: int, bands_dir: int) -> int:
    return 3 * (1 + 2 * bands_origin) + 3 * (1 + 2 * bands_dir)


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; defaults match the desk-scale setup."""

    width: int = 128
    pe_bands_origin: int = 6
    pe_bands_dir: int = 4
    heads: int = 2
    image_channels: int = 40      # total channels across pyramid levels
    local_neighbors: int = 8      # joints per local intersection feature

    def __post_init__(self):
        if self.width < 1 or self.heads < 1:
            raise ValueError("width and heads must be positive")
        if self.image_channels % self.heads != 0:
            raise ValueError("image channels must divide evenly across heads")
        if self.pe_bands_origin < 0 or self.pe_bands_dir < 0:
            raise ValueError("band counts must be non-negative")
        if self.local_neighbors < 1:
            raise ValueError("local_neighbors must be positive")

    @property
    def encoded_ray(self) -> int:
        return encoded_ray_length(self.pe_bands_origin, self.pe_bands_dir)

    @property
    def input_size(self) -> int:
        return (self.encoded_ray + self.image_channels
                + GLOBAL_EMBEDDING_SIZE + 3 * self.local_neighbors)


def _uniform_fan_in(g: np.random.Generator, fan_in: int, fan_out: int,
                    gain: float = 1.0):
    # variance gain^2/fan_in keeps activation scale flat through depth;
    # rectified layers use gain sqrt(2) to compensate the halved variance
    bound = gain * np.sqrt(3.0 / fan_in)
    return g.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class AttentionBlock:
    """Multi-head cross-attention over per-ray key/value sets.

    Four square projections (query, key, value, output) over the full
    channel dimension, no biases; each head works on channels/heads
    columns with scale 1/sqrt(channels/heads).
    """

    heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        c = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (c, c):
                raise ValueError("attention projections must be square and equal")
        if c % self.heads != 0:
            raise ValueError("channels must divide evenly across heads")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def create(cls, channels: int, heads: int, g: np.random.Generator):
        return cls(
            heads=heads,
            wq=parameter(_uniform_fan_in(g, channels, channels)),
            wk=parameter(_uniform_fan_in(g, channels, channels)),
            wv=parameter(_uniform_fan_in(g, channels, channels)),
            wo=parameter(_uniform_fan_in(g, channels, channels)),
        )

    def parameters(self):
        return [("attention.query", self.wq), ("attention.key", self.wk),
                ("attention.value", self.wv), ("attention.output", self.wo)]


def aggregate_2d_batch(
    block: AttentionBlock,
    pixel_feats,
    line_feats,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Residual cross-attention: query from the projected-pixel feature,
    keys/values from the samples along the projected line.

    pixel_feats: (N, C) array or Tensor; line_feats: (N, K, C); valid:
    (N,) mask, False rows (degenerate rays) pass pixel_feats through
    unchanged.  Returns (N, C).
    """
    q_in = pixel_feats if isinstance(pixel_feats, Tensor) else tensor(pixel_feats)
    kv_in = line_feats if isinstance(line_feats, Tensor) else tensor(line_feats)
    n, c = q_in.shape
    if kv_in.ndim != 3 or kv_in.shape[0] != n or kv_in.shape[2] != c:
        raise ValueError("line features must be (rays, samples, channels)")
    k_count = kv_in.shape[1]
    if k_count == 0:
        return q_in
    if c != block.channels:
        raise ValueError("feature width does not match attention block")

    ch = c // block.heads
    scale = 1.0 / np.sqrt(ch)

    q = q_in @ block.wq                                        # (N, C)
    flat = kv_in.reshape(n * k_count, c)
    keys = (flat @ block.wk).reshape(n, k_count, c)
    vals = (flat @ block.wv).reshape(n, k_count, c)

    head_outs = []
    for h in range(block.heads):
        qh = q.narrow(1, h * ch, ch).reshape(n, 1, ch)
        kh = keys.narrow(2, h * ch, ch)
        vh = vals.narrow(2, h * ch, ch)
        scores = (qh * kh).sum(axis=2) * scale                 # (N, K)
        weights = scores.softmax(axis=-1)
        head_outs.append((weights.reshape(n, k_count, 1) * vh).sum(axis=1))
    attended = concat(head_outs, axis=1) @ block.wo            # (N, C)

    if valid is not None:
        gate = np.asarray(valid, dtype=np.float64).reshape(n, 1)
        attended = attended * gate
    return q_in + attended


def attention_weights(
    block: AttentionBlock, pixel_feats: np.ndarray, line_feats: np.ndarray
) -> np.ndarray:
    """Per-head softmax rows for inspection: (N, heads, K)."""
    pixel_feats = np.asarray(pixel_feats, dtype=np.float64)
    line_feats = np.asarray(line_feats, dtype=np.float64)
    n, k_count, c = line_feats.shape
    ch = c // block.heads
    scale = 1.0 / np.sqrt(ch)
    q = pixel_feats @ block.wq.data
    keys = (line_feats.reshape(-1, c) @ block.wk.data).reshape(n, k_count, c)
    out = np.empty((n, block.heads, k_count))
    for h in range(block.heads):
        qh = q[:, h * ch : (h + 1) * ch]
        kh = keys[:, :, h * ch : (h + 1) * ch]
        scores = np.einsum("nc,nkc->nk", qh, kh) * scale
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out[:, h, :] = e / e.sum(axis=1, keepdims=True)
    return out


def aggregate_2d(block: AttentionBlock, pixel_feat, line_feats) -> Tensor:
    """Single-ray aggregation; an empty key set returns the pixel feature."""
    pixel_feat = np.asarray(pixel_feat, dtype=np.float64)
    line_feats = np.asarray(line_feats, dtype=np.float64)
    if line_feats.size == 0:
        return tensor(pixel_feat)
    if line_feats.ndim != 2 or line_feats.shape[1] != pixel_feat.shape[0]:
        raise ValueError("line features must be (samples, channels)")
    out = aggregate_2d_batch(
        block, pixel_feat[None, :], line_feats[None, :, :], None
    )
    return out.reshape(pixel_feat.shape[0])


@dataclass
class DdfNetwork:
    """8-layer trunk with visibility and distance heads.

    Rectified-linear after layers 1-7; layer 8 is affine.  The encoded
    ray is concatenated into layer 4's input (skip).  Visibility logits
    branch off layer 3's activations; the distance head is affine +
    softplus on layer 8's output.
    """

    config: NetworkConfig
    attention: AttentionBlock
    weights: list = field(default_factory=list)   # (w, b) per trunk layer
    vis_w: Tensor = None
    vis_b: Tensor = None
    dist_w: Tensor = None
    dist_b: Tensor = None

    @classmethod
    def create(cls, config: NetworkConfig, seed: int) -> "DdfNetwork":
        g = rng(seed, Stream.PARAM_INIT)
        attention = AttentionBlock.create(config.image_channels, config.heads, g)
        w = config.width
        dims = [(config.input_size, w), (w, w), (w, w),
                (w + config.encoded_ray, w), (w, w), (w, w), (w, w), (w, w)]
        relu_gain = np.sqrt(2.0)
        weights = [
            (parameter(_uniform_fan_in(g, din, dout,
                                       gain=relu_gain if i < 7 else 1.0)),
             parameter(np.zeros(dout)))
            for i, (din, dout) in enumerate(dims)
        ]
        return cls(
            config=config,
            attention=attention,
            weights=weights,
            vis_w=parameter(_uniform_fan_in(g, w, 1)),
            vis_b=parameter(np.zeros(1)),
            dist_w=parameter(_uniform_fan_in(g, w, 1)),
            dist_b=parameter(np.zeros(1)),
        )

    def parameters(self):
        """Stable (name, tensor) ordering shared by Adam and checkpoints."""
        out = self.attention.parameters()
        for i, (w, b) in enumerate(self.weights, start=1):
            out.append((f"layer{i}.weight", w))
            out.append((f"layer{i}.bias", b))
        out.append(("visibility.weight", self.vis_w))
        out.append(("visibility.bias", self.vis_b))
        out.append(("distance.weight", self.dist_w))
        out.append(("distance.bias", self.dist_b))
        return out

    def encode_rays(self, origins: np.ndarray, directions: np.ndarray):
        cfg = self.config
        return np.concatenate([
            positional_encode_batch(origins, cfg.pe_bands_origin),
            positional_encode_batch(directions, cfg.pe_bands_dir),
        ], axis=1)


def forward_batch(
    net: DdfNetwork,
    origins: np.ndarray,
    directions: np.ndarray,
    image_feats,
    skeleton_feats: np.ndarray,
    contact_feats: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Run the trunk on a batch.

    image_feats may be a Tensor (gradients flow back into the attention
    block) or a plain array.  Returns (visibility logits (N,), predicted
    distances (N,)); distances are non-negative via softplus.
    """
    cfg = net.config
    origins = np.asarray(origins, dtype=np.float64)
    n = origins.shape[0]
    encoded = tensor(net.encode_rays(origins, directions))
    img = image_feats if isinstance(image_feats, Tensor) else tensor(image_feats)
    skel = tensor(np.asarray(skeleton_feats, dtype=np.float64))
    contact = tensor(np.asarray(contact_feats, dtype=np.float64))
    for part, want in ((img, cfg.image_channels),
                       (skel, GLOBAL_EMBEDDING_SIZE),
                       (contact, 3 * cfg.local_neighbors)):
        if part.ndim != 2 or part.shape != (n, want):
            raise ValueError("feature block shape mismatch")

    x = concat([encoded, img, skel, contact], axis=1)
    if x.shape[1] != cfg.input_size:
        raise ValueError("network input width mismatch")

    h = x
    for i, (w, b) in enumerate(net.weights, start=1):
        if i == 4:
            h = concat([h, encoded], axis=1)
        h = h @ w + b
        if i < 8:
            h = h.relu()
        if i == 3:
            vis_logit = (h @ net.vis_w + net.vis_b).reshape(n)
    d_hat = ((h @ net.dist_w + net.dist_b).reshape(n)).softplus()
    return vis_logit, d_hat


def forward(net, ray, image_feat, skeleton_feat, contact_feat):
    """Single-ray inference; returns (visibility logit, distance) floats."""
    img = image_feat
    if isinstance(img, Tensor):
        img = img.reshape(1, img.shape[0])
    else:
        img = np.asarray(img, dtype=np.float64)[None, :]
    vis, d = forward_batch(
        net,
        ray.origin[None, :],
        ray.direction[None, :],
        img,
        np.asarray(skeleton_feat)[None, :],
        np.asarray(contact_feat)[None, :],
    )
    return float(vis.data[0]), float(d.data[0])
