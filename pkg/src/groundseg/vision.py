"""Visual perception: encoder taps, feature aggregation and the mask decoder.

The encoder is a stride-2 conv stack; local features are tapped at stride 8
and average-pooled to stride 16, global features come from the stride-16
stage. Aggregation adds a conv of the local features onto the global ones.
The decoder broadcasts one conditioning vector per seg token over the
feature grid, concatenates it channelwise, and upsamples x16 back to pixels.
All ops are differentiable and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelDims
from .data import ImagePatch


@dataclass(eq=False)
class FeaturePair:
    """Channel-last global (c) and local (c') features on the H/16 grid."""

    v_g: np.ndarray
    v_l: np.ndarray

    def __post_init__(self):
        if self.v_g.shape[:2] != self.v_l.shape[:2]:
            raise ValueError("global/local features must share the spatial grid")


@dataclass(eq=False)
class SegFeatures:
    v_seg: np.ndarray


@dataclass(eq=False)
class MaskLogits:
    """One H x W logit map per seg token, in token order."""

    logits: list[np.ndarray]


def init_vision_params(dims: ModelDims, rng: np.random.Generator,
                       dtype=np.float32) -> dict[str, Tensor]:
    def conv(name, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    h1, h2 = dims.enc_channels
    conv("vision.enc1", h1, 3, 3)
    conv("vision.enc2", h2, h1, 3)
    conv("vision.enc3", dims.local_channels, h2, 3)
    conv("vision.enc4", dims.channels, dims.local_channels, 3)
    conv("vision.agg", dims.channels, dims.local_channels, 3)
    conv("vision.dec_fuse", dims.channels, dims.channels + dims.proj_dim, 3)
    cin = dims.channels
    for i, cout in enumerate(dims.dec_channels):
        conv(f"vision.dec_up{i}", cout, cin, 3)
        cin = cout
    conv("vision.dec_head", 1, cin, 1)
    return params


def _conv(x, p, name, stride=1, pad=1):
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)


def encode_image_batch(x: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """(B, 3, H, W) -> global (B, c, H/16, W/16) and pooled local (B, c', H/16, W/16)."""
    h = ad.gelu(_conv(x, p, "vision.enc1", stride=2))
    h = ad.gelu(_conv(h, p, "vision.enc2", stride=2))
    local = ad.gelu(_conv(h, p, "vision.enc3", stride=2))   # stride-8 tap
    v_g = _conv(local, p, "vision.enc4", stride=2)
    v_l = ad.avg_pool2(local)
    return v_g, v_l


def aggregate_batch(v_g: Tensor, v_l: Tensor, p: dict[str, Tensor]) -> Tensor:
    """v_seg = v_g + Conv(v_l)."""
    mixed = _conv(v_l, p, "vision.agg")
    if mixed.shape != v_g.shape:
        raise ValueError(f"aggregation conv maps to {mixed.shape[1]} channels, "
                         f"global features have {v_g.shape[1]}")
    return ad.add(v_g, mixed)


def decode_mask_batch(v_seg_tok: Tensor, f_seg: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Decode one mask per token.

    v_seg_tok: (M, c, g, g) features, already gathered per token;
    f_seg: (M, d_proj) conditioning vectors. Returns (M, H, W) logits.
    """
    m, _, g, _ = v_seg_tok.shape
    cond = ad.expand_hw(f_seg, g, g)
    h = ad.concat([v_seg_tok, cond], axis=1)
    h = ad.gelu(_conv(h, p, "vision.dec_fuse"))
    for i in range(4):
        h = ad.upsample2(h)
        h = ad.gelu(_conv(h, p, f"vision.dec_up{i}"))
    out = ad.conv2d(h, p["vision.dec_head.w"], p["vision.dec_head.b"], stride=1, pad=0)
    return ad.reshape(out, (m, g * 16, g * 16))


# single-example wrappers over the batched graph, numpy in / numpy out

def _to_nchw(image: ImagePatch) -> np.ndarray:
    return np.ascontiguousarray(image.pixels.transpose(2, 0, 1))[None]


def encode_image(image: ImagePatch, params: dict[str, Tensor]) -> FeaturePair:
    """Encode one image into its channel-last feature pair."""
    if image.height % 16 or image.width % 16:
        raise ValueError("image sides must be divisible by 16")
    with ad.no_grad():
        v_g, v_l = encode_image_batch(Tensor(_to_nchw(image)), params)
    return FeaturePair(v_g=v_g.data[0].transpose(1, 2, 0), v_l=v_l.data[0].transpose(1, 2, 0))


def aggregate_features(fp: FeaturePair, params: dict[str, Tensor]) -> SegFeatures:
    with ad.no_grad():
        v_seg = aggregate_batch(Tensor(fp.v_g.transpose(2, 0, 1)[None]),
                                Tensor(fp.v_l.transpose(2, 0, 1)[None]), params)
    return SegFeatures(v_seg=v_seg.data[0].transpose(1, 2, 0))


def decode_masks(v_seg: SegFeatures, f_seg, params: dict[str, Tensor]) -> MaskLogits:
    """One logit map per seg-token embedding; an empty embedding list is a
    legal text-only answer and yields an empty MaskLogits."""
    vectors = getattr(f_seg, "vectors", f_seg)
    vectors = np.asarray(vectors)
    if vectors.size == 0:
        return MaskLogits(logits=[])
    m = vectors.shape[0]
    base = v_seg.v_seg.transpose(2, 0, 1)[None]
    with ad.no_grad():
        tok_feats = Tensor(np.repeat(base, m, axis=0))
        out = decode_mask_batch(tok_feats, Tensor(vectors), params)
    return MaskLogits(logits=[out.data[i] for i in range(m)])
