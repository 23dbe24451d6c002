"""Learnable mixing-mask generator.

A mixing ratio is appended to each feature map as a constant channel; a shared
bias-free 1x1 projection feeds a row-normalized cross-attention between all
spatial positions of the two maps; attending the value projection of the first
map and squashing yields a low-resolution mask that is bilinearly upsampled to
image resolution. The second sample's mask is one minus the first's, and the
mixed image is the mask-weighted blend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ppm
from .errors import DimensionError, ParameterError
from .mix_policies import MixedBatch
from .models import he_normal
from .tensor import (
    Tensor,
    bmm,
    concat_channels,
    conv2d,
    sigmoid,
    softmax_rows,
    transpose,
    upsample_bilinear,
)


@dataclass
class MixBlockParams:
    """Shared query/key projection and the single-channel value projection."""

    w_p: Tensor  # [d, c+1, 1, 1], applied to both embedded feature maps
    w_z: Tensor  # [1, c+1, 1, 1], one output channel so the pre-squash mask is scalar

    @property
    def attention_channels(self) -> int:
        return self.w_p.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"w_p": self.w_p, "w_z": self.w_z}


def attention_width(feature_channels: int) -> int:
    return max(feature_channels // 2, 4)


def init_mix_params(feature_channels: int, seed: int) -> MixBlockParams:
    """He-initialized shared projection; zero value projection so training starts
    at the constant 0.5 mask (the safe linear-interpolation regime)."""
    rng = np.random.default_rng(seed)
    c_in = feature_channels + 1
    d = attention_width(feature_channels)
    w_p = Tensor(he_normal(rng, (d, c_in, 1, 1), c_in), requires_grad=True)
    w_z = Tensor(np.zeros((1, c_in, 1, 1)), requires_grad=True)
    return MixBlockParams(w_p=w_p, w_z=w_z)


def params_from_named(named: dict[str, Tensor]) -> MixBlockParams:
    return MixBlockParams(w_p=named["w_p"], w_z=named["w_z"])


@dataclass
class MaskPair:
    s_i: Tensor  # [N, 1, H, W] weight on the first sample
    s_j: Tensor  # 1 - s_i


def embed_lambda(z: Tensor, lam: float) -> Tensor:
    """Append one constant channel holding the mixing ratio."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    n, _, h, w = z.shape
    return concat_channels(z, Tensor(np.full((n, 1, h, w), float(lam))))


def cross_attention(zl_i: Tensor, zl_j: Tensor, params: MixBlockParams) -> Tensor:
    """Row-stochastic similarity [N, hw, hw] between all position pairs.

    Row r of each batch element is a distribution over the positions of the
    second feature map, from scaled dot products of the shared projection.
    """
    if zl_i.shape != zl_j.shape:
        raise DimensionError(f"feature maps differ: {zl_i.shape} vs {zl_j.shape}")
    n, _, h, w = zl_i.shape
    d = params.attention_channels
    q = conv2d(zl_i, params.w_p).reshape(n, d, h * w)
    k = conv2d(zl_j, params.w_p).reshape(n, d, h * w)
    scores = bmm(transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(d))
    return softmax_rows(scores)


def compute_mask(zl_i: Tensor, zl_j: Tensor, params: MixBlockParams,
                 upsample_factor: int) -> MaskPair:
    """Attend the first map's value projection, squash, and upsample to input size."""
    n, _, h, w = zl_i.shape
    attn = cross_attention(zl_i, zl_j, params)
    values = conv2d(zl_i, params.w_z).reshape(n, h * w, 1)
    low = sigmoid(bmm(attn, values)).reshape(n, 1, h, w)
    s_i = upsample_bilinear(low, upsample_factor)
    return MaskPair(s_i=s_i, s_j=1.0 - s_i)


def mix_images(x_i: Tensor, x_j: Tensor, mask: MaskPair) -> Tensor:
    """Blend the pair under the mask, broadcast across color channels."""
    if x_i.shape != x_j.shape:
        raise DimensionError(f"image shapes differ: {x_i.shape} vs {x_j.shape}")
    if mask.s_i.shape[0] != x_i.shape[0] or mask.s_i.shape[2:] != x_i.shape[2:]:
        raise DimensionError(f"mask {mask.s_i.shape} does not cover images {x_i.shape}")
    return mask.s_i * x_i + mask.s_j * x_j


def generate(x_i: Tensor, x_j: Tensor, z_i: Tensor, z_j: Tensor,
             lam: float, params: MixBlockParams) -> MixedBatch:
    """Full pipeline: embed ratios, attend, build the mask pair, blend the images."""
    if z_i.shape != z_j.shape:
        raise DimensionError(f"feature maps differ: {z_i.shape} vs {z_j.shape}")
    _, _, h_img, w_img = x_i.shape
    _, _, h_feat, w_feat = z_i.shape
    if h_img % h_feat or w_img % w_feat or h_img // h_feat != w_img // w_feat:
        raise DimensionError(
            f"feature grid {h_feat}x{w_feat} does not evenly divide images {h_img}x{w_img}")
    factor = h_img // h_feat
    mask = compute_mask(embed_lambda(z_i, lam), embed_lambda(z_j, 1.0 - lam), params, factor)
    x_mix = mix_images(x_i, x_j, mask)
    n = x_i.shape[0]
    return MixedBatch(x_mix=x_mix, lam=np.full(n, float(lam)), mask=mask.s_i)


def export_masks(masks, directory, prefix: str = "mask") -> list[Path]:
    """Write one grayscale P5 file per sample, values rounded to 0..255."""
    data = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if data.ndim != 4 or data.shape[1] != 1:
        raise DimensionError(f"expected masks [N, 1, H, W], got {data.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(data.shape[0]):
        path = directory / f"{prefix}_{idx:03d}.pgm"
        ppm.write_p5(path, data[idx, 0])
        paths.append(path)
    return paths
