"""Dynamic attention-guided fusion: per-pixel modality gating, then channel and spatial attention."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .primitives import (
    ShapeError,
    bottleneck_width,
    conv2d,
    global_pool,
    mlp_bottleneck,
    pointwise,
    softmax_over_channels,
)


def _same_shape(va: Tensor, ia: Tensor) -> None:
    if va.shape != ia.shape:
        raise ShapeError(f"visible {tuple(va.shape)} and infrared {tuple(ia.shape)} differ")


def modality_gate(va: Tensor, ia: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-channel gate ``[G_v, G_i]`` that sums to one at every pixel."""
    _same_shape(va, ia)
    h = pointwise(conv2d(torch.cat((va, ia), dim=1), w1, b1), "relu")
    return softmax_over_channels(conv2d(h, w2, b2))


def gated_fuse(va: Tensor, ia: Tensor, g: Tensor) -> Tensor:
    _same_shape(va, ia)
    if g.shape[1] != 2 or g.shape[2:] != va.shape[2:]:
        raise ShapeError(f"gate {tuple(g.shape)} does not match features {tuple(va.shape)}")
    return g[:, 0:1] * va + g[:, 1:2] * ia


def channel_attention(f: Tensor, w1, b1, w2, b2) -> tuple[Tensor, Tensor]:
    # pools are summed before the shared bottleneck
    pooled = (global_pool(f, "avg") + global_pool(f, "max")).flatten(1)
    hc = pointwise(mlp_bottleneck(pooled, w1, b1, w2, b2), "sigmoid")[:, :, None, None]
    return hc, hc * f


def spatial_attention(fc: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    desc = torch.cat((fc.mean(dim=1, keepdim=True), fc.amax(dim=1, keepdim=True)), dim=1)
    hs = pointwise(conv2d(desc, weight, bias), "sigmoid")
    return hs, hs * fc


class DAFM(nn.Module):
    """Fusion block. With ``use_magn=False`` the streams are summed instead of gated;
    with ``use_dacm=False`` the attention refinement is skipped."""

    def __init__(self, channels: int, ratio: int = 4, use_magn: bool = True, use_dacm: bool = True):
        super().__init__()
        C = channels
        self.use_magn = use_magn
        self.use_dacm = use_dacm
        if use_magn:
            self.gate1 = nn.Conv2d(2 * C, C, 3, padding=1)
            self.gate2 = nn.Conv2d(C, 2, 3, padding=1)
            # start from an even split between the modalities
            nn.init.zeros_(self.gate2.weight)
            nn.init.zeros_(self.gate2.bias)
        if use_dacm:
            hidden = bottleneck_width(C, ratio)
            self.mlp1 = nn.Linear(C, hidden)
            self.mlp2 = nn.Linear(hidden, C)
            self.spatial = nn.Conv2d(2, 1, 3, padding=1)

    def gate(self, va: Tensor, ia: Tensor) -> Tensor:
        return modality_gate(va, ia, self.gate1.weight, self.gate1.bias, self.gate2.weight, self.gate2.bias)

    def fuse(self, va: Tensor, ia: Tensor) -> tuple[Tensor, Tensor | None]:
        """Returns the fused map and the gate (``None`` when gating is off)."""
        _same_shape(va, ia)
        g = None
        if self.use_magn:
            g = self.gate(va, ia)
            f = gated_fuse(va, ia, g)
        else:
            f = va + ia
        if not self.use_dacm:
            return f, g
        _, fc = channel_attention(f, self.mlp1.weight, self.mlp1.bias, self.mlp2.weight, self.mlp2.bias)
        _, fused = spatial_attention(fc, self.spatial.weight, self.spatial.bias)
        return fused, g

    def forward(self, va: Tensor, ia: Tensor) -> Tensor:
        return self.fuse(va, ia)[0]


def dafm_forward(va: Tensor, ia: Tensor, module: DAFM) -> Tensor:
    return module(va, ia)
