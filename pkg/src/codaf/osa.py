"""Offset-guided semantic alignment of visible features onto the infrared frame."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .primitives import (
    OffsetBundle,
    ShapeError,
    conv2d,
    deformable_sample,
    global_pool,
    linear,
    pointwise,
    shift_read,
)

RESIDUAL_READS = ("shifted", "at_p")
ATTENTION_SOURCES = ("ir", "visible")


def ir_attention_map(ir: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """sigmoid(conv1x1(ir)) -> [B, 1, H, W]."""
    return pointwise(conv2d(ir, weight, bias), "sigmoid")


def attention_weighted_concat(ir: Tensor, vis: Tensor, m: Tensor) -> Tensor:
    if ir.shape != vis.shape:
        raise ShapeError(f"ir {tuple(ir.shape)} and vis {tuple(vis.shape)} differ")
    return m * torch.cat((ir, vis), dim=1)


def predict_base_offset(mw: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return conv2d(pointwise(conv2d(mw, w1, b1), "relu"), w2, b2)


def deformable_align(
    vis: Tensor,
    base: Tensor,
    head_w: Tensor,
    head_b: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    residual_read: str = "shifted",
    unit_modulation: bool = False,
) -> tuple[Tensor, OffsetBundle]:
    """Warp ``vis`` with a base-prior deformable convolution.

    The 3K-channel head (2K residual offsets, K modulation logits) runs on the
    unaligned visible map and is read either at ``p + base`` (bilinear) or at
    ``p``. ``unit_modulation`` pins the modulation to 1 for diagnostics.
    """
    if residual_read not in RESIDUAL_READS:
        raise ValueError(f"residual_read must be one of {RESIDUAL_READS}")
    K = weight.shape[2] * weight.shape[3]
    head = conv2d(vis, head_w, head_b)
    if head.shape[1] != 3 * K:
        raise ShapeError(f"offset head emits {head.shape[1]} channels, need {3 * K}")
    if residual_read == "shifted":
        head = shift_read(head, base)
    residual = head[:, : 2 * K]
    modulation = torch.ones_like(head[:, 2 * K:]) if unit_modulation else pointwise(head[:, 2 * K:], "sigmoid")
    bundle = OffsetBundle(base=base, residual=residual, modulation=modulation)
    return deformable_sample(vis, weight, bias, bundle), bundle


def sid_embed(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """pool -> flatten -> linear -> ReLU -> linear -> L2 normalise."""
    v = global_pool(x, "avg").flatten(1)
    v = linear(pointwise(linear(v, w1, b1), "relu"), w2, b2)
    return F.normalize(v, dim=1, eps=1e-12)


@dataclass
class OsaOutput:
    aligned_visible: Tensor
    aligned_infrared: Tensor
    attention: Tensor
    base_offset: Tensor
    vis_embed: Tensor
    ir_embed: Tensor
    bundle: OffsetBundle


class SharedEmbedding(nn.Module):
    """Shared extractor mapping either modality into the common embedding space."""

    def __init__(self, channels: int, dim: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(channels, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return sid_embed(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class OSA(nn.Module):
    def __init__(
        self,
        channels: int,
        embed_dim: int = 64,
        kernel_size: int = 3,
        attention_source: str = "ir",
        residual_read: str = "shifted",
        sid: SharedEmbedding | None = None,
    ):
        super().__init__()
        if attention_source not in ATTENTION_SOURCES:
            raise ValueError(f"attention_source must be one of {ATTENTION_SOURCES}")
        C = channels
        K = kernel_size * kernel_size
        self.attention_source = attention_source
        self.residual_read = residual_read
        self.unit_modulation = False
        self.attn = nn.Conv2d(C, 1, 1)
        self.offset1 = nn.Conv2d(2 * C, C, 3, padding=1)
        self.offset2 = nn.Conv2d(C, 2, 3, padding=1)
        self.head = nn.Conv2d(C, 3 * K, 3, padding=1)
        self.weight = nn.Parameter(torch.zeros(C, C, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(C))
        self.sid = sid if sid is not None else SharedEmbedding(C, embed_dim)
        self.reset_alignment()

    def reset_alignment(self) -> None:
        """Zero the offset heads and set the deformable kernel to the identity."""
        for conv in (self.offset2, self.head):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        with torch.no_grad():
            self.weight.zero_()
            c = self.weight.shape[2] // 2
            idx = torch.arange(self.weight.shape[0])
            self.weight[idx, idx, c, c] = 1.0
            self.bias.zero_()

    def attention(self, vis: Tensor, ir: Tensor) -> Tensor:
        src = ir if self.attention_source == "ir" else vis
        return ir_attention_map(src, self.attn.weight, self.attn.bias)

    def forward(self, vis: Tensor, ir: Tensor) -> OsaOutput:
        if vis.shape != ir.shape:
            raise ShapeError(f"vis {tuple(vis.shape)} and ir {tuple(ir.shape)} differ")
        m = self.attention(vis, ir)
        mw = attention_weighted_concat(ir, vis, m)
        base = predict_base_offset(mw, self.offset1.weight, self.offset1.bias,
                                   self.offset2.weight, self.offset2.bias)
        aligned, bundle = deformable_align(
            vis, base, self.head.weight, self.head.bias, self.weight, self.bias,
            residual_read=self.residual_read, unit_modulation=self.unit_modulation,
        )
        return OsaOutput(
            aligned_visible=aligned,
            aligned_infrared=ir,
            attention=m,
            base_offset=base,
            vis_embed=self.sid(aligned),
            ir_embed=self.sid(ir),
            bundle=bundle,
        )


def osa_forward(vis: Tensor, ir: Tensor, module: OSA) -> OsaOutput:
    return module(vis, ir)


def recover_global_offset(vis: Tensor, ir: Tensor, steps: int = 200, lr: float = 0.1,
                          init: tuple[float, float] = (0.0, 0.0)) -> Tensor:
    """Fit a single (dy, dx) base offset that warps ``vis`` onto ``ir``.

    Only the base is optimised; the kernel is a centre-one identity, the residual
    is zero and the modulation is pinned to 1. Returns the fitted 2-vector.
    """
    from .losses import spatial_alignment_loss

    if vis.shape != ir.shape:
        raise ShapeError(f"vis {tuple(vis.shape)} and ir {tuple(ir.shape)} differ")
    B, C, H, W = vis.shape
    weight = torch.zeros(C, C, 3, 3, dtype=vis.dtype)
    weight[torch.arange(C), torch.arange(C), 1, 1] = 1.0
    d = torch.tensor(init, dtype=vis.dtype, requires_grad=True)
    zeros = torch.zeros(B, 18, H, W, dtype=vis.dtype)
    ones = torch.ones(B, 9, H, W, dtype=vis.dtype)
    opt = torch.optim.Adam([d], lr=lr)
    for _ in range(steps):
        base = d.view(1, 2, 1, 1).expand(B, 2, H, W)
        aligned = deformable_sample(vis, weight, None, OffsetBundle(base, zeros, ones))
        sm, _, _ = spatial_alignment_loss(aligned, ir)
        opt.zero_grad()
        sm.backward()
        opt.step()
    return d.detach()
