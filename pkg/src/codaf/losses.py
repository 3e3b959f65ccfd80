"""Alignment objectives and their composition into the total training loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .primitives import ShapeError

SSIM_WEIGHT = 0.3
MAE_WEIGHT = 0.5
ATTN_EPS = 1e-8
SMOOTH_WEIGHT = 0.1
ALIGN_WEIGHT = 0.1
DEFAULT_TAU = 0.07
SSIM_WINDOW = 7


def info_nce(vis_emb: Tensor, ir_emb: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """One-directional InfoNCE: visible rows scored against all infrared rows."""
    if vis_emb.shape[0] == 0:
        raise ValueError("info_nce needs at least one pair")
    if vis_emb.shape != ir_emb.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(vis_emb.shape)} vs {tuple(ir_emb.shape)}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = vis_emb @ ir_emb.t() / tau
    targets = torch.arange(vis_emb.shape[0], device=vis_emb.device)
    return F.cross_entropy(logits, targets)


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def ssim_loss(x: Tensor, y: Tensor, window: int = SSIM_WINDOW) -> Tensor:
    """1 - mean SSIM with a uniform window over valid positions.

    The window shrinks to ``min(window, H, W)`` on small maps. Stability
    constants use ``L = max(range(x), range(y))`` floored at 1e-3.
    """
    _check_pair(x, y)
    B, C, H, W = x.shape
    win = min(window, H, W)
    L = torch.maximum(x.max() - x.min(), y.max() - y.min()).clamp_min(1e-3)
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2

    def local_mean(t: Tensor) -> Tensor:
        return F.avg_pool2d(t.reshape(B * C, 1, H, W), win, stride=1)

    mx = local_mean(x)
    my = local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cov = local_mean(x * y) - mx * my
    ssim = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return 1 - ssim.mean()


def spatial_alignment_loss(va: Tensor, ia: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(sm, ssim, mae)`` with ``sm = 0.3 * ssim + 0.5 * mae``."""
    _check_pair(va, ia)
    ssim = ssim_loss(va, ia)
    mae = (va - ia).abs().mean()
    return SSIM_WEIGHT * ssim + MAE_WEIGHT * mae, ssim, mae


def sparsity_loss(m: Tensor, eps: float = ATTN_EPS) -> Tensor:
    B, _, H, W = m.shape
    return -(m * torch.log(m + eps)).sum() / (B * H * W)


def smoothness_loss(m: Tensor) -> Tensor:
    B, _, H, W = m.shape
    if H < 2 or W < 2:
        raise ShapeError(f"smoothness needs H, W >= 2, got {H}x{W}")
    dh = (m[..., :, 1:] - m[..., :, :-1]).abs().sum() / (B * H * (W - 1))
    dv = (m[..., 1:, :] - m[..., :-1, :]).abs().sum() / (B * (H - 1) * W)
    return dh + dv


def attention_loss(m: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(attn, sparse, smooth)``."""
    sparse = sparsity_loss(m, ATTN_EPS)
    smooth = smoothness_loss(m)
    return sparse + SMOOTH_WEIGHT * smooth, sparse, smooth


def total_alignment_loss(per_scale: Sequence[tuple]) -> Tensor | float:
    """Mean over scales of ``contrast + sm + attn``."""
    if not per_scale:
        raise ValueError("total_alignment_loss needs at least one scale")
    return sum(c + s + a for c, s, a in per_scale) / len(per_scale)


def total_loss(det, align, lam: float = ALIGN_WEIGHT):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return det + lam * align


@dataclass
class LossBreakdown:
    contrast: float = 0.0
    ssim: float = 0.0
    mae: float = 0.0
    sm: float = 0.0
    sparse: float = 0.0
    smooth: float = 0.0
    attn: float = 0.0
    align_total: float = 0.0
    det: float = 0.0
    total: float = 0.0

    def identity_errors(self, lam: float) -> dict[str, float]:
        return {
            "sm": abs(self.sm - (SSIM_WEIGHT * self.ssim + MAE_WEIGHT * self.mae)),
            "attn": abs(self.attn - (self.sparse + SMOOTH_WEIGHT * self.smooth)),
            "align_total": abs(self.align_total - (self.contrast + self.sm + self.attn)),
            "total": abs(self.total - (self.det + lam * self.align_total)),
        }

    def check(self, lam: float, tol: float = 1e-6) -> None:
        for name, err in self.identity_errors(lam).items():
            if not err <= tol:
                raise ArithmeticError(f"loss identity for {name} off by {err:.3e}")

    def first_nonfinite(self) -> str | None:
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                return name
        return None

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def compose(det: Tensor, per_scale: Sequence[dict], lam: float) -> tuple[Tensor, LossBreakdown]:
    """Combine detection and per-scale alignment terms.

    Each ``per_scale`` entry holds tensors ``contrast, ssim, mae, sparse,
    smooth``. Scalars are promoted to float64 so the logged breakdown satisfies
    its composition identities to rounding in double precision.
    """
    det64 = det.to(torch.float64)
    zero = det64.new_zeros(())
    keys = ("contrast", "ssim", "mae", "sparse", "smooth")
    if per_scale:
        means = {k: sum(d[k].to(torch.float64) for d in per_scale) / len(per_scale) for k in keys}
    else:
        means = {k: zero for k in keys}
    sm = SSIM_WEIGHT * means["ssim"] + MAE_WEIGHT * means["mae"]
    attn = means["sparse"] + SMOOTH_WEIGHT * means["smooth"]
    align = means["contrast"] + sm + attn
    total = total_loss(det64, align, lam)
    bd = LossBreakdown(
        contrast=means["contrast"].item(), ssim=means["ssim"].item(), mae=means["mae"].item(),
        sm=sm.item(), sparse=means["sparse"].item(), smooth=means["smooth"].item(),
        attn=attn.item(), align_total=align.item(), det=det64.item(), total=total.item(),
    )
    return total, bd
