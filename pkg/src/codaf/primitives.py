"""Differentiable building blocks shared by every CoDAF module.

Feature maps are ``torch.Tensor`` objects shaped ``[B, C, H, W]``. Offsets are
``(dy, dx)`` pairs in pixels of the feature map they apply to. Reads outside
the map return zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Raised for invalid structural hyperparameters."""


@dataclass
class OffsetBundle:
    """Sampling offsets for one deformable layer.

    ``base`` is shared by all K sampling points; ``residual`` stores
    ``(dy_k, dx_k)`` at channels ``(2k, 2k+1)``; ``modulation`` is in [0, 1].
    """

    base: Tensor
    residual: Tensor
    modulation: Tensor

    @property
    def K(self) -> int:
        return self.modulation.shape[1]

    def validate(self) -> None:
        B, _, H, W = self.base.shape
        if self.base.shape[1] != 2:
            raise ShapeError(f"base offset needs 2 channels, got {self.base.shape[1]}")
        if self.residual.shape != (B, 2 * self.K, H, W):
            raise ShapeError(
                f"residual shape {tuple(self.residual.shape)} != {(B, 2 * self.K, H, W)}"
            )
        if self.modulation.shape != (B, self.K, H, W):
            raise ShapeError(
                f"modulation shape {tuple(self.modulation.shape)} != {(B, self.K, H, W)}"
            )


def _check_fmap(x: Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be [B, C, H, W], got {tuple(x.shape)}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None,
           stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation. ``padding`` defaults to ``(k - 1) // 2``."""
    _check_fmap(x)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be [C_out, C_in, k, k] with odd k, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if padding is None:
        padding = (weight.shape[2] - 1) // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "sigmoid":
        return torch.sigmoid(x)
    if fn == "relu":
        return torch.relu(x)
    raise ConfigError(f"unknown pointwise function {fn!r}")


def softmax_over_channels(x: Tensor) -> Tensor:
    _check_fmap(x)
    if x.shape[1] < 2:
        raise ShapeError("softmax over channels needs at least 2 channels")
    z = x - x.amax(dim=1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Per-channel spatial reduction to ``[B, C, 1, 1]``."""
    _check_fmap(x)
    if mode == "avg":
        return x.mean(dim=(2, 3), keepdim=True)
    if mode == "max":
        return x.amax(dim=(2, 3), keepdim=True)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def linear(v: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = v @ weight.t()
    return out if bias is None else out + bias


def mlp_bottleneck(v: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear(C -> C/r) -> ReLU -> linear(C/r -> C), no output activation."""
    if v.dim() != 2:
        raise ShapeError(f"mlp input must be [B, C], got {tuple(v.shape)}")
    C = v.shape[1]
    hidden = w1.shape[0]
    if w1.shape != (hidden, C) or w2.shape != (C, hidden):
        raise ShapeError("bottleneck weights do not match input width")
    return linear(torch.relu(linear(v, w1, b1)), w2, b2)


def bottleneck_width(channels: int, ratio: int) -> int:
    if ratio < 1 or channels % ratio:
        raise ConfigError(f"channels={channels} not divisible by ratio={ratio}")
    return channels // ratio


def base_grid(B: int, H: int, W: int, dtype=torch.float32, device=None) -> Tensor:
    """Integer lattice coordinates ``[B, H, W, 2]`` in (y, x) order."""
    ys = torch.arange(H, dtype=dtype, device=device)
    xs = torch.arange(W, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gy, gx), dim=-1).unsqueeze(0).expand(B, H, W, 2)


def bilinear_sample(x: Tensor, coords: Tensor, scale: Tensor | None = None) -> Tensor:
    """Read ``x`` at fractional pixel positions.

    ``coords`` is ``[B, Ho, Wo, 2]`` holding (y, x). Each of the four lattice
    neighbours outside the map contributes zero. An optional ``[B, Ho, Wo]``
    ``scale`` multiplies every read.
    """
    _check_fmap(x)
    B, C, H, W = x.shape
    if coords.dim() != 4 or coords.shape[0] != B or coords.shape[-1] != 2:
        raise ShapeError(f"coords must be [B, Ho, Wo, 2], got {tuple(coords.shape)}")
    # grid_sample with align_corners=False puts pixel centres at (2i + 1) / n - 1
    gx = (2 * coords[..., 1] + 1) / W - 1
    gy = (2 * coords[..., 0] + 1) / H - 1
    out = F.grid_sample(x, torch.stack([gx, gy], dim=-1), mode="bilinear", padding_mode="zeros",
                        align_corners=False)
    if scale is not None:
        out = out * scale[:, None]
    return out


def shift_read(x: Tensor, shift: Tensor) -> Tensor:
    """Read ``x`` at ``p + shift(p)`` for every lattice point ``p``.

    ``shift`` is a ``[B, 2, H, W]`` (dy, dx) field.
    """
    B, _, H, W = x.shape
    coords = base_grid(B, H, W, x.dtype, x.device) + shift.permute(0, 2, 3, 1)
    return bilinear_sample(x, coords)


def kernel_taps(k: int) -> list[tuple[int, int]]:
    """Regular k x k grid offsets p_k in row-major order."""
    r = (k - 1) // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def deformable_sample(x: Tensor, weight: Tensor, bias: Tensor | None, off: OffsetBundle) -> Tensor:
    """Modulated deformable convolution with a shared base offset.

    y(p) = sum_k w_k * x(p + base(p) + p_k + residual_k(p)) * modulation_k(p) + bias
    """
    _check_fmap(x)
    off.validate()
    B, C, H, W = x.shape
    if weight.shape[1] != C:
        raise ShapeError(f"input has {C} channels, kernel expects {weight.shape[1]}")
    k = weight.shape[2]
    if weight.shape[3] != k or off.K != k * k:
        raise ShapeError(f"offset bundle has K={off.K}, kernel needs {k * k}")
    if off.base.shape[0] != B or off.base.shape[2:] != (H, W):
        raise ShapeError("offset bundle does not match the input's batch/spatial shape")

    K = k * k
    taps = torch.tensor(kernel_taps(k), dtype=x.dtype, device=x.device)  # [K, 2]
    grid = base_grid(B, H, W, x.dtype, x.device)[:, None]  # [B, 1, H, W, 2]
    base = off.base.permute(0, 2, 3, 1)[:, None]
    res = off.residual.view(B, K, 2, H, W).permute(0, 1, 3, 4, 2)
    coords = grid + base + taps.view(1, K, 1, 1, 2) + res  # [B, K, H, W, 2]
    # all K taps in one read, stacked along the row axis
    sampled = bilinear_sample(x, coords.reshape(B, K * H, W, 2), off.modulation.reshape(B, K * H, W))
    # [C_out, C*K] @ [B, C*K, H*W] -> [B, C_out, H*W]
    out = torch.matmul(weight.reshape(weight.shape[0], C * K), sampled.reshape(B, C * K, H * W))
    out = out.view(B, -1, H, W)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


@dataclass
class GradCheckReport:
    name: str
    dtype: torch.dtype
    max_rel_err: dict[str, float] = field(default_factory=dict)
    tol: float = 0.0
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_err.items())
        extra = f" ({self.failure})" if self.failure else ""
        return f"[{status}] {self.name} {str(self.dtype).replace('torch.', '')} tol={self.tol:.0e}: {errs}{extra}"


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float | None = None,
    names: Sequence[str] | None = None,
    eps: float | None = None,
    seed: int = 0,
    name: str = "op",
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    The scalar probed is ``sum(op(*inputs) * R)`` with a fixed random ``R``.
    Per input, the error is ``max|g_analytic - g_numeric| / max(|g_numeric|_inf,
    |g_analytic|_inf)``. Inputs with ``requires_grad=False`` are held fixed.

    The analytic gradient is taken in the inputs' own dtype. The differences
    are evaluated on a float64 copy (same step), so float32 rounding in the
    forward pass does not masquerade as a gradient error.
    """
    dtype = next((t.dtype for t in inputs if t.is_floating_point()), torch.float32)
    if tol is None:
        tol = 1e-5 if dtype == torch.float64 else 1e-3
    if eps is None:
        eps = 1e-5 if dtype == torch.float64 else 1e-3
    names = list(names) if names is not None else [f"arg{i}" for i in range(len(inputs))]
    report = GradCheckReport(name=name, dtype=dtype, tol=tol)

    leaves = [t.detach().clone().requires_grad_(t.requires_grad) for t in inputs]
    out = op(*leaves)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    total = (out * proj.to(out.dtype)).sum()
    wrt = [t for t in leaves if t.requires_grad]
    analytic = torch.autograd.grad(total, wrt, allow_unused=True)
    analytic_by_id = {id(t): (g if g is not None else torch.zeros_like(t)) for t, g in zip(wrt, analytic)}

    def scalar(args) -> float:
        return (op(*args).to(torch.float64) * proj).sum().item()

    with torch.no_grad():
        ref = [t.detach().to(torch.float64) if t.is_floating_point() else t.detach() for t in leaves]
        for pos, (nm, leaf) in enumerate(zip(names, leaves)):
            if not leaf.requires_grad:
                continue
            ga = analytic_by_id[id(leaf)]
            if not torch.isfinite(ga).all():
                bad = torch.nonzero(~torch.isfinite(ga))[0].tolist()
                report.failure = f"non-finite gradient for {nm} at {bad}"
                report.max_rel_err[nm] = float("inf")
                continue
            gn = torch.zeros(leaf.shape, dtype=torch.float64)
            flat = ref[pos].reshape(-1)
            for j in range(flat.numel()):
                probe = flat.clone()
                args = list(ref)
                args[pos] = probe.view_as(ref[pos])
                probe[j] = flat[j] + eps
                fp = scalar(args)
                probe[j] = flat[j] - eps
                fm = scalar(args)
                gn.view(-1)[j] = (fp - fm) / (2 * eps)
            if not torch.isfinite(gn).all():
                bad = torch.nonzero(~torch.isfinite(gn))[0].tolist()
                report.failure = f"non-finite finite difference for {nm} at {bad}"
                report.max_rel_err[nm] = float("inf")
                continue
            ga64 = ga.to(torch.float64)
            scale = max(gn.abs().max().item(), ga64.abs().max().item())
            err = (ga64 - gn).abs().max().item()
            report.max_rel_err[nm] = err / scale if scale > 0 else err
    return report
