"""Self-check suites: finite-difference gradients and oracle equivalence.

Every differentiable operation is registered in :data:`GRAD_CASES` with a
builder that draws small random inputs for a seed and dtype. Sampling
positions are kept at least 0.1 px away from the integer lattice so central
differences never straddle a kink of the bilinear interpolant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import dafm, losses, oracle, osa
from . import primitives as P
from .evaluate import class_ap

Builder = Callable[[torch.Generator, torch.dtype], tuple[Callable[..., Tensor], list[Tensor], list[str]]]


class SignFlip(torch.autograd.Function):
    """Identity forward, negated backward. Used to prove the suite catches bad gradients."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return -g


def _randn(gen, dtype, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype) * scale


def _uniform(gen, dtype, lo, hi, *shape):
    return (lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=torch.float64)).to(dtype)


def _off_lattice(gen, dtype, *shape, span=3):
    """Integer part in [-span, span], fractional part in [0.3, 0.7]."""
    whole = torch.randint(-span, span + 1, shape, generator=gen).to(torch.float64)
    return (whole + _uniform(gen, torch.float64, 0.3, 0.7, *shape)).to(dtype)


def _unit_rows(gen, dtype, n, d):
    return F.normalize(_randn(gen, torch.float64, n, d), dim=1).to(dtype)


def _conv(g, dt):
    return P.conv2d, [_randn(g, dt, 1, 2, 5, 5), _randn(g, dt, 3, 2, 3, 3), _randn(g, dt, 3)], ["x", "w", "b"]


def _sigmoid(g, dt):
    return (lambda x: P.pointwise(x, "sigmoid")), [_randn(g, dt, 1, 2, 3, 3)], ["x"]


def _relu(g, dt):
    # keep inputs away from the kink at zero
    x = _randn(g, dt, 1, 2, 3, 3)
    x = torch.where(x.abs() < 0.1, x.sign() * 0.1 + x, x)
    return (lambda t: P.pointwise(t, "relu")), [x], ["x"]


def _softmax(g, dt):
    return P.softmax_over_channels, [_randn(g, dt, 1, 3, 3, 3)], ["x"]


def _avg_pool(g, dt):
    return (lambda x: P.global_pool(x, "avg")), [_randn(g, dt, 2, 3, 4, 4)], ["x"]


def _max_pool(g, dt):
    return (lambda x: P.global_pool(x, "max")), [_randn(g, dt, 2, 3, 4, 4)], ["x"]


def _linear(g, dt):
    return P.linear, [_randn(g, dt, 3, 4), _randn(g, dt, 5, 4), _randn(g, dt, 5)], ["x", "w", "b"]


def _mlp(g, dt):
    C, h = 8, 2
    return P.mlp_bottleneck, [_randn(g, dt, 3, C), _randn(g, dt, h, C), _randn(g, dt, h),
                              _randn(g, dt, C, h), _randn(g, dt, C)], ["v", "w1", "b1", "w2", "b2"]


def _bilinear(g, dt):
    coords = (_off_lattice(g, dt, 1, 3, 3, 2, span=0) + torch.randint(0, 4, (1, 3, 3, 2), generator=g).to(dt))
    return P.bilinear_sample, [_randn(g, dt, 1, 2, 5, 5), coords], ["x", "coords"]


def _shift_read(g, dt):
    return P.shift_read, [_randn(g, dt, 1, 2, 4, 4), _off_lattice(g, dt, 1, 2, 4, 4, span=1)], ["x", "shift"]


def _deformable(g, dt):
    B, C, H, W = 1, 2, 4, 4

    def op(x, w, b, base, residual, modulation):
        return P.deformable_sample(x, w, b, P.OffsetBundle(base, residual, modulation))

    # base carries the fractional part; residuals stay small enough not to cross the lattice
    return op, [_randn(g, dt, B, C, H, W), _randn(g, dt, 2, C, 3, 3), _randn(g, dt, 2),
                _off_lattice(g, dt, B, 2, H, W, span=1), _uniform(g, dt, -0.15, 0.15, B, 18, H, W),
                _uniform(g, dt, 0.1, 0.9, B, 9, H, W)], ["x", "w", "b", "base", "residual", "modulation"]


def _attention_map(g, dt):
    return osa.ir_attention_map, [_randn(g, dt, 1, 3, 4, 4), _randn(g, dt, 1, 3, 1, 1), _randn(g, dt, 1)], \
        ["ir", "w", "b"]


def _weighted_concat(g, dt):
    return osa.attention_weighted_concat, [_randn(g, dt, 1, 2, 3, 3), _randn(g, dt, 1, 2, 3, 3),
                                           _uniform(g, dt, 0.1, 0.9, 1, 1, 3, 3)], ["ir", "vis", "m"]


def _base_offset(g, dt):
    return osa.predict_base_offset, [_randn(g, dt, 1, 4, 4, 4), _randn(g, dt, 2, 4, 3, 3, scale=0.5),
                                     _randn(g, dt, 2), _randn(g, dt, 2, 2, 3, 3, scale=0.5), _randn(g, dt, 2)], \
        ["mw", "w1", "b1", "w2", "b2"]


def _deformable_align(g, dt):
    C, H, W = 2, 4, 4

    def op(vis, base, head_w, head_b, weight):
        return osa.deformable_align(vis, base, head_w, head_b, weight, None)[0]

    # a zero head keeps every read at base + tap, clear of the lattice
    return op, [_randn(g, dt, 1, C, H, W), _off_lattice(g, dt, 1, 2, H, W, span=1),
                torch.zeros(27, C, 3, 3, dtype=dt), _randn(g, dt, 27, scale=0.05),
                _randn(g, dt, C, C, 3, 3)], ["vis", "base", "head_w", "head_b", "weight"]


def _sid(g, dt):
    return osa.sid_embed, [_randn(g, dt, 2, 4, 3, 3), _randn(g, dt, 5, 4), _randn(g, dt, 5),
                           _randn(g, dt, 5, 5), _randn(g, dt, 5)], ["x", "w1", "b1", "w2", "b2"]


def _gate(g, dt):
    C = 2
    return dafm.modality_gate, [_randn(g, dt, 1, C, 4, 4), _randn(g, dt, 1, C, 4, 4),
                                _randn(g, dt, C, 2 * C, 3, 3, scale=0.5), _randn(g, dt, C),
                                _randn(g, dt, 2, C, 3, 3, scale=0.5), _randn(g, dt, 2)], \
        ["va", "ia", "w1", "b1", "w2", "b2"]


def _gated_fuse(g, dt):
    return dafm.gated_fuse, [_randn(g, dt, 1, 2, 3, 3), _randn(g, dt, 1, 2, 3, 3),
                             _uniform(g, dt, 0.1, 0.9, 1, 2, 3, 3)], ["va", "ia", "g"]


def _channel_attention(g, dt):
    return (lambda *a: dafm.channel_attention(*a)[1]), [
        _randn(g, dt, 1, 4, 3, 3), _randn(g, dt, 1, 4), _randn(g, dt, 1), _randn(g, dt, 4, 1), _randn(g, dt, 4)], \
        ["f", "w1", "b1", "w2", "b2"]


def _separated_channels(g, dt, B, C, H, W):
    """Per pixel, channel values at least 0.1 apart, so the channel max has no near-ties."""
    levels = torch.cumsum(_uniform(g, torch.float64, 0.1, 0.6, B, C, H, W), dim=1) - 1.0
    perm = torch.argsort(torch.rand(B, C, H, W, generator=g, dtype=torch.float64), dim=1)
    return torch.gather(levels, 1, perm).to(dt)


def _spatial_attention(g, dt):
    return (lambda *a: dafm.spatial_attention(*a)[1]), [
        _separated_channels(g, dt, 1, 3, 4, 4), _randn(g, dt, 1, 2, 3, 3), _randn(g, dt, 1)], ["fc", "w", "b"]


def _distinct_ranges(g, make):
    # the SSIM constants use max(range x, range y); keep that max away from a tie
    while True:
        x, y = make()
        if abs((x.max() - x.min()) - (y.max() - y.min())).item() > 0.05:
            return x, y


def _info_nce(g, dt):
    return (lambda v, i: losses.info_nce(v, i, 0.5)), [_unit_rows(g, dt, 4, 5), _unit_rows(g, dt, 4, 5)], ["v", "i"]


def _ssim(g, dt):
    x, y = _distinct_ranges(g, lambda: (_randn(g, dt, 1, 2, 6, 6), _randn(g, dt, 1, 2, 6, 6)))
    return losses.ssim_loss, [x, y], ["x", "y"]


def _spatial_alignment(g, dt):
    def op(x, y):
        return losses.spatial_alignment_loss(x, y)[0]

    def make():
        # keep |x - y| away from the L1 kink at zero
        x = _randn(g, dt, 1, 2, 5, 5)
        d = _uniform(g, dt, 0.2, 1.0, 1, 2, 5, 5) * torch.where(_randn(g, dt, 1, 2, 5, 5) > 0, 1.0, -1.0).to(dt)
        return x, x + d

    return op, list(_distinct_ranges(g, make)), ["vis", "ir"]


def _sparsity(g, dt):
    return losses.sparsity_loss, [_uniform(g, dt, 0.1, 0.9, 1, 1, 4, 4)], ["m"]


def _smoothness(g, dt):
    # a ramp plus noise keeps neighbouring differences away from zero
    ramp = torch.linspace(0.1, 0.9, 16, dtype=torch.float64).view(1, 1, 4, 4)
    m = (ramp + _uniform(g, torch.float64, -0.01, 0.01, 1, 1, 4, 4)).to(dt)
    return losses.smoothness_loss, [m], ["m"]


def _attention_loss(g, dt):
    ramp = torch.linspace(0.1, 0.9, 16, dtype=torch.float64).view(1, 1, 4, 4)
    m = (ramp + _uniform(g, torch.float64, -0.01, 0.01, 1, 1, 4, 4)).to(dt)
    return (lambda t: losses.attention_loss(t)[0]), [m], ["m"]


GRAD_CASES: dict[str, Builder] = {
    "conv2d": _conv,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "softmax_over_channels": _softmax,
    "global_pool_avg": _avg_pool,
    "global_pool_max": _max_pool,
    "linear": _linear,
    "mlp_bottleneck": _mlp,
    "bilinear_sample": _bilinear,
    "shift_read": _shift_read,
    "deformable_sample": _deformable,
    "ir_attention_map": _attention_map,
    "attention_weighted_concat": _weighted_concat,
    "predict_base_offset": _base_offset,
    "deformable_align": _deformable_align,
    "sid_embed": _sid,
    "modality_gate": _gate,
    "gated_fuse": _gated_fuse,
    "channel_attention": _channel_attention,
    "spatial_attention": _spatial_attention,
    "info_nce": _info_nce,
    "ssim_loss": _ssim,
    "spatial_alignment_loss": _spatial_alignment,
    "sparsity_loss": _sparsity,
    "smoothness_loss": _smoothness,
    "attention_loss": _attention_loss,
}


@dataclass
class SuiteResult:
    name: str
    max_err: float
    tol: float
    trials: int
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"[{status}] {self.name:<38} trials={self.trials:<3} max_err={self.max_err:.2e} tol={self.tol:.0e}"
        if self.failures:
            msg += f"  first failure: {self.failures[0]}"
        return msg


def grad_suite(seeds: int = 20, dtypes=(torch.float32, torch.float64), ops=None,
               mutate: str | None = None) -> list[SuiteResult]:
    """Finite-difference check of every registered op.

    ``mutate`` names an op whose output gets its gradient sign-flipped; that
    op must then fail.
    """
    names = list(ops) if ops is not None else list(GRAD_CASES)
    unknown = set(names) - set(GRAD_CASES) | ({mutate} - set(GRAD_CASES) if mutate else set())
    if unknown:
        raise KeyError(f"unknown operation(s): {sorted(unknown)}")
    results = []
    for name in names:
        for dtype in dtypes:
            label = f"{name} ({'f64' if dtype == torch.float64 else 'f32'})"
            tol = 1e-5 if dtype == torch.float64 else 1e-3
            res = SuiteResult(label, 0.0, tol, seeds)
            for seed in range(seeds):
                gen = torch.Generator().manual_seed(seed)
                op, inputs, arg_names = GRAD_CASES[name](gen, dtype)
                if name == mutate:
                    op = (lambda f: lambda *a: SignFlip.apply(f(*a)))(op)
                report = P.grad_check(op, [t.requires_grad_() for t in inputs], tol=tol, names=arg_names,
                                      seed=seed, name=name)
                res.max_err = max(res.max_err, report.worst)
                if not report.passed:
                    res.failures.append(f"seed {seed}: {report}")
            results.append(res)
    return results


# ---------------------------------------------------------------- oracles

def _oracle_conv(rng: np.random.Generator) -> float:
    cin, cout, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    H, W = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    x, w, b = rng.standard_normal((2, cin, H, W)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
    fast = P.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    return float(np.abs(fast - oracle.naive_conv(x, w, b)).max())


def _oracle_deformable(rng: np.random.Generator) -> float:
    C, O, H, W = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(3, 6)), int(rng.integers(3, 6))
    x, w, b = rng.standard_normal((1, C, H, W)), rng.standard_normal((O, C, 3, 3)), rng.standard_normal(O)
    base = rng.standard_normal((1, 2, H, W)) * 1.5
    res = rng.standard_normal((1, 18, H, W))
    mod = 1 / (1 + np.exp(-rng.standard_normal((1, 9, H, W))))
    t = torch.tensor
    fast = P.deformable_sample(t(x), t(w), t(b), P.OffsetBundle(t(base), t(res), t(mod))).numpy()
    return float(np.abs(fast - oracle.naive_deformable_sample(x, w, b, base, res, mod)).max())


def _oracle_ssim(rng: np.random.Generator) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(3, 10)), int(rng.integers(3, 10)))
    x, y = rng.standard_normal(shape), rng.standard_normal(shape) * rng.uniform(0.2, 3)
    fast = losses.ssim_loss(torch.tensor(x), torch.tensor(y)).item()
    return abs(fast - (1 - oracle.naive_ssim(x, y)))


def _oracle_info_nce(rng: np.random.Generator) -> float:
    n, d = int(rng.integers(1, 8)), int(rng.integers(2, 9))
    v = rng.standard_normal((n, d))
    i = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    i /= np.linalg.norm(i, axis=1, keepdims=True)
    tau = float(rng.uniform(0.05, 1.0))
    fast = losses.info_nce(torch.tensor(v), torch.tensor(i), tau).item()
    return abs(fast - oracle.naive_info_nce(v, i, tau))


def _oracle_ap(rng: np.random.Generator) -> float:
    n_img = int(rng.integers(1, 4))
    gts = []
    for _ in range(int(rng.integers(1, 7))):
        x, y, w, h = rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 16), rng.uniform(4, 16)
        gts.append((int(rng.integers(n_img)), (x, y, x + w, y + h)))
    dets = []
    for _ in range(int(rng.integers(0, 12))):
        if rng.random() < 0.7:
            img, (x0, y0, x1, y1) = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 2.0, 4)
            box = (x0 + j[0], y0 + j[1], x1 + j[2] + 0.5, y1 + j[3] + 0.5)
        else:
            img = int(rng.integers(n_img))
            x, y = rng.uniform(0, 40, 2)
            box = (x, y, x + 8, y + 8)
        dets.append((img, float(np.round(rng.random(), 1)), box))
    thr = float(rng.choice([0.5, 0.75]))
    return abs(class_ap(dets, gts, [thr])[0] - oracle.naive_ap(dets, gts, thr))


ORACLE_CASES: dict[str, tuple[Callable[[np.random.Generator], float], float]] = {
    "conv2d vs naive_conv": (_oracle_conv, 1e-5),
    "deformable_sample vs naive": (_oracle_deformable, 1e-5),
    "ssim_loss vs naive_ssim": (_oracle_ssim, 1e-6),
    "info_nce vs naive_info_nce": (_oracle_info_nce, 1e-6),
    "class_ap vs naive_ap": (_oracle_ap, 1e-6),
}


def oracle_suite(trials: int = 50, seed: int = 0) -> list[SuiteResult]:
    results = []
    for name, (fn, tol) in ORACLE_CASES.items():
        res = SuiteResult(name, 0.0, tol, trials)
        for t in range(trials):
            err = fn(np.random.default_rng([seed, t]))
            res.max_err = max(res.max_err, err)
            if not err <= tol:
                res.failures.append(f"trial {t}: err {err:.3e}")
        results.append(res)
    return results


def run_all(seeds: int = 20, trials: int = 50, mutate: str | None = None) -> tuple[bool, list[SuiteResult]]:
    results = grad_suite(seeds, mutate=mutate) + oracle_suite(trials)
    return all(r.passed for r in results), results
