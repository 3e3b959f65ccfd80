"""Toy two-stream detector with per-scale alignment (OSA) and fusion (DAFM).

Backbone: two small CNNs (no weight sharing) producing stride 8/16/32 maps.
Neck: top-down pyramid with 1x1 laterals and nearest-neighbour upsampling.
Head: anchor-free, one cell per location, predicting class logits plus
``(dx, dy, log w, log h)`` relative to the cell centre in stride units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import Tensor, nn

from . import losses as L
from .dafm import DAFM
from .osa import OSA, SharedEmbedding
from .primitives import ShapeError

STRIDES = (8, 16, 32)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    widths: tuple[int, int, int] = (32, 64, 128)
    stem_width: int = 16
    neck_width: int = 64
    neck_norm: bool = True
    backbone_norm: bool = True
    num_classes: int = 3
    embed_dim: int = 64
    mlp_ratio: int = 4
    use_osa: bool = True
    use_magn: bool = True
    use_dacm: bool = True
    stages: tuple[bool, bool, bool] = (True, True, True)
    attention_source: Literal["ir", "visible"] = "ir"
    residual_read: Literal["shifted", "at_p"] = "shifted"
    share_sid: bool = False
    size_ranges: tuple[float, float] = (20.0, 40.0)
    center_radius: float = 1.5

    @model_validator(mode="after")
    def _check(self):
        for w in self.widths:
            if w % self.mlp_ratio:
                raise ValueError(f"width {w} not divisible by mlp_ratio {self.mlp_ratio}")
        if self.share_sid and len(set(self.widths)) != 1:
            raise ValueError("share_sid needs equal widths at every scale")
        return self

    @property
    def is_baseline(self) -> bool:
        return not (self.use_osa or self.use_magn or self.use_dacm) or not any(self.stages)


def baseline_config(**kw) -> ModelConfig:
    return ModelConfig(use_osa=False, use_magn=False, use_dacm=False, **kw)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int


class Backbone(nn.Module):
    """Stride-2 stem plus four stride-2 stages; emits stages 2-4 (strides 8, 16, 32)."""

    def __init__(self, in_ch: int, stem: int, widths: Sequence[int], norm: bool = True):
        super().__init__()
        chans = [stem, max(stem, widths[0] // 2), *widths]
        self.stem = nn.Conv2d(in_ch, chans[0], 3, stride=2, padding=1)
        self.stages = nn.ModuleList()

        def gn(c):
            return nn.GroupNorm(8, c) if norm else nn.Identity()

        for cin, cout in zip(chans[:-1], chans[1:]):
            self.stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1), gn(cout), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), gn(cout), nn.ReLU(),
            ))

    def forward(self, x: Tensor) -> list[Tensor]:
        x = F.relu(self.stem(x))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[1:]


def two_stream_backbone(rgb: Tensor, ir: Tensor, rgb_net: Backbone, ir_net: Backbone):
    H, W = rgb.shape[2:]
    if H % 32 or W % 32:
        raise ShapeError(f"image size {H}x{W} must be divisible by 32")
    if ir.shape[2:] != rgb.shape[2:]:
        raise ShapeError("rgb and ir images must share spatial size")
    return rgb_net(rgb), ir_net(ir)


class Neck(nn.Module):
    """Top-down lateral fusion. Group-normalised laterals make the detector
    insensitive to the overall scale of the fused maps."""

    def __init__(self, widths: Sequence[int], out: int, norm: bool = True):
        super().__init__()
        self.lateral = nn.ModuleList(
            nn.Sequential(nn.Conv2d(w, out, 1), nn.GroupNorm(8, out)) if norm else nn.Conv2d(w, out, 1)
            for w in widths)
        self.smooth = nn.ModuleList(nn.Conv2d(out, out, 3, padding=1) for _ in widths)

    def forward(self, feats: Sequence[Tensor]) -> list[Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        outs = [lat[-1]]
        for f in reversed(lat[:-1]):
            outs.insert(0, f + F.interpolate(outs[0], size=f.shape[2:], mode="nearest"))
        return [F.relu(conv(p)) for conv, p in zip(self.smooth, outs)]


class Head(nn.Module):
    def __init__(self, width: int, num_classes: int, prior: float = 0.01):
        super().__init__()
        self.tower = nn.Conv2d(width, width, 3, padding=1)
        self.cls = nn.Conv2d(width, num_classes, 3, padding=1)
        self.reg = nn.Conv2d(width, 4, 3, padding=1)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.constant_(self.cls.bias, -math.log((1 - prior) / prior))
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)

    def forward(self, pyramid: Sequence[Tensor]) -> list[tuple[Tensor, Tensor]]:
        outs = []
        for p in pyramid:
            t = F.relu(self.tower(p))
            outs.append((self.cls(t), self.reg(t)))
        return outs


# ---------------------------------------------------------------- box coding

def cell_centers(h: int, w: int, stride: int, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    return torch.meshgrid(ys, xs, indexing="ij")


def encode(box, cy: float, cx: float, stride: int) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    return (
        ((x0 + x1) / 2 - cx) / stride,
        ((y0 + y1) / 2 - cy) / stride,
        math.log((x1 - x0) / stride),
        math.log((y1 - y0) / stride),
    )


def decode(reg: Tensor, cy: Tensor, cx: Tensor, stride: int) -> Tensor:
    """``reg[..., 4]`` at cell centres -> ``[..., 4]`` boxes (x0, y0, x1, y1)."""
    bx = cx + reg[..., 0] * stride
    by = cy + reg[..., 1] * stride
    bw = torch.exp(reg[..., 2].clamp(max=8.0)) * stride
    bh = torch.exp(reg[..., 3].clamp(max=8.0)) * stride
    return torch.stack((bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2), dim=-1)


def level_for(box, size_ranges: Sequence[float]) -> int:
    side = max(box[2] - box[0], box[3] - box[1])
    for lvl, bound in enumerate(size_ranges):
        if side < bound:
            return lvl
    return len(size_ranges)


@dataclass
class Targets:
    """Per-level dense targets for one batch."""

    cls: list[Tensor]  # [B, nc, h, w] one-hot
    reg: list[Tensor]  # [B, 4, h, w] encoded
    boxes: list[Tensor]  # [B, 4, h, w] absolute GT box per positive cell
    pos: list[Tensor]  # [B, h, w] bool

    @property
    def num_pos(self) -> int:
        return int(sum(p.sum().item() for p in self.pos))


def assign(gt: Sequence[Sequence[tuple]], shapes: Sequence[tuple[int, int]], num_classes: int,
           size_ranges=(20.0, 40.0), radius: float = 1.5) -> Targets:
    """Centre-sampling assignment.

    Each box goes to one pyramid level by its longer side. On that level, cells
    whose centre lies inside the box and within ``radius * stride`` of the box
    centre are positive; the cell containing the centre always is. Cells
    claimed twice go to the smaller box.
    """
    B = len(gt)
    out = Targets([], [], [], [])
    for (h, w) in shapes:
        out.cls.append(torch.zeros(B, num_classes, h, w))
        out.reg.append(torch.zeros(B, 4, h, w))
        out.boxes.append(torch.zeros(B, 4, h, w))
        out.pos.append(torch.zeros(B, h, w, dtype=torch.bool))
    for b, objects in enumerate(gt):
        area = [np.full(s, np.inf) for s in shapes]
        for box, cls in objects:
            x0, y0, x1, y1 = box
            if x1 <= x0 or y1 <= y0:
                continue
            lvl = min(level_for(box, size_ranges), len(shapes) - 1)
            s = STRIDES[lvl]
            h, w = shapes[lvl]
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            cells = set()
            ci = min(max(int(cy // s), 0), h - 1)
            cj = min(max(int(cx // s), 0), w - 1)
            cells.add((ci, cj))
            for i in range(h):
                for j in range(w):
                    py, px = (i + 0.5) * s, (j + 0.5) * s
                    if (x0 < px < x1 and y0 < py < y1
                            and abs(px - cx) < radius * s and abs(py - cy) < radius * s):
                        cells.add((i, j))
            a = (x1 - x0) * (y1 - y0)
            for i, j in cells:
                if a >= area[lvl][i, j]:
                    continue
                area[lvl][i, j] = a
                py, px = (i + 0.5) * s, (j + 0.5) * s
                out.pos[lvl][b, i, j] = True
                out.cls[lvl][b, :, i, j] = 0
                out.cls[lvl][b, cls, i, j] = 1
                out.reg[lvl][b, :, i, j] = torch.tensor(encode(box, py, px, s))
                out.boxes[lvl][b, :, i, j] = torch.tensor(box, dtype=torch.float32)
    return out


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalised IoU of matching rows of ``[N, 4]`` box tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp_min(0) * (a[:, 3] - a[:, 1]).clamp_min(0)
    area_b = (b[:, 2] - b[:, 0]).clamp_min(0) * (b[:, 3] - b[:, 1]).clamp_min(0)
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    inter = (rb - lt).clamp_min(0).prod(dim=1)
    union = area_a + area_b - inter
    iou = inter / union.clamp_min(1e-9)
    hull = (torch.maximum(a[:, 2:], b[:, 2:]) - torch.minimum(a[:, :2], b[:, :2])).clamp_min(0).prod(dim=1)
    return iou - (hull - union) / hull.clamp_min(1e-9)


def detection_loss(raw: Sequence[tuple[Tensor, Tensor]], targets: Targets) -> Tensor:
    """BCE over every cell and class plus (1 - GIoU) on positives, both per positive."""
    npos = max(targets.num_pos, 1)
    cls_loss = raw[0][0].new_zeros(())
    reg_loss = raw[0][0].new_zeros(())
    for lvl, (cls, reg) in enumerate(raw):
        s = STRIDES[lvl]
        cls_loss = cls_loss + F.binary_cross_entropy_with_logits(
            cls, targets.cls[lvl].to(cls.dtype), reduction="sum")
        pos = targets.pos[lvl]
        if pos.any():
            cy, cx = cell_centers(*pos.shape[1:], s, dtype=reg.dtype)
            pred = decode(reg.permute(0, 2, 3, 1), cy, cx, s)[pos]
            gt = targets.boxes[lvl].permute(0, 2, 3, 1)[pos].to(reg.dtype)
            reg_loss = reg_loss + (1 - giou(pred, gt)).sum()
    return (cls_loss + reg_loss) / npos


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy NMS; suppresses boxes with IoU strictly above the threshold."""
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        xx0 = np.maximum(boxes[idx, 0], boxes[:, 0])
        yy0 = np.maximum(boxes[idx, 1], boxes[:, 1])
        xx1 = np.minimum(boxes[idx, 2], boxes[:, 2])
        yy1 = np.minimum(boxes[idx, 3], boxes[:, 3])
        inter = np.clip(xx1 - xx0, 0, None) * np.clip(yy1 - yy0, 0, None)
        iou = inter / np.maximum(areas[idx] + areas - inter, 1e-12)
        suppressed |= iou > iou_threshold
    return keep


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


def postprocess(raw: Sequence[tuple[Tensor, Tensor]], image_size: tuple[int, int],
                score_threshold: float = 0.05, pre_nms: int = 200, max_det: int = 100,
                iou_threshold: float = 0.5) -> list[list[Detection]]:
    """Decode raw head outputs into clipped, class-wise NMS-filtered detections."""
    H, W = image_size
    B = raw[0][0].shape[0]
    all_boxes, all_scores, all_cls = [], [], []
    with torch.no_grad():
        for lvl, (cls, reg) in enumerate(raw):
            s = STRIDES[lvl]
            h, w = cls.shape[2:]
            cy, cx = cell_centers(h, w, s, dtype=reg.dtype)
            boxes = decode(reg.permute(0, 2, 3, 1), cy, cx, s).reshape(B, h * w, 4)
            scores = torch.sigmoid(cls).reshape(B, cls.shape[1], h * w)
            nc = cls.shape[1]
            all_boxes.append(boxes.unsqueeze(1).expand(B, nc, h * w, 4).reshape(B, -1, 4))
            all_scores.append(scores.reshape(B, -1))
            all_cls.append(torch.arange(nc).view(1, nc, 1).expand(B, nc, h * w).reshape(B, -1))
        boxes = torch.cat(all_boxes, 1).double().numpy()
        scores = torch.cat(all_scores, 1).double().numpy()
        classes = torch.cat(all_cls, 1).numpy()
    results = []
    for b in range(B):
        sel = np.nonzero(scores[b] > score_threshold)[0]
        sel = sel[np.argsort(-scores[b, sel], kind="stable")[:pre_nms]]
        bx = boxes[b, sel].copy()
        bx[:, [0, 2]] = bx[:, [0, 2]].clip(0, W)
        bx[:, [1, 3]] = bx[:, [1, 3]].clip(0, H)
        ok = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
        bx, sc, cl = bx[ok], scores[b, sel][ok], classes[b, sel][ok]
        dets: list[Detection] = []
        for c in np.unique(cl):
            idx = np.nonzero(cl == c)[0]
            for k in nms_indices(bx[idx], sc[idx], iou_threshold):
                i = idx[k]
                dets.append(Detection(tuple(float(v) for v in bx[i]), float(sc[i]), int(c)))
        dets.sort(key=lambda d: -d.score)
        results.append(dets[:max_det])
    return results


# ---------------------------------------------------------------- full model

@dataclass
class ModelOutput:
    raw: list[tuple[Tensor, Tensor]]
    align_terms: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


class CoDAF(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.rgb_backbone = Backbone(3, cfg.stem_width, cfg.widths, cfg.backbone_norm)
        self.ir_backbone = Backbone(1, cfg.stem_width, cfg.widths, cfg.backbone_norm)
        shared = SharedEmbedding(cfg.widths[0], cfg.embed_dim) if cfg.share_sid and cfg.use_osa else None
        self.osa = nn.ModuleDict()
        self.dafm = nn.ModuleDict()
        for t, (c, on) in enumerate(zip(cfg.widths, cfg.stages)):
            if not on:
                continue
            if cfg.use_osa:
                self.osa[str(t)] = OSA(c, cfg.embed_dim, attention_source=cfg.attention_source,
                                       residual_read=cfg.residual_read, sid=shared)
            if cfg.use_magn or cfg.use_dacm:
                self.dafm[str(t)] = DAFM(c, cfg.mlp_ratio, use_magn=cfg.use_magn, use_dacm=cfg.use_dacm)
        self.neck = Neck(cfg.widths, cfg.neck_width, cfg.neck_norm)
        self.head = Head(cfg.neck_width, cfg.num_classes)

    def forward(self, rgb: Tensor, ir: Tensor) -> ModelOutput:
        vis_feats, ir_feats = two_stream_backbone(rgb, ir, self.rgb_backbone, self.ir_backbone)
        fused, terms, diags = [], [], []
        for t, (v, i) in enumerate(zip(vis_feats, ir_feats)):
            diag: dict = {}
            key = str(t)
            va, ia = v, i
            if key in self.osa:
                o = self.osa[key](v, i)
                va, ia = o.aligned_visible, o.aligned_infrared
                terms.append({"osa": o})
                diag.update(attention=o.attention.detach(), base_offset=o.base_offset.detach())
            if key in self.dafm:
                f, g = self.dafm[key].fuse(va, ia)
                if g is not None:
                    diag["gate"] = g.detach()
            else:
                f = va + ia
            fused.append(f)
            diags.append(diag)
        raw = self.head(self.neck(fused))
        return ModelOutput(raw=raw, align_terms=terms, diagnostics=diags)

    def aux_parameters(self) -> list[nn.Parameter]:
        """Gate and offset-prediction layers, which are trained with a reduced learning rate."""
        mods = [m for d in self.dafm.values() if d.use_magn for m in (d.gate1, d.gate2)]
        mods += [m for o in self.osa.values() for m in (o.attn, o.offset1, o.offset2, o.head)]
        return [p for m in mods for p in m.parameters()]

    def param_groups(self, lr: float, aux_scale: float) -> list[dict]:
        aux = self.aux_parameters()
        ids = {id(p) for p in aux}
        main = [p for p in self.parameters() if id(p) not in ids]
        groups = [{"params": main, "lr": lr}]
        if aux:
            groups.append({"params": aux, "lr": lr * aux_scale})
        return groups

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def alignment_terms(out: ModelOutput, tau: float = L.DEFAULT_TAU, contrastive: bool = True) -> list[dict]:
    terms = []
    for entry in out.align_terms:
        o = entry["osa"]
        sm, ssim, mae = L.spatial_alignment_loss(o.aligned_visible, o.aligned_infrared)
        _, sparse, smooth = L.attention_loss(o.attention)
        contrast = L.info_nce(o.vis_embed, o.ir_embed, tau) if contrastive else sm.new_zeros(())
        terms.append({"contrast": contrast, "ssim": ssim, "mae": mae, "sparse": sparse, "smooth": smooth})
    return terms


def compute_loss(out: ModelOutput, targets: Targets, lam: float = L.ALIGN_WEIGHT,
                 tau: float = L.DEFAULT_TAU, contrastive: bool = True):
    det = detection_loss(out.raw, targets)
    return L.compose(det, alignment_terms(out, tau, contrastive), lam)


def codaf_forward(model: CoDAF, rgb: Tensor, ir: Tensor, gt=None, lam: float = L.ALIGN_WEIGHT,
                  tau: float = L.DEFAULT_TAU, contrastive: bool = True):
    """Forward pass plus decoding; with ``gt`` also the loss breakdown."""
    out = model(rgb, ir)
    dets = postprocess(out.raw, rgb.shape[2:])
    breakdown = None
    if gt is not None:
        targets = assign(gt, [r[0].shape[2:] for r in out.raw], model.cfg.num_classes,
                         model.cfg.size_ranges, model.cfg.center_radius)
        _, breakdown = compute_loss(out, targets, lam, tau, contrastive)
    return dets, breakdown, out.diagnostics
