"""Weakly aligned RGB/IR scene generator with known per-object displacements.

Infrared frames show every object as the same warm rectangular footprint at its
reference position, so IR localises but does not identify. Identity lives in the
RGB frame (class colour plus rectangle, ellipse or striped shape), where each
object is displaced by its own shift and, at night, loses most of its contrast.
Boxes use pixel-edge coordinates ``(x_min, y_min, x_max, y_max)``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

FORMAT_VERSION = "codaf-synth/1"
ANNOTATIONS = "annotations.jsonl"
MANIFEST = "manifest.json"
NIGHT_CONTRAST = 0.2  # night RGB contrast is 1/5 of daytime
CLASS_COLOURS = np.array([[0.95, 0.25, 0.2], [0.2, 0.9, 0.3], [0.25, 0.35, 0.95], [0.9, 0.85, 0.2],
                          [0.85, 0.3, 0.9], [0.2, 0.85, 0.9]])


class DatasetError(RuntimeError):
    pass


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = 128
    objects_per_image: tuple[int, int] = (1, 6)
    classes: int = Field(3, ge=1, le=len(CLASS_COLOURS))
    max_shift: int = Field(5, ge=0, le=15)
    illumination: Literal["day", "night", "mixed"] = "mixed"
    noise_sigma: float = Field(0.02, ge=0.0)
    shift_mode: Literal["per-object", "global"] = "per-object"
    object_size: tuple[int, int] = (10, 26)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be an ordered (min, max) pair")
        smin, smax = self.object_size
        if not 2 <= smin <= smax < self.image_size:
            raise ValueError("object_size must be an ordered (min, max) pair smaller than the image")
        return self


Box = tuple[float, float, float, float]


@dataclass
class SyntheticSample:
    index: int
    rgb: np.ndarray  # [3, H, W] float32 in [0, 1]
    ir: np.ndarray  # [1, H, W] float32 in [0, 1]
    boxes_ir: list[tuple[Box, int]]
    boxes_rgb: list[tuple[Box, int]]
    shifts: list[tuple[int, int]]
    clipped: list[bool] = field(default_factory=list)
    illumination: str = "day"


def _smooth_noise(rng: np.random.Generator, size: int, coarse: int = 8) -> np.ndarray:
    grid = rng.random((coarse, coarse))
    return ndimage.zoom(grid, size / coarse, order=1)[:size, :size]


def _box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _clip(box: Box, size: int) -> Box:
    return tuple(float(min(max(v, 0), size)) for v in box)  # type: ignore[return-value]


def _masks(box: Box, size: int):
    """Ellipse and rectangle masks for a box (box may extend past the image)."""
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    ry, rx = (y1 - y0) / 2, (x1 - x0) / 2
    ellipse = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    rect = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
    return ellipse, rect, ys, xs


def _stripes(box: Box, xs: np.ndarray) -> np.ndarray:
    return (np.floor((xs - box[0]) / 3) % 2) == 0


def _class_mask(cls: int, box: Box, size: int) -> np.ndarray:
    """Visible-band class shape: 0 rectangle, 1 ellipse, 2 striped rectangle."""
    ellipse, rect, ys, xs = _masks(box, size)
    kind = cls % 3
    if kind == 0:
        return rect
    if kind == 1:
        return ellipse
    return rect & _stripes(box, xs)


def generate_sample(cfg: SceneConfig, index: int) -> SyntheticSample:
    rng = np.random.default_rng([cfg.seed, index])
    S = cfg.image_size
    if cfg.illumination == "mixed":
        illum = "day" if rng.random() < 0.5 else "night"
    else:
        illum = cfg.illumination

    ir = 0.1 + 0.15 * _smooth_noise(rng, S)
    rgb_bg = np.stack([0.3 + 0.3 * _smooth_noise(rng, S) for _ in range(3)])

    m = cfg.max_shift
    global_shift = tuple(int(v) for v in rng.integers(-m, m + 1, size=2))
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    smin, smax = cfg.object_size
    boxes_ir: list[tuple[Box, int]] = []
    boxes_rgb: list[tuple[Box, int]] = []
    shifts: list[tuple[int, int]] = []
    clipped: list[bool] = []
    rgb_obj = np.zeros((3, S, S))
    rgb_mask = np.zeros((S, S), dtype=bool)
    for _ in range(n_obj):
        for _attempt in range(20):
            w, h = (int(v) for v in rng.integers(smin, smax + 1, size=2))
            x0 = int(rng.integers(0, S - w + 1))
            y0 = int(rng.integers(0, S - h + 1))
            box = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            if all(_box_iou(box, b) < 0.05 for b, _ in boxes_ir):
                break
        else:
            continue
        cls = int(rng.integers(cfg.classes))
        if cfg.shift_mode == "global":
            dy, dx = global_shift
        else:
            dy, dx = (int(v) for v in rng.integers(-m, m + 1, size=2))
        heat = rng.uniform(0.65, 1.0)
        # every class is the same warm footprint in IR: location without identity
        ir = np.where(_masks(box, S)[1], heat, ir)

        moved = (box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy)
        mask = _class_mask(cls, moved, S)
        shade = rng.uniform(0.8, 1.0)
        rgb_obj[:, mask] = (CLASS_COLOURS[cls] * shade)[:, None]
        rgb_mask |= mask

        clipped_box = _clip(moved, S)
        boxes_ir.append((box, cls))
        boxes_rgb.append((clipped_box, cls))
        shifts.append((dy, dx))
        clipped.append(clipped_box != moved)

    rgb = np.where(rgb_mask[None], rgb_obj, rgb_bg)
    if illum == "night":
        # shrink object/background contrast around a dark mean level
        rgb = 0.08 + NIGHT_CONTRAST * (rgb - rgb_bg.mean())
    if cfg.noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, cfg.noise_sigma, rgb.shape)
        ir = ir + rng.normal(0.0, cfg.noise_sigma, ir.shape)
    return SyntheticSample(
        index=index,
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        ir=np.clip(ir, 0, 1).astype(np.float32)[None],
        boxes_ir=boxes_ir,
        boxes_rgb=boxes_rgb,
        shifts=shifts,
        clipped=clipped,
        illumination=illum,
    )


def _image_names(index: int) -> tuple[str, str]:
    return f"rgb_{index:04d}.png", f"ir_{index:04d}.png"


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _record(sample: SyntheticSample) -> dict:
    return {
        "index": sample.index,
        "illumination": sample.illumination,
        "objects": [
            {
                "class_id": cls,
                "box_ir": list(bi),
                "box_rgb": list(br),
                "shift": list(sh),
                "clipped": cl,
            }
            for (bi, cls), (br, _), sh, cl in zip(sample.boxes_ir, sample.boxes_rgb, sample.shifts, sample.clipped)
        ],
    }


def _write_one(args) -> dict:
    cfg, index, out = args
    sample = generate_sample(cfg, index)
    rgb_name, ir_name = _image_names(index)
    Image.fromarray(_to_u8(sample.rgb.transpose(1, 2, 0)), mode="RGB").save(out / rgb_name)
    Image.fromarray(_to_u8(sample.ir[0]), mode="L").save(out / ir_name)
    return _record(sample)


def write_dataset(cfg: SceneConfig, count: int, directory: str | Path, workers: int = 1) -> dict:
    """Render ``count`` samples as PNG pairs plus JSON-lines annotations and a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i, out) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_write_one, jobs, chunksize=16))
    else:
        records = [_write_one(j) for j in jobs]
    with open(out / ANNOTATIONS, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": count,
        "config": cfg.model_dump(mode="json"),
        "annotations": ANNOTATIONS,
        "images": {"rgb": "rgb_{index:04d}.png", "ir": "ir_{index:04d}.png"},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt {MANIFEST}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')!r}")
    return manifest


def _load_png(path: Path, index: int, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"sample {index}: missing image {path.name}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetError(f"sample {index}: {path.name} has mode {im.mode}, expected {mode}")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"sample {index}: cannot decode {path.name}: {exc}") from exc


def read_dataset(directory: str | Path) -> Iterator[SyntheticSample]:
    """Inverse of :func:`write_dataset`; pixels come back as multiples of 1/255."""
    root = Path(directory)
    manifest = read_manifest(root)
    ann_path = root / manifest["annotations"]
    if not ann_path.exists():
        raise DatasetError(f"missing annotation file {ann_path.name}")
    lines = ann_path.read_text().splitlines()
    if len(lines) != manifest["count"]:
        raise DatasetError(f"manifest count {manifest['count']} != {len(lines)} annotation records")
    for line_no, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"sample {line_no}: corrupt annotation record: {exc}") from exc
        index = rec["index"]
        rgb_name, ir_name = _image_names(index)
        rgb = _load_png(root / rgb_name, index, "RGB").transpose(2, 0, 1).astype(np.float32) / 255
        ir = _load_png(root / ir_name, index, "L")[None].astype(np.float32) / 255
        objs = rec["objects"]
        yield SyntheticSample(
            index=index,
            rgb=rgb,
            ir=ir,
            boxes_ir=[(tuple(o["box_ir"]), o["class_id"]) for o in objs],
            boxes_rgb=[(tuple(o["box_rgb"]), o["class_id"]) for o in objs],
            shifts=[tuple(o["shift"]) for o in objs],
            clipped=[o["clipped"] for o in objs],
            illumination=rec["illumination"],
        )


def dataset_hash(directory: str | Path) -> str:
    """SHA-256 over the manifest, annotations and every image file."""
    root = Path(directory)
    manifest = read_manifest(root)
    h = hashlib.sha256()
    h.update((root / MANIFEST).read_bytes())
    h.update((root / manifest["annotations"]).read_bytes())
    for i in range(manifest["count"]):
        for name in _image_names(i):
            h.update((root / name).read_bytes())
    return h.hexdigest()


def object_contrast(sample: SyntheticSample) -> float:
    """Channel-averaged |mean(object) - mean(background)| of the RGB frame."""
    S = sample.rgb.shape[-1]
    mask = np.zeros((S, S), dtype=bool)
    for (x0, y0, x1, y1), _ in sample.boxes_rgb:
        mask[int(y0):int(y1), int(x0):int(x1)] = True
    if not mask.any() or mask.all():
        return 0.0
    diff = sample.rgb[:, mask].mean(axis=1) - sample.rgb[:, ~mask].mean(axis=1)
    return float(np.abs(diff).mean())
