"""Checkpoint files: a JSON header followed by raw little-endian float32 arrays.

Layout::

    b"CODAFCKP" | uint32 LE header length | UTF-8 JSON header | array bytes

The header carries ``format_version``, the run config, epoch, a metric
snapshot and one ``{name, shape, offset, nbytes}`` record per array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"CODAFCKP"
FORMAT_VERSION = "codaf-ckpt/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, torch.Tensor], header: dict) -> None:
    records, blobs, offset = [], [], 0
    for name, tensor in params.items():
        if tensor.dtype != torch.float32:
            raise CheckpointError(f"array {name!r} is {tensor.dtype}; only float32 is stored")
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        data = arr.tobytes(order="C")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    full = dict(header, format_version=FORMAT_VERSION, arrays=records)
    head = json.dumps(full, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a CoDAF checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format_version')!r}")
    body = raw[12 + hlen:]
    params = {}
    for rec in header["arrays"]:
        chunk = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(chunk) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {rec['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(rec["shape"])
        params[rec["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, params
