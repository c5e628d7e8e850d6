"""Binary tensor (CDPT) and embedding (CDPE) files with JSON sidecars.

CDPT layout::

    b"CDPT" | u8 version=1 | u32le N | u32le P | u32le tau+1 | u32le reserved=0
    | N*N*P*(tau+1) float32le, row-major over [i][j][k][t]

CDPE layout::

    b"CDPE" | u8 version=1 | u32le N | u32le tau+1 | u32le dim
    | N*(tau+1)*dim float32le, row-major

Each binary file has a UTF-8 JSON sidecar (by default ``<path>.json``).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import PROVENANCES, ClipSet, SimilarityTensor
from .errors import FormatError

VERSION = 1
TENSOR_MAGIC = b"CDPT"
EMBED_MAGIC = b"CDPE"
_F32 = np.dtype("<f4")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path, what="sidecar") -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(what, f"file not found: {path}") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(what, f"cannot parse {path}: {exc}") from None


def _read_header(data: bytes, magic: bytes, n_dims: int):
    size = 5 + 4 * n_dims
    if len(data) < 4 or data[:4] != magic:
        raise FormatError("magic", f"expected {magic!r}, got {data[:4]!r}")
    if len(data) < size:
        raise FormatError("header", f"truncated header ({len(data)} < {size} bytes)")
    if data[4] != VERSION:
        raise FormatError("version", f"unsupported version {data[4]} (expected {VERSION})")
    return struct.unpack_from(f"<{n_dims}I", data, 5), size


def _read_payload(data: bytes, offset: int, shape) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    got = len(data) - offset
    if got < expected:
        raise FormatError("payload", f"truncated payload ({got} of {expected} bytes)")
    if got > expected:
        raise FormatError("payload", f"{got - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype=_F32, offset=offset).reshape(shape).astype(np.float32)


def write_tensor(path, tensor: SimilarityTensor, captions=None, sidecar=None) -> Path:
    """Write a CDPT file plus sidecar. ``captions`` is an optional nested
    [j][k][t] list of caption strings (or None)."""
    path = Path(path)
    n, _, P, n_adv = tensor.shape
    header = TENSOR_MAGIC + struct.pack("<B4I", VERSION, n, P, n_adv, 0)
    path.write_bytes(header + tensor.values.astype(_F32).tobytes(order="C"))
    meta = {
        "format": "CDPT",
        "version": VERSION,
        "clip_ids": list(tensor.ids()),
        "prompts": list(tensor.prompts) if tensor.prompts is not None else None,
        "provenance": tensor.provenance,
    }
    if captions is not None:
        meta["captions"] = captions
    side = Path(sidecar) if sidecar is not None else sidecar_path(path)
    write_json(side, meta)
    return side


def read_tensor(path, sidecar=None):
    """Load a CDPT file, validating it against its sidecar.

    Returns ``(tensor, meta)`` where meta is the parsed sidecar dict.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError("tensor", f"file not found: {path}") from None
    (n, P, n_adv, reserved), offset = _read_header(data, TENSOR_MAGIC, 4)
    if reserved != 0:
        raise FormatError("reserved", f"reserved dim must be 0, got {reserved}")
    vals = _read_payload(data, offset, (n, n, P, n_adv))
    meta = read_json(sidecar if sidecar is not None else sidecar_path(path))
    ids = meta.get("clip_ids")
    if not isinstance(ids, list) or len(ids) != n:
        raise FormatError("clip_ids", f"sidecar lists {len(ids or [])} clips, tensor has N={n}")
    prompts = meta.get("prompts")
    if prompts is not None and len(prompts) != P:
        raise FormatError("prompts", f"sidecar lists {len(prompts)} prompts, tensor has P={P}")
    provenance = meta.get("provenance")
    if provenance not in PROVENANCES:
        raise FormatError("provenance", f"unknown provenance {provenance!r}")
    captions = meta.get("captions")
    if captions is not None:
        shape_ok = len(captions) == n and all(
            len(row) == P and all(len(cell) == n_adv for cell in row) for row in captions
        )
        if not shape_ok:
            raise FormatError("captions", "caption table does not match (N, P, tau+1)")
    tensor = SimilarityTensor(vals, provenance, tuple(ids), None if prompts is None else tuple(prompts))
    return tensor, meta


def write_embeddings(path, clips: ClipSet, prompts=None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    n, n_adv, dim = clips.embeddings.shape
    header = EMBED_MAGIC + struct.pack("<B3I", VERSION, n, n_adv, dim)
    path.write_bytes(header + clips.embeddings.astype(_F32).tobytes(order="C"))
    meta = {
        "format": "CDPE",
        "version": VERSION,
        "clip_ids": list(clips.clip_ids),
        "prompts": list(prompts) if prompts is not None else None,
        "provenance": "exact",
    }
    if extra:
        meta.update(extra)
    side = sidecar_path(path)
    write_json(side, meta)
    return side


def read_embeddings(path, sidecar=None):
    """Load a CDPE file. Returns ``(ClipSet, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError("embeddings", f"file not found: {path}") from None
    (n, n_adv, dim), offset = _read_header(data, EMBED_MAGIC, 3)
    vals = _read_payload(data, offset, (n, n_adv, dim))
    meta = read_json(sidecar if sidecar is not None else sidecar_path(path))
    ids = meta.get("clip_ids")
    if not isinstance(ids, list) or len(ids) != n:
        raise FormatError("clip_ids", f"sidecar lists {len(ids or [])} clips, file has N={n}")
    return ClipSet.from_normalized(ids, vals), meta
