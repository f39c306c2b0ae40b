"""On-disk formats: checkpoints, the RGB mask PNG convention, canonical JSON.

Checkpoint layout (all integers little-endian)::

    b"AVDCKPT\\0"            8-byte magic
    uint32 version
    uint64 n                 length of the JSON header
    n bytes                  UTF-8 canonical JSON header
    float32 payload          tensors back to back, in header order

The header lists every tensor as ``{"name", "shape", "offset"}`` (offset in
elements from the start of the payload) next to free-form metadata.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .synthvessel import AVMask

MAGIC = b"AVDCKPT\0"
VERSION = 1

ARTERY_RGB = (255, 0, 0)
VEIN_RGB = (0, 0, 255)
CROSSING_RGB = (255, 0, 255)
LEGAL_RGB = {(0, 0, 0), ARTERY_RGB, VEIN_RGB, CROSSING_RGB}


class CheckpointError(ValueError):
    pass


class MaskFormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest(obj) -> str:
    """SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    index, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    header = canonical_json({"metadata": metadata, "tensors": index}).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(header)))
    buf.write(header)
    for b in blobs:
        buf.write(b)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<IQ", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos += 12
    try:
        header = json.loads(raw[pos : pos + n].decode())
        entries, metadata = header["tensors"], header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    body = raw[pos + n :]
    if len(body) % 4:
        raise CheckpointError(f"{path}: payload is not a whole number of float32 values")
    payload = np.frombuffer(body, dtype="<f4")
    tensors = {}
    for entry in entries:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past end of file")
        tensors[entry["name"]] = payload[start : start + size].astype(np.float32).reshape(entry["shape"])
    return tensors, metadata


# ---------------------------------------------------------------- mask PNGs


def mask_to_rgb(mask: AVMask) -> np.ndarray:
    rgb = np.zeros((mask.height, mask.width, 3), np.uint8)
    rgb[..., 0] = mask.artery * 255
    rgb[..., 2] = mask.vein * 255
    return rgb


def rgb_to_mask(rgb: np.ndarray) -> AVMask:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise MaskFormatError(f"expected an RGB image, got array of shape {rgb.shape}")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    if g.any():
        raise MaskFormatError("green channel must be 0 everywhere")
    if not (np.isin(r, (0, 255)).all() and np.isin(b, (0, 255)).all()):
        raise MaskFormatError("red and blue channels must be 0 or 255")
    return AVMask((r == 255).astype(np.uint8), (b == 255).astype(np.uint8))


def write_mask_png(path, mask: AVMask) -> None:
    Image.fromarray(mask_to_rgb(mask)).save(path, format="PNG", optimize=False)


def read_mask_png(path) -> AVMask:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise MaskFormatError(f"{path}: mode {im.mode}, expected RGB")
        return rgb_to_mask(np.asarray(im))


def to_gray8(channel: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to 0..255."""
    return np.round((np.clip(channel, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def write_gray_png(path, channel: np.ndarray) -> None:
    Image.fromarray(to_gray8(channel)).save(path, format="PNG", optimize=False)
