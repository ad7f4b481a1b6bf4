"""Shared plumbing: seeds, hashing, atomic file writes, image I/O."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

log = logging.getLogger(__name__)

JPEG_QUALITY = 95


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from any sequence of labels/values.

    Keeps every RNG stream in the toolkit independent and reproducible
    without relying on process-global seeding.
    """
    key = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """Write via a temp file in the same directory + rename.

    A failed write never leaves a partial file at `path`.
    """
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, obj, indent: int = 2) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")


def load_rgb(path: Path) -> np.ndarray:
    """Decode an image file into an HxWx3 uint8 array.

    Rejects files that cannot be decoded or are not 3-channel RGB.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(
            f"image {path} is {mode} with shape {arr.shape}; expected 3-channel RGB"
        )
    return arr


def save_image(path: Path, img: np.ndarray) -> Path:
    """Encode a uint8 HxWx3 array; format chosen by extension.

    PNG is lossless; .jpg/.jpeg uses quality 95. Writes are atomic.
    """
    path = Path(path)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected uint8 HxWx3 image to save, got {img.dtype} {img.shape}")
    suffix = path.suffix.lower()
    import io

    buf = io.BytesIO()
    if suffix in (".jpg", ".jpeg"):
        Image.fromarray(img).save(buf, "JPEG", quality=JPEG_QUALITY)
    elif suffix == ".png":
        Image.fromarray(img).save(buf, "PNG")
    else:
        raise DataError(f"unsupported image extension {suffix!r} for {path}")
    return atomic_write_bytes(path, buf.getvalue())


class EventLog:
    """Opt-in machine-readable event stream (one JSON object per line)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        ensure_dir(self.path.parent)
        self.path.write_text("")

    def emit(self, event: str, **fields) -> None:
        record = {"event": event, "time": utc_timestamp(), **fields}
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
