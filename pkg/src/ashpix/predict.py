"""Apply a trained generator checkpoint to new satellite images and write
delimitation masks with provenance sidecars.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import (CheckpointRecord, UnetGenerator, batch_to_tensor,
                     checkpoint_meta_path, load_generator_checkpoint,
                     tensor_to_batch)
from .pipeline import IMAGE_EXTENSIONS, denormalize, normalize, resize_image
from .util import derive_seed, ensure_dir, load_rgb, save_image, utc_timestamp, write_json

log = logging.getLogger(__name__)


@dataclass
class PredictionRequest:
    image_path: Path
    checkpoint: Path | CheckpointRecord
    output_path: Path
    dropout_seed: int = 0
    use_dropout: bool = True

    @property
    def checkpoint_path(self) -> Path:
        if isinstance(self.checkpoint, CheckpointRecord):
            return Path(self.checkpoint.weights_path)
        return Path(self.checkpoint)


@dataclass
class BatchResult:
    """Per-image outcomes of a batch prediction run."""

    outputs: list[Path] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "predicted": len(self.outputs),
            "failed": len(self.failures),
            "failures": [{"file": name, "error": err} for name, err in self.failures],
        }


def load_image(path: Path, size: int = 256) -> np.ndarray:
    """Decode, bilinear-resize to the model input size, and scale to
    [-1, 1] using the dataset normalization contract."""
    raw = load_rgb(path)
    resized = resize_image(raw, (size, size))
    return normalize(resized)


def _generate_mask(generator: UnetGenerator, image: np.ndarray,
                   dropout_seed: int, use_dropout: bool) -> np.ndarray:
    import torch

    generator.apply_dropout = use_dropout
    generator.seed_dropout(dropout_seed)
    with torch.no_grad():
        output = tensor_to_batch(generator(batch_to_tensor(image[None])))
    return denormalize(output[0])


def _write_mask(mask: np.ndarray, output_path: Path, record: CheckpointRecord,
                image_path: Path) -> Path:
    output_path = Path(output_path)
    save_image(output_path, mask)
    sidecar = {
        "checkpoint_epoch": record.epoch,
        "architecture_sha256": record.metadata.get("architecture_sha256"),
        "input_path": str(image_path),
        "timestamp": utc_timestamp(),
    }
    write_json(checkpoint_meta_path(output_path), sidecar)
    return output_path


def predict(request: PredictionRequest, expected_arch=None) -> Path:
    """Generate one mask. The checkpoint's architecture hash is verified
    before inference and the mask is written atomically, so a failed
    prediction leaves no output file."""
    generator, record = load_generator_checkpoint(request.checkpoint_path,
                                                  expected_arch=expected_arch)
    image = load_image(request.image_path, size=generator.spec.image_size)
    mask = _generate_mask(generator, image, request.dropout_seed,
                          request.use_dropout)
    return _write_mask(mask, request.output_path, record, request.image_path)


def predict_batch(input_dir: Path, checkpoint: Path, out_dir: Path,
                  dropout_seed: int = 0, use_dropout: bool = True) -> BatchResult:
    """Predict a mask for every image in a directory.

    Failures are collected per image; successes are unaffected. Masks are
    written as PNG named after each input's stem, plus a summary.json.
    """
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DataError(f"not a directory: {input_dir}")
    files = sorted(p for p in input_dir.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise DataError(f"no images found in {input_dir}")

    generator, record = load_generator_checkpoint(checkpoint)
    out_dir = ensure_dir(Path(out_dir))
    result = BatchResult()
    for path in files:
        try:
            image = load_image(path, size=generator.spec.image_size)
            mask = _generate_mask(generator, image,
                                  derive_seed(dropout_seed, path.name), use_dropout)
            result.outputs.append(
                _write_mask(mask, out_dir / f"{path.stem}.png", record, path))
        except DataError as exc:
            log.warning("prediction failed for %s: %s", path.name, exc)
            result.failures.append((path.name, str(exc)))
    write_json(out_dir / "summary.json", result.summary())
    return result
