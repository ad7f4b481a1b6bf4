"""Paired-image dataset pipeline: resize, combine, normalize, split, prepare.

Source satellite images and their black-and-white delimitation masks are
joined side by side into a single sample image (source left, mask right),
then partitioned into train/val/test stratified by satellite type.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from math import floor
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .util import ensure_dir, load_rgb, save_image, write_json

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
DEFAULT_FRACTIONS = (0.80, 0.15, 0.05)
DEFAULT_SIZE = (256, 256)


class Satellite(str, Enum):
    GOES16 = "GOES16"
    GOES17 = "GOES17"
    HIMAWARI8 = "HIMAWARI8"
    METEOSAT11 = "METEOSAT11"

    @classmethod
    def parse(cls, text: str) -> "Satellite":
        key = re.sub(r"[^a-z0-9]", "", text.lower())
        for member in cls:
            if key == member.value.lower():
                return member
        raise DataError(f"unknown satellite tag {text!r}; expected one of "
                        f"{[m.value for m in cls]}")


_PREFIX_RE = re.compile(r"^(goes[\W_]?16|goes[\W_]?17|himawari[\W_]?8|meteosat[\W_]?11)",
                        re.IGNORECASE)


def infer_satellite(filename: str) -> Satellite | None:
    """Read the satellite tag from a filename prefix, e.g. 'goes16_0001.png'."""
    m = _PREFIX_RE.match(Path(filename).name)
    if m is None:
        return None
    return Satellite.parse(m.group(1))


@dataclass(frozen=True)
class RawPair:
    """A source/mask file pair on disk, tagged with its satellite."""

    source_path: Path
    target_path: Path
    satellite: Satellite

    @property
    def identifier(self) -> str:
        return Path(self.source_path).name


@dataclass
class ImagePair:
    """A source image and its mask, stored as one side-by-side array.

    `combined` is H x 2W x 3; the source occupies the left half and the
    target the right half, so the column-partition invariant holds by
    construction. A pair is wholly raw (uint8, [0,255]) or wholly
    normalized (float32, [-1,1]), tracked by `normalized`.
    """

    combined: np.ndarray
    satellite: Satellite | None = None
    normalized: bool = False
    identifier: str = ""

    def __post_init__(self):
        c = self.combined
        if c.ndim != 3 or c.shape[2] != 3 or c.shape[1] % 2 != 0:
            raise DataError(f"combined image must be HxWx3 with even W, got {c.shape}")

    @property
    def width(self) -> int:
        return self.combined.shape[1] // 2

    @property
    def source(self) -> np.ndarray:
        return self.combined[:, : self.width, :]

    @property
    def target(self) -> np.ndarray:
        return self.combined[:, self.width :, :]

    @classmethod
    def from_halves(cls, source: np.ndarray, target: np.ndarray,
                    satellite: Satellite | None = None, normalized: bool = False,
                    identifier: str = "") -> "ImagePair":
        return cls(combine_pair(source, target), satellite, normalized, identifier)

    def normalize(self) -> "ImagePair":
        if self.normalized:
            return self
        return ImagePair(normalize(self.combined), self.satellite, True, self.identifier)

    def denormalize(self) -> "ImagePair":
        if not self.normalized:
            return self
        return ImagePair(denormalize(self.combined), self.satellite, False, self.identifier)


@dataclass
class SplitManifest:
    """Reviewable record of a stratified split, reproducible from its seed."""

    train: list[str]
    val: list[str]
    test: list[str]
    per_satellite_counts: dict[str, dict[str, int]]
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def split_of(self, identifier: str) -> str:
        for name in ("train", "val", "test"):
            if identifier in getattr(self, name):
                return name
        raise DataError(f"{identifier!r} is not in the manifest")

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "splits": {"train": self.train, "val": self.val, "test": self.test},
            "per_satellite_counts": self.per_satellite_counts,
        }

    def save(self, path: Path) -> Path:
        return write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path: Path) -> "SplitManifest":
        import json

        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            splits = doc["splits"]
            return cls(
                train=list(splits["train"]),
                val=list(splits["val"]),
                test=list(splits["test"]),
                per_satellite_counts=doc["per_satellite_counts"],
                seed=int(doc["seed"]),
                fractions=tuple(doc["fractions"]),
            )
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# pixel operations


def _check_raw(img: np.ndarray, op: str) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"{op}: expected HxWx3 image, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        if img.size and (img.min() < 0 or img.max() > 255):
            raise DataError(f"{op}: pixel values outside [0, 255]")


def resize_image(img: np.ndarray, size: tuple[int, int] = DEFAULT_SIZE) -> np.ndarray:
    """Bilinear-resize an HxWx3 image to `size` (height, width), uint8 out."""
    _check_raw(img, "resize_image")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"resize_image: degenerate input shape {img.shape}")
    height, width = size
    arr = img.astype(np.uint8) if img.dtype != np.uint8 else img
    out = Image.fromarray(arr).resize((width, height), Image.BILINEAR)
    return np.asarray(out)


def combine_pair(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Concatenate source|target horizontally into one H x 2W x 3 image."""
    if source.shape != target.shape:
        raise DataError(
            f"combine_pair: shape mismatch {source.shape} vs {target.shape}")
    if source.ndim != 3 or source.shape[2] != 3:
        raise DataError(f"combine_pair: expected HxWx3 inputs, got {source.shape}")
    if source.dtype != target.dtype:
        raise DataError(
            f"combine_pair: value-domain mismatch {source.dtype} vs {target.dtype}")
    return np.concatenate([source, target], axis=1)


def split_combined(combined: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of combine_pair: exact column split at the midline."""
    if combined.ndim != 3 or combined.shape[2] != 3:
        raise DataError(f"split_combined: expected HxWx3, got {combined.shape}")
    width = combined.shape[1]
    if width % 2 != 0:
        raise DataError(f"split_combined: width {width} is not even")
    half = width // 2
    return combined[:, :half, :].copy(), combined[:, half:, :].copy()


def normalize(img: np.ndarray) -> np.ndarray:
    """Scale pixel values from [0, 255] to [-1, 1] (v' = v/127.5 - 1)."""
    arr = np.asarray(img)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DataError("normalize: values outside [0, 255]")
    return (arr.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] back to integer [0, 255] (round half up).

    Values slightly outside [-1, 1] (floating error in generated tensors)
    are clamped first; clamping is logged, never fatal.
    """
    arr = np.asarray(img, dtype=np.float32)
    out_of_range = int(np.count_nonzero((arr < -1.0) | (arr > 1.0)))
    if out_of_range:
        log.warning("denormalize: clamped %d value(s) outside [-1, 1]", out_of_range)
        arr = np.clip(arr, -1.0, 1.0)
    scaled = np.floor((arr.astype(np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# stratified split


def _round_half_up(x: Fraction) -> int:
    return floor(x + Fraction(1, 2))


def _exact_fractions(fractions) -> tuple[Fraction, Fraction, Fraction]:
    if len(fractions) != 3:
        raise DataError(f"expected 3 fractions (train, val, test), got {fractions}")
    exact = tuple(Fraction(str(f)) for f in fractions)
    if sum(exact) != 1:
        raise DataError(f"fractions {fractions} do not sum to 1")
    return exact


def _stratum_quotas(n: int, fractions) -> tuple[int, int, int]:
    """Quota rule: train = floor(n*f_train); test = round(n*f_test), at
    least 1 when the stratum is non-empty; val takes the remainder."""
    f_train, _f_val, f_test = _exact_fractions(fractions)
    if n == 0:
        return 0, 0, 0
    n_train = floor(n * f_train)
    n_test = max(1, _round_half_up(n * f_test))
    n_test = min(n_test, n - n_train)
    n_val = n - n_train - n_test
    return n_train, n_val, n_test


def split_dataset(pairs: list[RawPair], fractions=DEFAULT_FRACTIONS,
                  seed: int = 0) -> SplitManifest:
    """Partition pairs into train/val/test, stratified by satellite.

    Within each stratum the identifiers are shuffled with a seeded,
    stratum-local generator, then assigned train -> val -> test in quota
    order. The same seed always yields the same manifest.
    """
    _exact_fractions(fractions)
    strata: dict[Satellite, list[str]] = {sat: [] for sat in Satellite}
    for pair in pairs:
        if not isinstance(pair.satellite, Satellite):
            raise DataError(f"pair {pair.identifier!r} has no satellite tag")
        strata[pair.satellite].append(pair.identifier)

    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    counts: dict[str, dict[str, int]] = {}
    for index, sat in enumerate(Satellite):
        ids = sorted(strata[sat])
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate identifiers in {sat.value} stratum")
        n = len(ids)
        if n == 0:
            continue
        n_train, n_val, n_test = _stratum_quotas(n, fractions)
        rng = np.random.default_rng([seed, index])
        shuffled = [ids[i] for i in rng.permutation(n)]
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
        counts[sat.value] = {"train": n_train, "val": n_val, "test": n_test}

    return SplitManifest(train, val, test, counts, seed, tuple(fractions))


# ---------------------------------------------------------------------------
# ingestion


def read_satellite_map(path: Path) -> dict[str, Satellite]:
    """Read a CSV mapping file with columns: filename, satellite."""
    path = Path(path)
    mapping: dict[str, Satellite] = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"filename", "satellite"} <= set(
                    name.strip() for name in reader.fieldnames):
                raise DataError(
                    f"{path}: expected CSV columns 'filename' and 'satellite'")
            for row in reader:
                mapping[row["filename"].strip()] = Satellite.parse(row["satellite"])
    except OSError as exc:
        raise DataError(f"cannot read satellite map {path}: {exc}") from exc
    return mapping


def scan_pairs(source_dir: Path, target_dir: Path,
               satellite_map: dict[str, Satellite] | None = None) -> list[RawPair]:
    """Match source and target files by filename and tag each pair.

    Tags come from the mapping when given, otherwise from the filename
    prefix. Sources without a matching target (or tag) are an error;
    targets without a source are ignored with a warning.
    """
    source_dir, target_dir = Path(source_dir), Path(target_dir)
    for d in (source_dir, target_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    sources = sorted(p for p in source_dir.iterdir()
                     if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not sources:
        raise DataError(f"no images found in {source_dir}")
    target_names = {p.name for p in target_dir.iterdir()
                    if p.suffix.lower() in IMAGE_EXTENSIONS}
    extra = target_names - {p.name for p in sources}
    if extra:
        log.warning("%d target file(s) have no matching source and are ignored",
                    len(extra))

    pairs = []
    for src in sources:
        if src.name not in target_names:
            raise DataError(f"source {src.name} has no matching file in {target_dir}")
        if satellite_map is not None:
            if src.name not in satellite_map:
                raise DataError(f"{src.name} missing from the satellite mapping")
            sat = satellite_map[src.name]
        else:
            sat = infer_satellite(src.name)
            if sat is None:
                raise DataError(
                    f"cannot infer satellite from filename {src.name!r}; "
                    "use a name prefix like 'goes16_' or pass a mapping CSV")
        pairs.append(RawPair(src, target_dir / src.name, sat))
    return pairs


def tag_sources(source_dir: Path,
                satellite_map: dict[str, Satellite] | None = None) -> list[RawPair]:
    """Tag the files of a single directory for manifest-only splitting
    (no target images touched; target_path mirrors source_path)."""
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DataError(f"not a directory: {source_dir}")
    files = sorted(p for p in source_dir.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise DataError(f"no images found in {source_dir}")
    pairs = []
    for src in files:
        if satellite_map is not None:
            if src.name not in satellite_map:
                raise DataError(f"{src.name} missing from the satellite mapping")
            sat = satellite_map[src.name]
        else:
            sat = infer_satellite(src.name)
            if sat is None:
                raise DataError(
                    f"cannot infer satellite from filename {src.name!r}; "
                    "use a name prefix like 'goes16_' or pass a mapping CSV")
        pairs.append(RawPair(src, src, sat))
    return pairs


def load_pair(pair: RawPair, size: tuple[int, int] = DEFAULT_SIZE) -> ImagePair:
    """Decode, resize, and join one raw pair into its combined form."""
    source = resize_image(load_rgb(pair.source_path), size)
    target = resize_image(load_rgb(pair.target_path), size)
    return ImagePair.from_halves(source, target, pair.satellite,
                                 identifier=pair.identifier)


def prepare_dataset(source_dir: Path, target_dir: Path, out_dir: Path,
                    seed: int = 0, fractions=DEFAULT_FRACTIONS,
                    lossless: bool = False,
                    satellite_map: dict[str, Satellite] | None = None,
                    size: tuple[int, int] = DEFAULT_SIZE) -> SplitManifest:
    """Build the prepared dataset: combined images under
    `{out_dir}/{train,val,test}/` plus `manifest.json`.

    Combined samples are JPEG (quality 95) to mirror the source data, or
    PNG when `lossless` is set.
    """
    out_dir = ensure_dir(Path(out_dir))
    pairs = scan_pairs(source_dir, target_dir, satellite_map)
    extension = ".png" if lossless else ".jpg"

    renamed = {p.identifier: Path(p.identifier).stem + extension for p in pairs}
    manifest = split_dataset(pairs, fractions, seed)
    manifest = SplitManifest(
        train=[renamed[i] for i in manifest.train],
        val=[renamed[i] for i in manifest.val],
        test=[renamed[i] for i in manifest.test],
        per_satellite_counts=manifest.per_satellite_counts,
        seed=manifest.seed,
        fractions=manifest.fractions,
    )

    split_by_id = {}
    for name in ("train", "val", "test"):
        ensure_dir(out_dir / name)
        for identifier in getattr(manifest, name):
            split_by_id[identifier] = name

    for pair in pairs:
        combined = load_pair(pair, size)
        out_name = renamed[pair.identifier]
        save_image(out_dir / split_by_id[out_name] / out_name, combined.combined)

    manifest.save(out_dir / "manifest.json")
    log.info("prepared %d pairs into %s (train=%d val=%d test=%d)",
             len(pairs), out_dir, len(manifest.train), len(manifest.val),
             len(manifest.test))
    return manifest


def load_prepared_split(dataset_dir: Path, identifiers: list[str],
                        split: str) -> list[ImagePair]:
    """Load combined images for one manifest split, in manifest order."""
    dataset_dir = Path(dataset_dir)
    pairs = []
    for identifier in identifiers:
        path = dataset_dir / split / identifier
        combined = load_rgb(path)
        pairs.append(ImagePair(combined, infer_satellite(identifier),
                               identifier=identifier))
    return pairs
