"""Procedural paired datasets: soft-edged plumes on colored backgrounds,
with exact analytic masks, so the whole pipeline is testable at desk
scale without real imagery.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .pipeline import RawPair, Satellite
from .util import ensure_dir, save_image, write_json

log = logging.getLogger(__name__)

# murky composite-like background tones (R, G, B)
_BACKGROUNDS = (
    (30, 50, 110), (120, 40, 40), (40, 100, 60), (150, 90, 30),
    (70, 40, 120), (20, 90, 120),
)


@dataclass(frozen=True)
class SynthConfig:
    count: int
    image_size: tuple[int, int] = (256, 256)
    blob_count_range: tuple[int, int] = (0, 4)  # inclusive bounds
    blob_radius_range: tuple[float, float] = (0.05, 0.18)  # fraction of min side
    plume_gray_range: tuple[float, float] = (150.0, 210.0)  # source rendering
    seed: int = 0
    satellite_weights: dict[Satellite, float] | None = None  # uniform when None

    def __post_init__(self):
        if self.count < 0:
            raise DataError(f"count must be >= 0, got {self.count}")
        lo, hi = self.blob_count_range
        if lo < 0 or hi < lo:
            raise DataError(f"bad blob_count_range {self.blob_count_range}")
        rlo, rhi = self.blob_radius_range
        if not 0 < rlo <= rhi:
            raise DataError(f"bad blob_radius_range {self.blob_radius_range}")
        glo, ghi = self.plume_gray_range
        if not 0 <= glo <= ghi <= 255:
            raise DataError(f"bad plume_gray_range {self.plume_gray_range}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise DataError(f"image_size too small: {self.image_size}")


def _ellipse_mask(shape: tuple[int, int], cy: float, cx: float, ry: float,
                  rx: float, angle: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _plume_mask(rng: np.random.Generator, shape: tuple[int, int],
                blob_count: int,
                radius_range: tuple[float, float] = (0.05, 0.18)) -> np.ndarray:
    """Union of blobs, each made of 2-5 overlapping ellipses."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(blob_count):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        base = rng.uniform(*radius_range) * min(h, w)
        for _ in range(rng.integers(2, 6)):
            ey = cy + rng.uniform(-0.6, 0.6) * base
            ex = cx + rng.uniform(-0.6, 0.6) * base
            ry = base * rng.uniform(0.5, 1.2)
            rx = base * rng.uniform(0.5, 1.2)
            mask |= _ellipse_mask(shape, ey, ex, max(ry, 2.0), max(rx, 2.0),
                                  rng.uniform(0.0, np.pi))
    return mask


def _render_pair(rng: np.random.Generator, shape: tuple[int, int],
                 mask: np.ndarray,
                 gray_range: tuple[float, float] = (150.0, 210.0),
                 ) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    background = np.array(_BACKGROUNDS[rng.integers(0, len(_BACKGROUNDS))],
                          dtype=np.float64)
    source = np.tile(background, (h, w, 1))
    source += rng.normal(0.0, 3.0, size=source.shape)

    # soft plume on the source only; the target keeps the hard analytic edge
    alpha = gaussian_filter(mask.astype(np.float64), sigma=min(h, w) / 64.0)
    alpha = np.clip(alpha, 0.0, 1.0)[..., None]
    gray = rng.uniform(*gray_range)
    source = source * (1.0 - alpha) + gray * alpha
    source = np.clip(np.round(source), 0, 255).astype(np.uint8)

    target = np.full((h, w, 3), 255, dtype=np.uint8)
    target[mask] = 0
    return source, target


def generate(config: SynthConfig, out_dir: Path) -> list[RawPair]:
    """Write `source/` and `target/` image trees plus `truth.json` with
    the analytic per-image ground truth. Deterministic per seed; each
    image draws from its own sub-generator."""
    out_dir = Path(out_dir)
    source_dir = ensure_dir(out_dir / "source")
    target_dir = ensure_dir(out_dir / "target")

    satellites = list(Satellite)
    if config.satellite_weights is not None:
        weights = np.array([config.satellite_weights.get(s, 0.0) for s in satellites],
                           dtype=np.float64)
        if weights.sum() <= 0:
            raise DataError("satellite_weights must have positive total weight")
        weights /= weights.sum()
    else:
        weights = np.full(len(satellites), 1.0 / len(satellites))

    lo, hi = config.blob_count_range
    pairs: list[RawPair] = []
    truth: dict[str, dict] = {}
    for i in range(config.count):
        rng = np.random.default_rng([config.seed, i])
        satellite = satellites[rng.choice(len(satellites), p=weights)]
        blob_count = int(rng.integers(lo, hi + 1))
        mask = _plume_mask(rng, config.image_size, blob_count,
                           config.blob_radius_range)
        source, target = _render_pair(rng, config.image_size, mask,
                                      config.plume_gray_range)

        name = f"{satellite.value.lower()}_{i:04d}.png"
        save_image(source_dir / name, source)
        save_image(target_dir / name, target)
        pairs.append(RawPair(source_dir / name, target_dir / name, satellite))
        truth[name] = {
            "has_ash": bool(mask.any()),
            "ash_pixels": int(mask.sum()),
            "blob_count": blob_count,
            "satellite": satellite.value,
        }

    write_json(out_dir / "truth.json", truth)
    log.info("generated %d synthetic pair(s) under %s", config.count, out_dir)
    return pairs
