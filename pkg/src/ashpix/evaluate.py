"""Evaluation protocol: training-history curves, checkpoint comparison
grids, and the ash-presence confusion-matrix metric suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import CheckpointRecord, load_generator_checkpoint
from .pipeline import ImagePair, denormalize
from .train import load_metrics_csv, make_fake_samples
from .util import atomic_write_text, derive_seed, ensure_dir, save_image

log = logging.getLogger(__name__)

DEFAULT_LUMINANCE_THRESHOLD = 128.0
DEFAULT_FRACTION_THRESHOLD = 0.005

LOSS_STREAMS = ("d_loss_train_real", "d_loss_train_fake", "g_loss",
                "g_loss_adv", "g_loss_l1", "d_loss_val_real")
ACCURACY_STREAMS = ("d_acc_train_real", "d_acc_train_fake", "d_acc_val_real")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Per-image ash presence counts: predicted-vs-actual."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise DataError(f"confusion count {name} is negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class MetricReport:
    """Accuracy, precision, sensitivity, specificity.

    `None` marks a metric whose denominator is zero: undefined is an
    explicit state, not 0. `as_dict(paper_compat=True)` renders undefined
    values as 0 for comparison against reports that use that convention.
    """

    accuracy: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None

    def as_dict(self, paper_compat: bool = False) -> dict:
        out = {}
        for name in ("accuracy", "precision", "sensitivity", "specificity"):
            value = getattr(self, name)
            if value is None and paper_compat:
                value = 0.0
            out[name] = value
        return out


def compute_confusion(predictions: list[tuple[str, bool]],
                      truth: list[tuple[str, bool]]) -> ConfusionMatrix:
    """Count tp/fp/fn/tn over per-image ash presence.

    Both lists must cover exactly the same identifiers.
    """
    pred_map = dict(predictions)
    truth_map = dict(truth)
    if len(pred_map) != len(predictions) or len(truth_map) != len(truth):
        raise DataError("compute_confusion: duplicate identifiers")
    if set(pred_map) != set(truth_map):
        missing = set(truth_map) ^ set(pred_map)
        raise DataError(f"compute_confusion: id sets differ (e.g. {sorted(missing)[:4]})")
    tp = fp = fn = tn = 0
    for identifier, actual in truth_map.items():
        predicted = pred_map[identifier]
        if actual and predicted:
            tp += 1
        elif not actual and predicted:
            fp += 1
        elif actual and not predicted:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    """accuracy=(tp+tn)/total, precision=tp/(tp+fp), sensitivity=
    tp/(tp+fn), specificity=tn/(tn+fp); zero denominators are undefined."""

    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    return MetricReport(
        accuracy=ratio(cm.tp + cm.tn, cm.total),
        precision=ratio(cm.tp, cm.tp + cm.fp),
        sensitivity=ratio(cm.tp, cm.tp + cm.fn),
        specificity=ratio(cm.tn, cm.tn + cm.fp),
    )


def ash_presence(mask: np.ndarray,
                 luminance_threshold: float = DEFAULT_LUMINANCE_THRESHOLD,
                 fraction_threshold: float = DEFAULT_FRACTION_THRESHOLD) -> bool:
    """Automated stand-in for visual judgment: ash is present when the
    fraction of dark pixels (Rec. 601 luminance < threshold) exceeds the
    area fraction. Dark pixels mark ash: masks are black-on-white."""
    if mask.ndim != 3 or mask.shape[2] != 3:
        raise DataError(f"ash_presence: expected HxWx3 mask, got {mask.shape}")
    arr = mask.astype(np.float64)
    luminance = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    dark_fraction = float(np.count_nonzero(luminance < luminance_threshold)) / luminance.size
    return dark_fraction > fraction_threshold


# ---------------------------------------------------------------------------
# history curves


def plot_history(metrics_csv: Path, out_dir: Path) -> list[Path]:
    """One loss-vs-epoch and one accuracy-vs-epoch plot per metric
    stream. Validation streams appear only at the epochs they exist."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = load_metrics_csv(metrics_csv)
    out_dir = ensure_dir(Path(out_dir))
    written: list[Path] = []
    for kind, streams in (("loss", LOSS_STREAMS), ("accuracy", ACCURACY_STREAMS)):
        for stream in streams:
            points = [(row["epoch"], row[stream]) for row in rows
                      if row[stream] is not None]
            if not points:
                continue
            epochs, values = zip(*points)
            fig, ax = plt.subplots(figsize=(7, 4))
            marker = "o" if len(points) < 30 else None
            ax.plot(epochs, values, marker=marker)
            ax.set_xlabel("epoch")
            ax.set_ylabel(kind)
            ax.set_title(stream)
            ax.grid(True, alpha=0.3)
            path = out_dir / f"{kind}_{stream}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# checkpoint comparison


def compare_checkpoints(checkpoints: list[CheckpointRecord],
                        sample_pairs: list[ImagePair], out_dir: Path,
                        dropout_seed: int = 0) -> tuple[list[Path], Path]:
    """Write a source/generated/target triptych grid per checkpoint plus
    an index for human model selection. Unloadable checkpoints are
    skipped with a warning and noted in the index."""
    if not checkpoints:
        raise DataError("compare_checkpoints: no checkpoints given")
    if not sample_pairs:
        raise DataError("compare_checkpoints: no sample pairs given")
    out_dir = ensure_dir(Path(out_dir))
    normalized = [p.normalize() for p in sample_pairs]
    sources = np.stack([p.source for p in normalized]).astype(np.float32)
    targets = np.stack([p.target for p in normalized]).astype(np.float32)

    grids: list[Path] = []
    index_lines: list[str] = []
    for record in sorted(checkpoints, key=lambda r: r.epoch):
        try:
            generator, _ = load_generator_checkpoint(record.weights_path)
        except DataError as exc:
            log.warning("skipping checkpoint %s: %s", record.weights_path, exc)
            index_lines.append(f"epoch {record.epoch}: SKIPPED ({exc})")
            continue
        generator.seed_dropout(derive_seed(dropout_seed, "compare", record.epoch))
        generated, _ = make_fake_samples(generator, sources)
        rows = [np.hstack(list(denormalize(block))) for block in
                (sources, generated, targets)]
        path = out_dir / f"epoch_{record.epoch}.png"
        save_image(path, np.vstack(rows))
        grids.append(path)
        index_lines.append(f"epoch {record.epoch}: {path.name}")

    index_path = out_dir / "index.txt"
    atomic_write_text(index_path, "\n".join(index_lines) + "\n")
    return grids, index_path


def find_checkpoints(checkpoints_dir: Path) -> list[CheckpointRecord]:
    """Load every checkpoint record under a directory, sorted by epoch."""
    checkpoints_dir = Path(checkpoints_dir)
    if not checkpoints_dir.is_dir():
        raise DataError(f"not a directory: {checkpoints_dir}")
    records = []
    for weights in sorted(checkpoints_dir.glob("*.weights")):
        records.append(CheckpointRecord.load(weights))
    if not records:
        raise DataError(f"no checkpoints under {checkpoints_dir}")
    return sorted(records, key=lambda r: r.epoch)
