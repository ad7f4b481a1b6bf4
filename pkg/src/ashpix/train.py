"""Adversarial training loop: alternating discriminator updates on real
and generated batches, composite updates for the generator, metric
streaming, periodic validation, and checkpointing.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import optim

from .arch import ArchitectureSpec
from .errors import CheckpointError, DataError, TrainingError
from .models import (CheckpointRecord, CompositeModel, PatchDiscriminator,
                     UnetGenerator, batch_to_tensor, build_composite,
                     build_discriminator, build_generator,
                     save_generator_checkpoint, tensor_to_batch)
from .pipeline import ImagePair, SplitManifest, denormalize, load_prepared_split
from .util import EventLog, atomic_write_bytes, derive_seed, ensure_dir, save_image

log = logging.getLogger(__name__)

TRAIN_STATE_NAME = "train_state.pt"
PROGRESS_SAMPLES = 3


@dataclass
class TrainingConfig:
    """Hyperparameters and paths for one training run."""

    dataset_dir: Path
    out_dir: Path
    epochs: int = 100
    batch_size: int = 1
    learning_rate: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_l1: float = 100.0
    checkpoint_every: int = 10
    seed: int = 0
    architecture: ArchitectureSpec | None = None
    resume: bool = False
    per_iteration_log: bool = False
    event_log: EventLog | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise TrainingError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be > 0")

    def checkpoint_epochs(self) -> list[int]:
        """Every multiple of checkpoint_every, plus a forced final epoch
        when the cadence does not divide the epoch count."""
        epochs = set(range(self.checkpoint_every, self.epochs + 1,
                           self.checkpoint_every))
        if self.epochs > 0:
            epochs.add(self.epochs)
        return sorted(epochs)


@dataclass
class EpochMetrics:
    """Per-epoch averages of the per-iteration metric streams.

    Validation fields are filled only on checkpoint epochs. The generator
    loss is recorded whole and split into its adversarial and
    reconstruction components.
    """

    epoch: int
    d_loss_train_real: float
    d_loss_train_fake: float
    d_acc_train_real: float
    d_acc_train_fake: float
    g_loss: float
    g_loss_adv: float
    g_loss_l1: float
    d_loss_val_real: float | None = None
    d_acc_val_real: float | None = None


METRIC_FIELDS = [f.name for f in fields(EpochMetrics)]


# ---------------------------------------------------------------------------
# sample construction


def make_real_samples(batch: list[ImagePair], patch_size: int | None = None):
    """Batch of real pairs plus all-ones patch labels.

    Returns ((sources, targets), labels) as NxHxWx3 / NxPxPx1 float32.
    """
    for pair in batch:
        if not pair.normalized:
            raise DataError(
                f"make_real_samples: pair {pair.identifier!r} is not normalized")
    if not batch:
        empty_img = np.zeros((0, 0, 0, 3), dtype=np.float32)
        return (empty_img, empty_img.copy()), np.zeros((0, 0, 0, 1), np.float32)
    sources = np.stack([p.source for p in batch]).astype(np.float32)
    targets = np.stack([p.target for p in batch]).astype(np.float32)
    if patch_size is None:
        patch_size = sources.shape[1] // 16
    labels = np.ones((len(batch), patch_size, patch_size, 1), dtype=np.float32)
    return (sources, targets), labels


def make_fake_samples(generator: UnetGenerator, sources: np.ndarray,
                      patch_size: int | None = None):
    """Generated translations for a source batch plus all-zeros labels."""
    if sources.ndim != 4 or sources.shape[3] != 3:
        raise DataError(f"make_fake_samples: expected NxHxWx3, got {sources.shape}")
    size = generator.spec.image_size
    if sources.shape[1] != size or sources.shape[2] != size:
        raise DataError(
            f"make_fake_samples: sources are {sources.shape[1]}x"
            f"{sources.shape[2]}, generator expects {size}x{size}")
    if sources.size and (sources.min() < -1.0 or sources.max() > 1.0):
        raise DataError("make_fake_samples: sources are not normalized to [-1, 1]")
    if patch_size is None:
        patch_size = size // 16
    if len(sources) == 0:
        return (np.zeros((0, 0, 0, 3), np.float32),
                np.zeros((0, 0, 0, 1), np.float32))
    with torch.no_grad():
        generated = tensor_to_batch(generator(batch_to_tensor(sources)))
    labels = np.zeros((len(sources), patch_size, patch_size, 1), dtype=np.float32)
    return generated, labels


# ---------------------------------------------------------------------------
# update steps


def _patch_accuracy(output: torch.Tensor, real: bool) -> float:
    predicted_real = output > 0.5
    correct = predicted_real if real else ~predicted_real
    return float(correct.float().mean())


def discriminator_step(discriminator: PatchDiscriminator, opt: optim.Optimizer,
                       sources: np.ndarray, candidates: np.ndarray,
                       real: bool) -> tuple[float, float]:
    """One update on a real or generated batch. The loss is halved to
    slow discriminator dominance; the halved value is what is reported."""
    src_t = batch_to_tensor(sources)
    cand_t = batch_to_tensor(candidates)
    output = discriminator(src_t, cand_t)
    labels = torch.ones_like(output) if real else torch.zeros_like(output)
    loss = 0.5 * F.binary_cross_entropy(output, labels)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach()), _patch_accuracy(output.detach(), real)


def composite_step(composite: CompositeModel, opt_g: optim.Optimizer,
                   sources: np.ndarray, targets: np.ndarray,
                   ) -> tuple[float, float, float]:
    """One generator update through the frozen discriminator, with dual
    targets: an all-ones patch map and the real translation for the
    reconstruction term."""
    composite.freeze_discriminator()
    try:
        patch, generated = composite(batch_to_tensor(sources))
        total, adv, l1 = composite.losses(patch, generated, batch_to_tensor(targets))
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
    finally:
        composite.unfreeze_discriminator()
    return float(total.detach()), float(adv.detach()), float(l1.detach())


def evaluate_discriminator(discriminator: PatchDiscriminator,
                           pairs: list[ImagePair]) -> tuple[float, float]:
    """Mean loss/accuracy of the discriminator on real pairs."""
    if not pairs:
        raise DataError("evaluate_discriminator: no pairs")
    losses, accs = [], []
    with torch.no_grad():
        for pair in pairs:
            norm = pair.normalize()
            src = batch_to_tensor(norm.source[None].astype(np.float32))
            tgt = batch_to_tensor(norm.target[None].astype(np.float32))
            output = discriminator(src, tgt)
            loss = 0.5 * F.binary_cross_entropy(output, torch.ones_like(output))
            losses.append(float(loss))
            accs.append(_patch_accuracy(output, real=True))
    return float(np.mean(losses)), float(np.mean(accs))


# ---------------------------------------------------------------------------
# progress grids


def summarize_progress(generator: UnetGenerator, sample_pairs: list[ImagePair],
                       epoch: int, out_dir: Path) -> Path:
    """Write a three-row grid (sources / generated / targets) for visual
    checkpoint comparison. Rows are raw pixel concatenations."""
    if not sample_pairs:
        raise DataError("summarize_progress: need at least one sample pair")
    normalized = [p.normalize() for p in sample_pairs]
    sources = np.stack([p.source for p in normalized]).astype(np.float32)
    targets = np.stack([p.target for p in normalized]).astype(np.float32)
    generated, _ = make_fake_samples(generator, sources)
    rows = [np.hstack(list(denormalize(block))) for block in
            (sources, generated, targets)]
    grid = np.vstack(rows)
    path = Path(out_dir) / f"epoch_{epoch}.png"
    try:
        save_image(path, grid)
    except OSError as exc:  # progress images are best-effort
        log.warning("could not write progress grid %s: %s", path, exc)
    return path


# ---------------------------------------------------------------------------
# metrics persistence


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Append-only CSV, one row per epoch, columns exactly the
    EpochMetrics field names."""

    def __init__(self, path: Path, resume_epoch: int | None = None):
        self.path = Path(path)
        ensure_dir(self.path.parent)
        if resume_epoch is not None and self.path.exists():
            kept = [row for row in load_metrics_csv(self.path)
                    if row["epoch"] <= resume_epoch]
            self._write_all(kept)
        else:
            self.path.write_text(",".join(METRIC_FIELDS) + "\n")

    def _write_all(self, rows: list[dict]) -> None:
        lines = [",".join(METRIC_FIELDS)]
        for row in rows:
            lines.append(",".join(_format_cell(row.get(name)) for name in METRIC_FIELDS))
        self.path.write_text("\n".join(lines) + "\n")

    def append(self, metrics: EpochMetrics) -> None:
        cells = [_format_cell(getattr(metrics, name)) for name in METRIC_FIELDS]
        with self.path.open("a") as fh:
            fh.write(",".join(cells) + "\n")


def load_metrics_csv(path: Path) -> list[dict]:
    """Parse a metrics CSV; malformed content is rejected with its row
    number."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics CSV not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != METRIC_FIELDS:
            raise DataError(
                f"{path}: expected columns {METRIC_FIELDS}, got {reader.fieldnames}")
        for i, raw in enumerate(reader, start=2):
            try:
                row = {"epoch": int(raw["epoch"])}
                for name in METRIC_FIELDS[1:]:
                    cell = raw[name]
                    row[name] = None if cell in ("", None) else float(cell)
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed row {i}: {exc}") from exc
            rows.append(row)
    return rows


def _adam(params, lr: float, betas: tuple[float, float]) -> optim.Adam:
    """Adam with the fused CPU kernel when available (~2x faster steps
    for batch-1 training); numerics are the standard update either way."""
    params = list(params)
    try:
        return optim.Adam(params, lr=lr, betas=betas, fused=True)
    except (RuntimeError, TypeError, ValueError):
        return optim.Adam(params, lr=lr, betas=betas)


# ---------------------------------------------------------------------------
# run state (resume support)


def _save_train_state(path: Path, epoch: int, arch: ArchitectureSpec,
                      generator: UnetGenerator, discriminator: PatchDiscriminator,
                      opt_g: optim.Optimizer, opt_d: optim.Optimizer,
                      seed: int) -> None:
    import io

    state = {
        "epoch": epoch,
        "seed": seed,
        "architecture": arch.to_json_dict(),
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    atomic_write_bytes(path, buf.getvalue())


def _load_train_state(path: Path) -> dict:
    import pickle
    import zipfile

    if not Path(path).is_file():
        raise CheckpointError(f"no training state to resume from at {path}")
    try:
        return torch.load(path, weights_only=True)
    except (OSError, RuntimeError, ValueError, EOFError,
            pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot load training state {path}: {exc}") from exc


@contextmanager
def _run_lock(out_dir: Path):
    lock = Path(out_dir) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise TrainingError(
            f"another trainer owns {out_dir} (lock file {lock} exists; remove "
            "it if that run is dead)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# the loop


def _check_finite(epoch: int, iteration: int, **values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingError(
                f"divergence guard: {name} is {value} at epoch {epoch} "
                f"iteration {iteration}; aborting (last durable checkpoint "
                "is intact)")


def train(config: TrainingConfig, manifest: SplitManifest,
          ) -> tuple[list[CheckpointRecord], list[EpochMetrics]]:
    """Run the adversarial loop over the prepared dataset.

    Per iteration the discriminator is updated on a real then a generated
    batch and the composite updates the generator with dual targets. One
    epoch is one pass over every training pair in a seeded shuffle. On
    checkpoint epochs the generator is saved, the discriminator is
    evaluated on the validation pairs, and a progress grid is written.

    Returns the checkpoints and per-epoch metrics produced by this call
    (when resuming, earlier epochs are not re-reported).
    """
    dataset_dir = Path(config.dataset_dir)
    out_dir = ensure_dir(Path(config.out_dir))
    ckpt_dir = ensure_dir(out_dir / "checkpoints")
    progress_dir = ensure_dir(out_dir / "progress")

    train_pairs = load_prepared_split(dataset_dir, manifest.train, "train")
    if not train_pairs:
        raise DataError(f"no training pairs under {dataset_dir}")
    val_pairs = load_prepared_split(dataset_dir, manifest.val, "val")

    size = train_pairs[0].width
    for pair in train_pairs + val_pairs:
        if pair.width != size or pair.combined.shape[0] != size:
            raise DataError(
                f"pair {pair.identifier!r} has size {pair.combined.shape}, "
                f"expected {size}x{2 * size}")

    with _run_lock(out_dir):
        return _train_locked(config, out_dir, ckpt_dir, progress_dir,
                             train_pairs, val_pairs, size)


def _train_locked(config: TrainingConfig, out_dir: Path, ckpt_dir: Path,
                  progress_dir: Path, train_pairs: list[ImagePair],
                  val_pairs: list[ImagePair], size: int,
                  ) -> tuple[list[CheckpointRecord], list[EpochMetrics]]:
    arch = config.architecture or ArchitectureSpec.default(size)
    if arch.image_size != size:
        raise DataError(f"architecture is for {arch.image_size}x"
                        f"{arch.image_size} but dataset pairs are {size}x{size}")

    start_epoch = 0
    state = None
    if config.resume:
        state = _load_train_state(out_dir / TRAIN_STATE_NAME)
        if state["seed"] != config.seed:
            raise TrainingError(
                f"resume seed mismatch: run used {state['seed']}, "
                f"config has {config.seed}")
        state_arch = ArchitectureSpec.from_json_dict(state["architecture"])
        if state_arch.sha256() != arch.sha256():
            raise CheckpointError("resume architecture does not match the run's")
        generator = build_generator(arch.generator)
        discriminator = build_discriminator(arch.discriminator)
        generator.load_state_dict(state["generator"])
        discriminator.load_state_dict(state["discriminator"])
        start_epoch = int(state["epoch"])
        log.info("resuming from epoch %d", start_epoch)
    else:
        generator = build_generator(arch.generator,
                                    init_seed=derive_seed(config.seed, "gen-init"))
        discriminator = build_discriminator(
            arch.discriminator, init_seed=derive_seed(config.seed, "disc-init"))

    composite = build_composite(generator, discriminator, config.lambda_l1)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_d = _adam(discriminator.parameters(), config.learning_rate, betas)
    opt_g = _adam(generator.parameters(), config.learning_rate, betas)
    if state is not None:
        opt_g.load_state_dict(state["opt_g"])
        opt_d.load_state_dict(state["opt_d"])

    patch_size = arch.discriminator.patch_size
    checkpoint_epochs = set(config.checkpoint_epochs())
    sample_pairs = (val_pairs or train_pairs)[:PROGRESS_SAMPLES]

    metrics_writer = MetricsWriter(out_dir / "metrics.csv",
                                   resume_epoch=start_epoch if config.resume else None)
    iter_writer = None
    if config.per_iteration_log:
        iter_path = out_dir / "iterations.csv"
        if not (config.resume and iter_path.exists()):
            iter_path.write_text("epoch,iteration,d_loss_real,d_loss_fake,"
                                 "d_acc_real,d_acc_fake,g_loss,g_loss_adv,g_loss_l1\n")
        iter_writer = iter_path.open("a")

    records: list[CheckpointRecord] = []
    history: list[EpochMetrics] = []
    n_train = len(train_pairs)
    try:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            order = np.random.default_rng(
                derive_seed(config.seed, "order", epoch)).permutation(n_train)
            generator.seed_dropout(derive_seed(config.seed, "dropout", epoch))

            sums = np.zeros(7, dtype=np.float64)
            iterations = 0
            for lo in range(0, n_train, config.batch_size):
                batch = [train_pairs[i].normalize()
                         for i in order[lo:lo + config.batch_size]]
                (sources, targets), _ones = make_real_samples(batch, patch_size)
                fake_images, _zeros = make_fake_samples(generator, sources, patch_size)

                dlr, dar = discriminator_step(discriminator, opt_d, sources,
                                              targets, real=True)
                dlf, daf = discriminator_step(discriminator, opt_d, sources,
                                              fake_images, real=False)
                gl, gadv, gl1 = composite_step(composite, opt_g, sources, targets)

                iterations += 1
                _check_finite(epoch, iterations, d_loss_train_real=dlr,
                              d_loss_train_fake=dlf, d_acc_train_real=dar,
                              d_acc_train_fake=daf, g_loss=gl, g_loss_adv=gadv,
                              g_loss_l1=gl1)
                sums += (dlr, dlf, dar, daf, gl, gadv, gl1)
                if iter_writer is not None:
                    iter_writer.write(
                        f"{epoch},{iterations},{dlr!r},{dlf!r},{dar!r},"
                        f"{daf!r},{gl!r},{gadv!r},{gl1!r}\n")

            means = sums / max(iterations, 1)
            val_loss = val_acc = None
            if epoch in checkpoint_epochs:
                if val_pairs:
                    val_loss, val_acc = evaluate_discriminator(discriminator,
                                                               val_pairs)
                    _check_finite(epoch, iterations, d_loss_val_real=val_loss,
                                  d_acc_val_real=val_acc)
                record = save_generator_checkpoint(
                    generator, arch, epoch, config.seed,
                    ckpt_dir / f"model_epoch_{epoch}.weights")
                records.append(record)
                _save_train_state(out_dir / TRAIN_STATE_NAME, epoch, arch,
                                  generator, discriminator, opt_g, opt_d,
                                  config.seed)
                generator.seed_dropout(derive_seed(config.seed, "progress", epoch))
                summarize_progress(generator, sample_pairs, epoch, progress_dir)
                if config.event_log:
                    config.event_log.emit("checkpoint", epoch=epoch,
                                          path=str(record.weights_path))

            metrics = EpochMetrics(epoch, *(float(m) for m in means),
                                   d_loss_val_real=val_loss, d_acc_val_real=val_acc)
            metrics_writer.append(metrics)
            history.append(metrics)
            if config.event_log:
                config.event_log.emit("epoch", epoch=epoch,
                                      g_loss=metrics.g_loss,
                                      g_loss_l1=metrics.g_loss_l1,
                                      d_loss_train_real=metrics.d_loss_train_real,
                                      d_loss_train_fake=metrics.d_loss_train_fake)
            log.info(
                "epoch %d/%d  d_loss r/f %.4f/%.4f  d_acc r/f %.3f/%.3f  "
                "g_loss %.4f (adv %.4f, l1 %.4f)%s", epoch, config.epochs,
                metrics.d_loss_train_real, metrics.d_loss_train_fake,
                metrics.d_acc_train_real, metrics.d_acc_train_fake,
                metrics.g_loss, metrics.g_loss_adv, metrics.g_loss_l1,
                "  [checkpoint]" if epoch in checkpoint_epochs else "")
    finally:
        if iter_writer is not None:
            iter_writer.close()

    return records, history
