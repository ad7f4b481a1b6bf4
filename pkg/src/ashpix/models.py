"""Network builders and checkpoint I/O for the adversarial pair.

Batch normalization always uses batch statistics (no running averages),
and generator dropout stays active at inference; both follow the usual
conditional-GAN convention and keep training-time and prediction-time
forward passes bit-identical under a fixed dropout seed.
"""
from __future__ import annotations

import json
import logging
import pickle
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .arch import (ArchitectureSpec, DiscriminatorSpec, GeneratorSpec, INIT_STD,
                   LEAKY_SLOPE)
from .errors import ArchError, CheckpointError, DataError
from .util import atomic_write_bytes, utc_timestamp, write_json

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "torch-state-dict-v1"
NORMALIZATION_ID = "v/127.5-1"


def _conv(c_in: int, filters: int, stride: int) -> nn.Module:
    # 'same' padding: symmetric pad 1 for k=4, s=2 on even sizes; k=4, s=1
    # needs 3 total, split 1 top/left and 2 bottom/right.
    if stride == 2:
        return nn.Conv2d(c_in, filters, 4, stride=2, padding=1)
    return nn.Sequential(nn.ZeroPad2d((1, 2, 1, 2)),
                         nn.Conv2d(c_in, filters, 4, stride=1, padding=0))


def _tconv(c_in: int, filters: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(c_in, filters, 4, stride=2, padding=1)


def _bn(filters: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(filters, track_running_stats=False)


def _init_weights(model: nn.Module, seed: int) -> None:
    """Zero-mean Gaussian (std 0.02) conv weights; batch-norm scale around 1."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, INIT_STD, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.normal_(1.0, INIT_STD, generator=gen)
                m.bias.zero_()


class PatchDiscriminator(nn.Module):
    """Classifies each local patch of a (source, candidate) pair as
    real or generated; outputs a sigmoid probability grid."""

    def __init__(self, spec: DiscriminatorSpec, init_seed: int = 0):
        super().__init__()
        self.spec = spec
        blocks = []
        c_in = spec.input_channels
        for layer in spec.layers()[:-1]:
            mods: list[nn.Module] = [_conv(c_in, layer.filters, layer.stride[0])]
            if layer.batch_norm:
                mods.append(_bn(layer.filters))
            blocks.append(nn.Sequential(*mods))
            c_in = layer.filters
        self.blocks = nn.ModuleList(blocks)
        self.patch_out = _conv(c_in, 1, 1)
        _init_weights(self, init_seed)

    def forward(self, source: torch.Tensor, candidate: torch.Tensor,
                trace: dict | None = None) -> torch.Tensor:
        if source.shape != candidate.shape:
            raise DataError(f"discriminator inputs differ: {tuple(source.shape)} "
                            f"vs {tuple(candidate.shape)}")
        x = torch.cat([source, candidate], dim=1)
        for i, block in enumerate(self.blocks):
            x = F.leaky_relu(block(x), LEAKY_SLOPE)
            if trace is not None:
                trace[f"block{i + 1}"] = tuple(x.shape)
        x = torch.sigmoid(self.patch_out(x))
        if trace is not None:
            trace["patch_out"] = tuple(x.shape)
        return x


class UnetGenerator(nn.Module):
    """Encoder-decoder translator with mirrored skip connections.

    Dropout is drawn from an internal generator so inference stays
    stochastic (the usual convention) yet fully seedable; set
    `apply_dropout = False` to disable it entirely.
    """

    def __init__(self, spec: GeneratorSpec, init_seed: int = 0):
        super().__init__()
        self.spec = spec
        self.apply_dropout = True
        self._dropout_rng = torch.Generator().manual_seed(0)

        enc = []
        c_in = 3
        for layer in spec.encoder_layers():
            mods: list[nn.Module] = [_conv(c_in, layer.filters, 2)]
            if layer.batch_norm:
                mods.append(_bn(layer.filters))
            enc.append(nn.Sequential(*mods))
            c_in = layer.filters
        self.enc_blocks = nn.ModuleList(enc)
        self.bottleneck = _conv(c_in, spec.bottleneck_filters, 2)

        dec = []
        c_in = spec.bottleneck_filters
        for i, layer in enumerate(spec.decoder_layers()):
            dec.append(nn.Sequential(_tconv(c_in, layer.filters), _bn(layer.filters)))
            skip = spec.encoder_filters[spec.skip_source(i + 1) - 1]
            c_in = layer.filters + skip
        self.dec_blocks = nn.ModuleList(dec)
        self.output = _tconv(c_in, 3)
        _init_weights(self, init_seed)

    def seed_dropout(self, seed: int) -> None:
        self._dropout_rng.manual_seed(seed)

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        p = self.spec.dropout_rate
        keep = 1.0 - p
        mask = (torch.rand(x.shape, generator=self._dropout_rng) < keep)
        return x * mask.to(x.dtype) / keep

    def forward(self, x: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        size = self.spec.image_size
        if x.shape[1:] != (3, size, size):
            raise DataError(f"generator expects Nx3x{size}x{size} input, "
                            f"got {tuple(x.shape)}")
        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = F.leaky_relu(block(x), LEAKY_SLOPE)
            skips.append(x)
            if trace is not None:
                trace[f"enc{i + 1}"] = tuple(x.shape)
        x = F.relu(self.bottleneck(x))
        if trace is not None:
            trace["bottleneck"] = tuple(x.shape)
        for i, block in enumerate(self.dec_blocks):
            x = block(x)
            if i < self.spec.dropout_stages and self.apply_dropout:
                x = self._dropout(x)
            skip = skips[self.spec.skip_source(i + 1) - 1]
            x = F.relu(torch.cat([x, skip], dim=1))
            if trace is not None:
                trace[f"dec{i + 1}"] = tuple(x.shape)
        x = torch.tanh(self.output(x))
        if trace is not None:
            trace["output"] = tuple(x.shape)
        return x


class CompositeModel(nn.Module):
    """Generator chained into a discriminator whose weights are frozen
    during composite updates; maps a source image to (patch map on the
    generated pair, generated image)."""

    def __init__(self, generator: UnetGenerator, discriminator: PatchDiscriminator,
                 lambda_l1: float = 100.0):
        super().__init__()
        if generator.spec.image_size != discriminator.spec.image_size:
            raise ArchError(
                f"generator output {generator.spec.image_size} does not match "
                f"discriminator input {discriminator.spec.image_size}")
        self.generator = generator
        self.discriminator = discriminator
        self.loss_weights = (1.0, float(lambda_l1))

    def forward(self, source: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        generated = self.generator(source)
        patch = self.discriminator(source, generated)
        return patch, generated

    def trainable_parameters(self):
        return self.generator.parameters()

    def freeze_discriminator(self) -> None:
        for p in self.discriminator.parameters():
            p.requires_grad_(False)

    def unfreeze_discriminator(self) -> None:
        for p in self.discriminator.parameters():
            p.requires_grad_(True)

    def losses(self, patch: torch.Tensor, generated: torch.Tensor,
               target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(total, adversarial, reconstruction): binary cross-entropy on
        the patch map against all-ones plus weighted mean absolute error."""
        adv = F.binary_cross_entropy(patch, torch.ones_like(patch))
        l1 = F.l1_loss(generated, target)
        total = self.loss_weights[0] * adv + self.loss_weights[1] * l1
        return total, adv, l1


def build_discriminator(spec: DiscriminatorSpec, init_seed: int = 0) -> PatchDiscriminator:
    return PatchDiscriminator(spec, init_seed)


def build_generator(spec: GeneratorSpec, init_seed: int = 0) -> UnetGenerator:
    return UnetGenerator(spec, init_seed)


def build_composite(generator: UnetGenerator, discriminator: PatchDiscriminator,
                    lambda_l1: float = 100.0) -> CompositeModel:
    return CompositeModel(generator, discriminator, lambda_l1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# numpy <-> torch bridges (NHWC arrays at module boundaries)


def batch_to_tensor(batch: np.ndarray) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise DataError(f"expected NxHxWx3 batch, got {batch.shape}")
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float()


def tensor_to_batch(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy()


# ---------------------------------------------------------------------------
# checkpoint container: weights archive + JSON metadata sidecar


def checkpoint_meta_path(weights_path: Path) -> Path:
    weights_path = Path(weights_path)
    return weights_path.with_suffix(".meta.json")


@dataclass
class CheckpointRecord:
    """A saved generator: epoch provenance plus preprocessing contract."""

    epoch: int
    weights_path: Path
    metadata: dict = field(default_factory=dict)

    @classmethod
    def load(cls, weights_path: Path) -> "CheckpointRecord":
        weights_path = Path(weights_path)
        meta_path = checkpoint_meta_path(weights_path)
        try:
            metadata = json.loads(meta_path.read_text())
            epoch = int(metadata["epoch"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError,
                ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint metadata {meta_path}: "
                                  f"{exc}") from exc
        return cls(epoch, weights_path, metadata)


def save_generator_checkpoint(generator: UnetGenerator, arch: ArchitectureSpec,
                              epoch: int, seed: int, weights_path: Path) -> CheckpointRecord:
    import io

    buf = io.BytesIO()
    torch.save(generator.state_dict(), buf)
    atomic_write_bytes(weights_path, buf.getvalue())
    metadata = {
        "epoch": epoch,
        "input_size": arch.image_size,
        "normalization": NORMALIZATION_ID,
        "architecture_sha256": arch.sha256(),
        "architecture": arch.to_json_dict(),
        "seed": seed,
        "timestamp": utc_timestamp(),
        "format": WEIGHTS_FORMAT,
    }
    write_json(checkpoint_meta_path(weights_path), metadata)
    return CheckpointRecord(epoch, Path(weights_path), metadata)


def load_generator_checkpoint(weights_path: Path,
                              expected_arch: ArchitectureSpec | None = None,
                              ) -> tuple[UnetGenerator, CheckpointRecord]:
    """Rebuild a generator from a checkpoint, verifying the architecture
    hash so the wrong model can never be silently loaded."""
    record = CheckpointRecord.load(weights_path)
    meta = record.metadata
    if meta.get("format") != WEIGHTS_FORMAT:
        raise CheckpointError(f"{weights_path}: unsupported weights format "
                              f"{meta.get('format')!r}")
    if meta.get("normalization") != NORMALIZATION_ID:
        raise CheckpointError(f"{weights_path}: normalization contract "
                              f"{meta.get('normalization')!r} does not match "
                              f"{NORMALIZATION_ID!r}")
    try:
        arch = ArchitectureSpec.from_json_dict(meta["architecture"])
    except KeyError as exc:
        raise CheckpointError(f"{weights_path}: metadata lacks architecture") from exc
    except ArchError as exc:
        raise CheckpointError(f"{weights_path}: metadata architecture is "
                              f"invalid: {exc}") from exc
    if arch.sha256() != meta.get("architecture_sha256"):
        raise CheckpointError(
            f"{weights_path}: architecture hash mismatch (metadata corrupt "
            "or edited)")
    if expected_arch is not None and expected_arch.sha256() != arch.sha256():
        raise CheckpointError(
            f"{weights_path}: checkpoint architecture does not match the "
            "requested architecture")
    generator = build_generator(arch.generator)
    try:
        state = torch.load(record.weights_path, weights_only=True)
        generator.load_state_dict(state)
    except (OSError, RuntimeError, ValueError, EOFError, KeyError,
            pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot load weights {weights_path}: {exc}") from exc
    return generator, record
