"""Declarative layer schedules and architecture-audit arithmetic.

The discriminator is a patch classifier over channel-stacked image pairs;
the generator is an encoder-decoder with mirrored skip connections. Both
are described here as data so shapes, parameter counts, and receptive
fields can be audited without building any network.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ArchError, DataError
from .util import canonical_json, sha256_hex, write_json

SCHEMA_VERSION = 1
KERNEL = (4, 4)
DISC_BODY_FILTERS = (64, 128, 256, 512, 512)
ENCODER_FILTERS_FULL = (64, 128, 256, 512, 512, 512, 512)
LEAKY_SLOPE = 0.2
INIT_STD = 0.02

_ACTIVATIONS = ("leaky_relu", "relu", "sigmoid", "tanh", "none")


@dataclass(frozen=True)
class LayerSpec:
    """One convolutional stage. Every layer in this artifact uses a 4x4
    kernel with 'same' padding."""

    kind: str  # "conv" | "transposed_conv"
    filters: int
    stride: tuple[int, int] = (2, 2)
    batch_norm: bool = False
    activation: str = "leaky_relu"
    dropout_rate: float = 0.0
    kernel: tuple[int, int] = KERNEL
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in ("conv", "transposed_conv"):
            raise ArchError(f"unknown layer kind {self.kind!r}")
        if self.filters < 1:
            raise ArchError(f"filters must be positive, got {self.filters}")
        if tuple(self.kernel) != KERNEL:
            raise ArchError(f"kernel must be {KERNEL}, got {self.kernel}")
        if tuple(self.stride) not in ((1, 1), (2, 2)):
            raise ArchError(f"stride must be (1,1) or (2,2), got {self.stride}")
        if self.padding != "same":
            raise ArchError(f"padding must be 'same', got {self.padding!r}")
        if self.activation not in _ACTIVATIONS:
            raise ArchError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def _check_image_size(size: int) -> None:
    # below 32 the discriminator's deep stages hit 1x1 maps, where batch
    # statistics are undefined at batch size 1
    if size < 32 or size & (size - 1) != 0:
        raise ArchError(f"image_size must be a power of two >= 32, got {size}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Patch classifier: five body layers (64,128,256,512,512) over a
    6-channel stacked pair, then a 1-filter sigmoid head.

    The first four body layers stride 2, the fifth strides 1, so a
    256x256 pair maps to a 16x16 patch grid.
    """

    image_size: int = 256
    body_filters: tuple[int, ...] = DISC_BODY_FILTERS

    def __post_init__(self):
        _check_image_size(self.image_size)
        if tuple(self.body_filters) != DISC_BODY_FILTERS:
            raise ArchError(
                f"discriminator body must be {DISC_BODY_FILTERS}, "
                f"got {tuple(self.body_filters)}")

    @property
    def input_channels(self) -> int:
        return 6  # source and candidate stacked on channels

    @property
    def patch_size(self) -> int:
        return self.image_size // 16

    def layers(self) -> list[LayerSpec]:
        specs = []
        for i, filters in enumerate(self.body_filters):
            stride = (2, 2) if i < 4 else (1, 1)
            specs.append(LayerSpec("conv", filters, stride,
                                   batch_norm=(i > 0), activation="leaky_relu"))
        specs.append(LayerSpec("conv", 1, (1, 1), batch_norm=False,
                               activation="sigmoid"))
        return specs

    def to_json_dict(self) -> dict:
        return {"image_size": self.image_size, "body_filters": list(self.body_filters)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DiscriminatorSpec":
        return cls(image_size=int(doc["image_size"]),
                   body_filters=tuple(doc["body_filters"]))


@dataclass(frozen=True)
class GeneratorSpec:
    """Encoder-decoder with skip connections.

    At 256x256 the encoder applies (64,128,256,512,512,512,512) filters,
    the bottleneck reaches 1x1x512, and the decoder mirrors back with
    (512,512,512,512,256,128,64). Smaller power-of-two sizes drop
    encoder/decoder stages pairwise from the deep end (test-scale mode).
    """

    image_size: int = 256
    encoder_filters: tuple[int, ...] = ENCODER_FILTERS_FULL
    decoder_filters: tuple[int, ...] = tuple(reversed(ENCODER_FILTERS_FULL))
    bottleneck_filters: int = 512
    dropout_rate: float = 0.5
    dropout_stages: int = 3

    def __post_init__(self):
        _check_image_size(self.image_size)
        n = len(self.encoder_filters)
        if self.image_size != 2 ** (n + 1):
            raise ArchError(
                f"{n} encoder stages need image_size {2 ** (n + 1)}, "
                f"got {self.image_size}")
        if tuple(self.encoder_filters) != ENCODER_FILTERS_FULL[:n]:
            raise ArchError(
                f"encoder schedule must be {ENCODER_FILTERS_FULL[:n]} for "
                f"{n} stages, got {tuple(self.encoder_filters)}")
        if tuple(self.decoder_filters) != tuple(reversed(self.encoder_filters)):
            raise ArchError("decoder schedule must mirror the encoder")
        if self.bottleneck_filters != 512:
            raise ArchError(f"bottleneck must use 512 filters, got "
                            f"{self.bottleneck_filters}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchError(f"dropout_rate must be in [0, 1)")
        if not 0 <= self.dropout_stages <= n:
            raise ArchError(f"dropout_stages must be in [0, {n}]")

    @classmethod
    def for_image_size(cls, image_size: int, dropout_rate: float = 0.5) -> "GeneratorSpec":
        _check_image_size(image_size)
        n = int(math.log2(image_size)) - 1
        n = min(n, len(ENCODER_FILTERS_FULL))
        if image_size > 256:
            raise ArchError(f"image sizes above 256 are not supported")
        encoder = ENCODER_FILTERS_FULL[:n]
        return cls(image_size=image_size, encoder_filters=encoder,
                   decoder_filters=tuple(reversed(encoder)),
                   dropout_rate=dropout_rate,
                   dropout_stages=min(3, n))

    @property
    def stages(self) -> int:
        return len(self.encoder_filters)

    def encoder_layers(self) -> list[LayerSpec]:
        return [LayerSpec("conv", f, (2, 2), batch_norm=(i > 0),
                          activation="leaky_relu")
                for i, f in enumerate(self.encoder_filters)]

    def bottleneck_layer(self) -> LayerSpec:
        return LayerSpec("conv", self.bottleneck_filters, (2, 2),
                         batch_norm=False, activation="relu")

    def decoder_layers(self) -> list[LayerSpec]:
        return [LayerSpec("transposed_conv", f, (2, 2), batch_norm=True,
                          activation="relu",
                          dropout_rate=self.dropout_rate if i < self.dropout_stages
                          else 0.0)
                for i, f in enumerate(self.decoder_filters)]

    def output_layer(self) -> LayerSpec:
        return LayerSpec("transposed_conv", 3, (2, 2), batch_norm=False,
                         activation="tanh")

    def skip_source(self, decoder_stage: int) -> int:
        """Encoder stage (1-based) concatenated into the given decoder
        stage (1-based): mirrored pairing."""
        return self.stages + 1 - decoder_stage

    def to_json_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "encoder_filters": list(self.encoder_filters),
            "decoder_filters": list(self.decoder_filters),
            "bottleneck_filters": self.bottleneck_filters,
            "dropout_rate": self.dropout_rate,
            "dropout_stages": self.dropout_stages,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GeneratorSpec":
        return cls(
            image_size=int(doc["image_size"]),
            encoder_filters=tuple(doc["encoder_filters"]),
            decoder_filters=tuple(doc["decoder_filters"]),
            bottleneck_filters=int(doc["bottleneck_filters"]),
            dropout_rate=float(doc["dropout_rate"]),
            dropout_stages=int(doc["dropout_stages"]),
        )


@dataclass(frozen=True)
class ArchitectureSpec:
    """Generator + discriminator schedules for one image size, pinnable
    to a JSON file so audits and checkpoints reference the exact build."""

    generator: GeneratorSpec
    discriminator: DiscriminatorSpec

    def __post_init__(self):
        if self.generator.image_size != self.discriminator.image_size:
            raise ArchError(
                f"generator ({self.generator.image_size}) and discriminator "
                f"({self.discriminator.image_size}) image sizes differ")

    @property
    def image_size(self) -> int:
        return self.generator.image_size

    @classmethod
    def default(cls, image_size: int = 256) -> "ArchitectureSpec":
        return cls(GeneratorSpec.for_image_size(image_size),
                   DiscriminatorSpec(image_size=image_size))

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "image_size": self.image_size,
            "generator": self.generator.to_json_dict(),
            "discriminator": self.discriminator.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ArchitectureSpec":
        try:
            version = int(doc.get("schema_version", SCHEMA_VERSION))
            if version != SCHEMA_VERSION:
                raise ArchError(f"unsupported architecture schema v{version}")
            return cls(GeneratorSpec.from_json_dict(doc["generator"]),
                       DiscriminatorSpec.from_json_dict(doc["discriminator"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchError(f"malformed architecture document: {exc}") from exc

    def save(self, path: Path) -> Path:
        return write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path: Path) -> "ArchitectureSpec":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read architecture file {path}: {exc}") from exc
        return cls.from_json_dict(doc)

    def sha256(self) -> str:
        return sha256_hex(canonical_json(self.to_json_dict()))


# ---------------------------------------------------------------------------
# audit arithmetic


def receptive_field(schedule: list[tuple[int, int]]) -> tuple[int, int]:
    """Receptive-field size and jump of a conv stack.

    Forward recurrence from (r, j) = (1, 1): r += (k-1)*j, then j *= s,
    per (kernel, stride) layer.
    """
    if not schedule:
        raise ArchError("receptive_field: empty schedule")
    r, j = 1, 1
    for k, s in schedule:
        if k <= 0 or s <= 0:
            raise ArchError(f"receptive_field: non-positive kernel/stride ({k}, {s})")
        r += (k - 1) * j
        j *= s
    return r, j


def _same_out(size: int, stride: int) -> int:
    return -(-size // stride)  # ceil division


def _conv_params(k: tuple[int, int], c_in: int, filters: int, batch_norm: bool) -> int:
    p = k[0] * k[1] * c_in * filters + filters
    if batch_norm:
        p += 2 * filters
    return p


@dataclass(frozen=True)
class AuditRow:
    name: str
    kind: str
    filters: int
    stride: tuple[int, int]
    output_shape: tuple[int, int, int]  # (H, W, C); decoder rows are post-concat
    params: int
    receptive_field: int | None = None  # downsampling path only

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "filters": self.filters,
            "stride": list(self.stride),
            "output_shape": list(self.output_shape),
            "params": self.params,
            "receptive_field": self.receptive_field,
        }


@dataclass(frozen=True)
class AuditReport:
    model: str
    input_shape: tuple[int, int, int]
    rows: tuple[AuditRow, ...]
    total_params: int
    receptive_field: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "input_shape": list(self.input_shape),
            "layers": [r.to_json_dict() for r in self.rows],
            "total_params": self.total_params,
            "receptive_field": self.receptive_field,
        }

    def to_text(self) -> str:
        lines = [f"{self.model}  (input {self.input_shape[0]}x"
                 f"{self.input_shape[1]}x{self.input_shape[2]})"]
        header = f"{'layer':<12}{'kind':<16}{'stride':<8}{'output':<16}{'params':>12}{'rf':>6}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            out = "x".join(str(d) for d in r.output_shape)
            rf = str(r.receptive_field) if r.receptive_field is not None else "-"
            lines.append(f"{r.name:<12}{r.kind:<16}{r.stride[0]}x{r.stride[1]:<6}"
                         f"{out:<16}{r.params:>12,}{rf:>6}")
        lines.append(f"total params: {self.total_params:,}")
        if self.receptive_field is not None:
            lines.append(f"receptive field: {self.receptive_field}")
        return "\n".join(lines)


def _audit_discriminator(spec: DiscriminatorSpec) -> AuditReport:
    size = spec.image_size
    c_in = spec.input_channels
    rows = []
    schedule = []
    total = 0
    for i, layer in enumerate(spec.layers()):
        name = f"block{i + 1}" if layer.filters > 1 else "patch_out"
        size = _same_out(size, layer.stride[0])
        schedule.append((layer.kernel[0], layer.stride[0]))
        rf, _ = receptive_field(schedule)
        params = _conv_params(layer.kernel, c_in, layer.filters, layer.batch_norm)
        total += params
        rows.append(AuditRow(name, layer.kind, layer.filters, layer.stride,
                             (size, size, layer.filters), params, rf))
        c_in = layer.filters
    return AuditReport("discriminator", (spec.image_size, spec.image_size, 6),
                       tuple(rows), total, rows[-1].receptive_field)


def _audit_generator(spec: GeneratorSpec) -> AuditReport:
    rows = []
    total = 0
    size = spec.image_size
    c_in = 3
    schedule = []
    encoder_channels = []
    for i, layer in enumerate(spec.encoder_layers()):
        size //= 2
        schedule.append((layer.kernel[0], layer.stride[0]))
        rf, _ = receptive_field(schedule)
        params = _conv_params(layer.kernel, c_in, layer.filters, layer.batch_norm)
        total += params
        rows.append(AuditRow(f"enc{i + 1}", layer.kind, layer.filters, layer.stride,
                             (size, size, layer.filters), params, rf))
        c_in = layer.filters
        encoder_channels.append(layer.filters)

    layer = spec.bottleneck_layer()
    size //= 2
    schedule.append((layer.kernel[0], layer.stride[0]))
    rf, _ = receptive_field(schedule)
    params = _conv_params(layer.kernel, c_in, layer.filters, layer.batch_norm)
    total += params
    rows.append(AuditRow("bottleneck", layer.kind, layer.filters, layer.stride,
                         (size, size, layer.filters), params, rf))
    c_in = layer.filters

    for i, layer in enumerate(spec.decoder_layers()):
        size *= 2
        params = _conv_params(layer.kernel, c_in, layer.filters, layer.batch_norm)
        total += params
        skip_channels = encoder_channels[spec.skip_source(i + 1) - 1]
        out_channels = layer.filters + skip_channels
        rows.append(AuditRow(f"dec{i + 1}", layer.kind, layer.filters, layer.stride,
                             (size, size, out_channels), params, None))
        c_in = out_channels

    layer = spec.output_layer()
    size *= 2
    params = _conv_params(layer.kernel, c_in, layer.filters, layer.batch_norm)
    total += params
    rows.append(AuditRow("output", layer.kind, layer.filters, layer.stride,
                         (size, size, layer.filters), params, None))
    return AuditReport("generator", (spec.image_size, spec.image_size, 3),
                       tuple(rows), total)


def audit_model(spec) -> AuditReport:
    """Deterministic per-layer report: output shapes, parameter counts,
    receptive fields. Totals match framework-reported counts."""
    if isinstance(spec, DiscriminatorSpec):
        return _audit_discriminator(spec)
    if isinstance(spec, GeneratorSpec):
        return _audit_generator(spec)
    raise ArchError(f"cannot audit object of type {type(spec).__name__}")
