"""Single command-line entry point exposing the pipeline as subcommands.

Every option resolves with precedence flags > environment (ASHPIX_*) >
config file (--config, YAML) > built-in default, and the effective value
of each is logged at startup. Exit codes: 0 success, 1 usage error,
2 data error, 3 runtime/training error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .arch import SCHEMA_VERSION, ArchitectureSpec, audit_model
from .errors import AshpixError, ConfigError, DataError
from .util import write_json

log = logging.getLogger("ashpix")

ENV_PREFIX = "ASHPIX_"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated fractions, got {text!r}")
    return tuple(float(p) for p in parts)


@dataclass(frozen=True)
class Option:
    name: str  # dest / config key / env suffix
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False  # boolean switch (--name sets True)

    @property
    def cli_flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _opt(name, parse, default, help, flag=False) -> Option:
    return Option(name, parse, default, help, flag)


_COMMON = [
    _opt("config", str, None, "YAML configuration file (keys = option names)"),
]

SUBCOMMANDS: dict[str, list[Option]] = {
    "synth": [
        _opt("count", int, 16, "number of pairs to generate"),
        _opt("out", str, None, "output directory (source/, target/, truth.json)"),
        _opt("seed", int, 0, "generation seed"),
        _opt("size", int, 256, "square image size in pixels"),
        _opt("blob_min", int, 0, "minimum plume count per image"),
        _opt("blob_max", int, 4, "maximum plume count per image"),
    ],
    "prepare": [
        _opt("source_dir", str, None, "directory of satellite images"),
        _opt("target_dir", str, None, "directory of delimitation masks"),
        _opt("out_dir", str, None, "prepared dataset directory"),
        _opt("seed", int, 0, "split seed"),
        _opt("fractions", _parse_fractions, (0.80, 0.15, 0.05),
             "train,val,test fractions"),
        _opt("lossless", _parse_bool, False, "store combined samples as PNG",
             flag=True),
        _opt("satellite_map", str, None,
             "CSV with columns filename,satellite (else prefix inference)"),
        _opt("size", int, 256, "per-half image size in pixels"),
    ],
    "split": [
        _opt("source_dir", str, None, "directory of images to split"),
        _opt("out", str, None, "manifest path to write"),
        _opt("seed", int, 0, "split seed"),
        _opt("fractions", _parse_fractions, (0.80, 0.15, 0.05),
             "train,val,test fractions"),
        _opt("satellite_map", str, None, "CSV with columns filename,satellite"),
    ],
    "train": [
        _opt("data_dir", str, None, "prepared dataset directory"),
        _opt("out_dir", str, None, "run output directory"),
        _opt("epochs", int, 100, "training epochs"),
        _opt("batch_size", int, 1, "batch size"),
        _opt("lr", float, 0.0002, "Adam learning rate"),
        _opt("lambda_l1", float, 100.0, "reconstruction loss weight"),
        _opt("checkpoint_every", int, 10, "checkpoint cadence in epochs"),
        _opt("seed", int, 0, "training seed"),
        _opt("arch", str, None, "architecture JSON (default: inferred from data)"),
        _opt("resume", _parse_bool, False, "resume from the latest run state",
             flag=True),
        _opt("per_iteration", _parse_bool, False,
             "also write per-iteration metrics (iterations.csv)", flag=True),
        _opt("event_log", str, None, "write machine-readable events to this file"),
    ],
    "evaluate": [
        _opt("out_dir", str, None, "evaluation output directory"),
        _opt("metrics_csv", str, None, "training metrics CSV to plot"),
        _opt("checkpoints", str, None, "checkpoints directory to compare"),
        _opt("samples_dir", str, None, "directory of combined sample pairs"),
        _opt("samples_count", int, 3, "pairs per comparison grid"),
        _opt("pred_dir", str, None, "directory of predicted masks"),
        _opt("truth_dir", str, None, "directory of ground-truth masks"),
        _opt("truth_json", str, None, "analytic truth JSON (synth fixtures)"),
        _opt("threshold_luminance", float, 128.0,
             "dark-pixel luminance threshold"),
        _opt("threshold_fraction", float, 0.005,
             "dark-area fraction that counts as ash"),
        _opt("paper_compat", _parse_bool, False,
             "render undefined metrics as 0", flag=True),
        _opt("dropout_seed", int, 0, "dropout seed for comparison grids"),
    ],
    "predict": [
        _opt("image", str, None, "input satellite image"),
        _opt("checkpoint", str, None, "generator checkpoint (.weights)"),
        _opt("out", str, None, "mask output path"),
        _opt("dropout_seed", int, 0, "dropout seed"),
        _opt("no_dropout", _parse_bool, False, "disable inference dropout",
             flag=True),
        _opt("arch", str, None, "architecture JSON the checkpoint must match"),
    ],
    "predict-batch": [
        _opt("dir", str, None, "directory of input images"),
        _opt("checkpoint", str, None, "generator checkpoint (.weights)"),
        _opt("out_dir", str, None, "mask output directory"),
        _opt("dropout_seed", int, 0, "dropout seed"),
        _opt("no_dropout", _parse_bool, False, "disable inference dropout",
             flag=True),
    ],
    "audit": [
        _opt("arch", str, None, "architecture JSON to audit"),
        _opt("size", int, 256, "image size for the default architecture"),
        _opt("json", _parse_bool, False, "emit the report as JSON", flag=True),
    ],
}

_REQUIRED: dict[str, tuple[str, ...]] = {
    "synth": ("out",),
    "prepare": ("source_dir", "target_dir", "out_dir"),
    "split": ("source_dir", "out"),
    "train": ("data_dir", "out_dir"),
    "evaluate": ("out_dir",),
    "predict": ("image", "checkpoint", "out"),
    "predict-batch": ("dir", "checkpoint", "out_dir"),
    "audit": (),
}


class _Parser(argparse.ArgumentParser):
    """Usage problems print usage text and exit 1 (not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="ashpix", description=__doc__)
    parser.add_argument(
        "--version", action="version",
        version=f"ashpix {__version__} (architecture schema v{SCHEMA_VERSION})")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, options in SUBCOMMANDS.items():
        sub = subparsers.add_parser(command, help=f"{command} stage")
        for opt in _COMMON + options:
            if opt.flag:
                sub.add_argument(opt.cli_flag, dest=opt.name, action="store_const",
                                 const=True, default=argparse.SUPPRESS,
                                 help=opt.help)
            else:
                sub.add_argument(opt.cli_flag, dest=opt.name, type=opt.parse,
                                 default=argparse.SUPPRESS, help=opt.help)
    return parser


def _load_config_file(path: str) -> dict:
    import yaml

    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must be a mapping")
    known = {opt.name for opts in SUBCOMMANDS.values() for opt in opts}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    return doc


def _coerce_file_value(opt: Option, raw) -> Any:
    """Typed YAML values pass through when compatible; strings reparse."""
    if isinstance(raw, str):
        return opt.parse(raw)
    if opt.parse is _parse_bool:
        if not isinstance(raw, bool):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw
    if opt.parse is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ValueError(f"expected an integer, got {raw!r}")
        return raw
    if opt.parse is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        return float(raw)
    if opt.parse is _parse_fractions:
        if isinstance(raw, (list, tuple)) and len(raw) == 3:
            return tuple(float(f) for f in raw)
        raise ValueError(f"expected three fractions, got {raw!r}")
    raise ValueError(f"unsupported value {raw!r}")


def resolve_options(command: str, ns: argparse.Namespace,
                    environ: dict | None = None) -> dict:
    """Merge flag/env/file/default values and log each effective one."""
    environ = os.environ if environ is None else environ
    file_cfg: dict = {}
    config_path = getattr(ns, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        file_cfg = _load_config_file(config_path)

    resolved = {}
    for opt in SUBCOMMANDS[command]:
        env_key = ENV_PREFIX + opt.name.upper()
        if hasattr(ns, opt.name):
            value, source = getattr(ns, opt.name), "flag"
        elif env_key in environ:
            try:
                value = opt.parse(environ[env_key])
            except ValueError as exc:
                raise ConfigError(f"bad {env_key}: {exc}") from exc
            source = "env"
        elif opt.name in file_cfg:
            try:
                value = _coerce_file_value(opt, file_cfg[opt.name])
            except ValueError as exc:
                raise ConfigError(f"bad config value for {opt.name}: {exc}") from exc
            source = "file"
        else:
            value, source = opt.default, "default"
        resolved[opt.name] = value
        log.info("option %s = %r (%s)", opt.name, value, source)

    missing = [name for name in _REQUIRED[command] if resolved.get(name) is None]
    if missing:
        flags = ", ".join("--" + name.replace("_", "-") for name in missing)
        raise ConfigError(f"{command}: missing required option(s): {flags}")
    return resolved


# ---------------------------------------------------------------------------
# subcommand handlers


def _satellite_map(opts) -> dict | None:
    from .pipeline import read_satellite_map

    if opts.get("satellite_map"):
        return read_satellite_map(Path(opts["satellite_map"]))
    return None


def cmd_synth(opts) -> int:
    from .synth import SynthConfig, generate

    config = SynthConfig(count=opts["count"],
                         image_size=(opts["size"], opts["size"]),
                         blob_count_range=(opts["blob_min"], opts["blob_max"]),
                         seed=opts["seed"])
    pairs = generate(config, Path(opts["out"]))
    print(f"generated {len(pairs)} pair(s) under {opts['out']}")
    return 0


def cmd_prepare(opts) -> int:
    from .pipeline import prepare_dataset

    manifest = prepare_dataset(
        Path(opts["source_dir"]), Path(opts["target_dir"]), Path(opts["out_dir"]),
        seed=opts["seed"], fractions=opts["fractions"],
        lossless=opts["lossless"], satellite_map=_satellite_map(opts),
        size=(opts["size"], opts["size"]))
    print(f"prepared train={len(manifest.train)} val={len(manifest.val)} "
          f"test={len(manifest.test)} -> {opts['out_dir']}")
    return 0


def cmd_split(opts) -> int:
    from .pipeline import split_dataset, tag_sources

    pairs = tag_sources(Path(opts["source_dir"]), _satellite_map(opts))
    manifest = split_dataset(pairs, fractions=opts["fractions"], seed=opts["seed"])
    manifest.save(Path(opts["out"]))
    print(f"manifest: train={len(manifest.train)} val={len(manifest.val)} "
          f"test={len(manifest.test)} -> {opts['out']}")
    return 0


def cmd_train(opts) -> int:
    from .pipeline import SplitManifest
    from .train import TrainingConfig, train
    from .util import EventLog

    data_dir = Path(opts["data_dir"])
    manifest = SplitManifest.load(data_dir / "manifest.json")
    arch = ArchitectureSpec.load(Path(opts["arch"])) if opts.get("arch") else None
    config = TrainingConfig(
        dataset_dir=data_dir, out_dir=Path(opts["out_dir"]),
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        learning_rate=opts["lr"], lambda_l1=opts["lambda_l1"],
        checkpoint_every=opts["checkpoint_every"], seed=opts["seed"],
        architecture=arch, resume=opts["resume"],
        per_iteration_log=opts["per_iteration"],
        event_log=EventLog(Path(opts["event_log"])) if opts.get("event_log") else None)
    records, history = train(config, manifest)
    print(f"trained {len(history)} epoch(s), wrote {len(records)} checkpoint(s) "
          f"under {opts['out_dir']}")
    return 0


def cmd_evaluate(opts) -> int:
    from . import evaluate as ev
    from .pipeline import ImagePair, infer_satellite
    from .util import load_rgb

    out_dir = Path(opts["out_dir"])
    did_anything = False

    if opts.get("metrics_csv"):
        plots = ev.plot_history(Path(opts["metrics_csv"]), out_dir / "plots")
        print(f"wrote {len(plots)} plot(s) under {out_dir / 'plots'}")
        did_anything = True

    if opts.get("checkpoints"):
        if not opts.get("samples_dir"):
            raise ConfigError("evaluate: --checkpoints needs --samples-dir")
        records = ev.find_checkpoints(Path(opts["checkpoints"]))
        samples_dir = Path(opts["samples_dir"])
        files = sorted(p for p in samples_dir.iterdir()
                       if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
        if not files:
            raise DataError(f"no sample pairs in {samples_dir}")
        pairs = [ImagePair(load_rgb(p), infer_satellite(p.name), identifier=p.name)
                 for p in files[: opts["samples_count"]]]
        grids, index = ev.compare_checkpoints(records, pairs, out_dir / "compare",
                                              dropout_seed=opts["dropout_seed"])
        print(f"wrote {len(grids)} comparison grid(s); index at {index}")
        did_anything = True

    if opts.get("pred_dir"):
        cm, report = _confusion_part(opts, out_dir)
        print(f"confusion: tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn}; "
              f"metrics -> {out_dir / 'confusion.json'}")
        did_anything = True

    if not did_anything:
        raise ConfigError(
            "evaluate: nothing to do; pass --metrics-csv, --checkpoints, or "
            "--pred-dir")
    return 0


def _presence_of_dir(directory: Path, lum: float, frac: float) -> dict[str, bool]:
    from . import evaluate as ev
    from .util import load_rgb

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
    if not files:
        raise DataError(f"no mask images in {directory}")
    return {p.stem: ev.ash_presence(load_rgb(p), lum, frac) for p in files}


def _confusion_part(opts, out_dir: Path):
    import json

    from . import evaluate as ev

    lum = opts["threshold_luminance"]
    frac = opts["threshold_fraction"]
    predictions = _presence_of_dir(Path(opts["pred_dir"]), lum, frac)

    if opts.get("truth_json"):
        try:
            doc = json.loads(Path(opts["truth_json"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read truth JSON: {exc}") from exc
        truth = {}
        for name, entry in doc.items():
            stem = Path(name).stem
            truth[stem] = bool(entry["has_ash"] if isinstance(entry, dict) else entry)
    elif opts.get("truth_dir"):
        truth = _presence_of_dir(Path(opts["truth_dir"]), lum, frac)
    else:
        raise ConfigError("evaluate: --pred-dir needs --truth-dir or --truth-json")

    cm = ev.compute_confusion(sorted(predictions.items()), sorted(truth.items()))
    report = ev.compute_metrics(cm)
    write_json(out_dir / "confusion.json", {
        "counts": cm.to_json_dict(),
        "metrics": report.as_dict(paper_compat=opts["paper_compat"]),
        "paper_compat": opts["paper_compat"],
        "thresholds": {"luminance": lum, "fraction": frac},
    })
    return cm, report


def cmd_predict(opts) -> int:
    from .predict import PredictionRequest, predict

    expected = ArchitectureSpec.load(Path(opts["arch"])) if opts.get("arch") else None
    request = PredictionRequest(
        image_path=Path(opts["image"]), checkpoint=Path(opts["checkpoint"]),
        output_path=Path(opts["out"]), dropout_seed=opts["dropout_seed"],
        use_dropout=not opts["no_dropout"])
    path = predict(request, expected_arch=expected)
    print(f"mask written to {path}")
    return 0


def cmd_predict_batch(opts) -> int:
    from .predict import predict_batch

    result = predict_batch(Path(opts["dir"]), Path(opts["checkpoint"]),
                           Path(opts["out_dir"]), dropout_seed=opts["dropout_seed"],
                           use_dropout=not opts["no_dropout"])
    print(f"predicted {len(result.outputs)} mask(s), {len(result.failures)} "
          f"failure(s) -> {opts['out_dir']}")
    return 0


def cmd_audit(opts) -> int:
    import json

    if opts.get("arch"):
        arch = ArchitectureSpec.load(Path(opts["arch"]))
    else:
        arch = ArchitectureSpec.default(opts["size"])
    disc_report = audit_model(arch.discriminator)
    gen_report = audit_model(arch.generator)
    if opts["json"]:
        print(json.dumps({
            "architecture_sha256": arch.sha256(),
            "discriminator": disc_report.to_json_dict(),
            "generator": gen_report.to_json_dict(),
        }, indent=2, sort_keys=True))
    else:
        print(disc_report.to_text())
        print()
        print(gen_report.to_text())
        print()
        print(f"architecture sha256: {arch.sha256()}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "predict-batch": cmd_predict_batch,
    "audit": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        opts = resolve_options(ns.command, ns)
        return _HANDLERS[ns.command](opts)
    except AshpixError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
