"""Acceptance suite: one test per criterion, each printing a PASS/FAIL
line (run with `pytest tests/test_acceptance.py -v -s`).

The desk-scale training fixture (criteria 6-8) is the long pole: three
20-epoch runs over a 64-pair synthetic dataset at 64x64.
"""
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from ashpix.arch import ArchitectureSpec, audit_model, receptive_field
from ashpix.cli import main as cli_main
from ashpix.evaluate import ash_presence, compute_confusion, compute_metrics, ConfusionMatrix
from ashpix.models import (build_composite, build_discriminator,
                           build_generator)
from ashpix.pipeline import (RawPair, Satellite, combine_pair, denormalize,
                             normalize, prepare_dataset, split_combined,
                             split_dataset)
from ashpix.predict import predict_batch
from ashpix.synth import SynthConfig, generate
from ashpix.train import (TrainingConfig, composite_step, discriminator_step,
                          load_metrics_csv, train, _adam)
from ashpix.util import load_rgb


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} ({name}): FAIL")
        raise
    print(f"ACCEPTANCE {number} ({name}): PASS")


# ---------------------------------------------------------------------------
# 1. stratified-split reproduction


def test_criterion_1_split_table_reproduction():
    with criterion(1, "split table reproduction"):
        strata = {Satellite.GOES16: 148, Satellite.GOES17: 401,
                  Satellite.HIMAWARI8: 16, Satellite.METEOSAT11: 35}
        pairs = []
        for sat, n in strata.items():
            pairs.extend(RawPair(f"{sat.value.lower()}_{i:05d}.jpg",
                                 f"{sat.value.lower()}_{i:05d}.jpg", sat)
                         for i in range(n))
        start = time.perf_counter()
        manifest = split_dataset(pairs, fractions=(0.80, 0.15, 0.05), seed=0)
        elapsed = time.perf_counter() - start

        assert manifest.per_satellite_counts == {
            "GOES16": {"train": 118, "val": 23, "test": 7},
            "GOES17": {"train": 320, "val": 61, "test": 20},
            "HIMAWARI8": {"train": 12, "val": 3, "test": 1},
            "METEOSAT11": {"train": 28, "val": 5, "test": 2},
        }
        assert (len(manifest.train), len(manifest.val), len(manifest.test)) == \
            (478, 92, 30)
        assert elapsed < 1.0, f"split took {elapsed:.3f}s"


# ---------------------------------------------------------------------------
# 2. confusion-metric reproduction


def test_criterion_2_confusion_metric_reproduction():
    with criterion(2, "confusion metrics"):
        report = compute_metrics(ConfusionMatrix(tp=23, fp=0, fn=7, tn=0))
        assert report.accuracy == pytest.approx(0.7667, abs=1e-4)
        assert report.precision == 1.0
        assert report.sensitivity == pytest.approx(0.7667, abs=1e-4)
        assert report.specificity is None
        assert report.as_dict(paper_compat=True)["specificity"] == 0.0


# ---------------------------------------------------------------------------
# 3. architecture audit


def test_criterion_3_architecture_audit():
    with criterion(3, "architecture audit"):
        start = time.perf_counter()
        arch = ArchitectureSpec.default(256)
        disc_report = audit_model(arch.discriminator)
        gen_report = audit_model(arch.generator)
        assert disc_report.rows[-1].output_shape == (16, 16, 1)
        trace = [r.output_shape[0] for r in gen_report.rows
                 if r.name.startswith("enc") or r.name == "bottleneck"]
        assert trace == [128, 64, 32, 16, 8, 4, 2, 1]
        assert receptive_field([(4, 2)] * 3 + [(4, 1)] * 2)[0] == 70
        assert receptive_field([(4, 2)] * 4 + [(4, 1)] * 2)[0] == 142
        arithmetic_elapsed = time.perf_counter() - start
        assert arithmetic_elapsed < 1.0, f"audit took {arithmetic_elapsed:.3f}s"

        # the built networks honor the audited contract (untimed: model
        # instantiation at 256 is hardware-bound)
        gen = build_generator(arch.generator, init_seed=1)
        disc = build_discriminator(arch.discriminator, init_seed=2)
        x = torch.from_numpy(
            np.random.default_rng(0).random((1, 256, 256, 3), dtype=np.float32)
            .transpose(0, 3, 1, 2) * 2 - 1).float()
        with torch.no_grad():
            generated = gen(x)
            patch = disc(x, generated)
        assert tuple(generated.shape) == (1, 3, 256, 256)
        assert float(generated.min()) >= -1.0 and float(generated.max()) <= 1.0
        assert tuple(patch.shape) == (1, 1, 16, 16)
        print(f"  [criterion 3] audit arithmetic {arithmetic_elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------------------
# 4. complementary freeze properties


def test_criterion_4_freeze_properties():
    with criterion(4, "freeze properties"):
        start = time.perf_counter()
        arch = ArchitectureSpec.default(32)
        gen = build_generator(arch.generator, init_seed=3)
        disc = build_discriminator(arch.discriminator, init_seed=4)
        comp = build_composite(gen, disc, 100.0)
        opt_g = _adam(gen.parameters(), 2e-4, (0.5, 0.999))
        opt_d = _adam(disc.parameters(), 2e-4, (0.5, 0.999))
        rng = np.random.default_rng(5)
        src = rng.random((2, 32, 32, 3), dtype=np.float32) * 2 - 1
        tgt = rng.random((2, 32, 32, 3), dtype=np.float32) * 2 - 1

        disc_before = [p.detach().clone() for p in disc.parameters()]
        composite_step(comp, opt_g, src, tgt)
        assert all(torch.equal(a, b) for a, b in
                   zip(disc_before, disc.parameters()))

        gen_before = [p.detach().clone() for p in gen.parameters()]
        discriminator_step(disc, opt_d, src, tgt, real=True)
        assert all(torch.equal(a, b) for a, b in
                   zip(gen_before, gen.parameters()))
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0, f"freeze checks took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 5. round trips


def test_criterion_5_round_trips():
    with criterion(5, "round trips"):
        values = np.arange(256, dtype=np.uint8)
        assert np.array_equal(denormalize(normalize(values)), values)

        rng = np.random.default_rng(6)
        source = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
        target = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
        back_s, back_t = split_combined(combine_pair(source, target))
        assert np.array_equal(back_s, source) and np.array_equal(back_t, target)
        combined = rng.integers(0, 256, (256, 512, 3), dtype=np.uint8)
        assert np.array_equal(combine_pair(*split_combined(combined)), combined)


# ---------------------------------------------------------------------------
# 6 + 7. desk-scale training and end-to-end oracle


DESK_SEEDS = (1, 2, 3)


def _build_heldout(root: Path) -> Path:
    """16 held-out pairs mixing high-contrast tiny plumes (straddling the
    ash-presence area threshold) with low-contrast plumes and ash-free
    images, so a competent model still produces both error types."""
    import shutil

    batches = [
        ("a", SynthConfig(count=8, image_size=(64, 64), blob_count_range=(1, 2),
                          blob_radius_range=(0.02, 0.06),
                          plume_gray_range=(150.0, 210.0), seed=908)),
        ("b", SynthConfig(count=8, image_size=(64, 64), blob_count_range=(0, 2),
                          blob_radius_range=(0.03, 0.10),
                          plume_gray_range=(60.0, 140.0), seed=707)),
    ]
    heldout = root / "heldout"
    (heldout / "source").mkdir(parents=True)
    (heldout / "target").mkdir(parents=True)
    truth: dict = {}
    for tag, config in batches:
        batch_dir = root / f"heldout_{tag}"
        generate(config, batch_dir)
        doc = json.loads((batch_dir / "truth.json").read_text())
        for img in sorted((batch_dir / "source").iterdir()):
            name = f"{img.stem}_{tag}.png"
            shutil.copy(img, heldout / "source" / name)
            shutil.copy(batch_dir / "target" / img.name,
                        heldout / "target" / name)
            truth[name] = doc[img.name]
    (heldout / "truth.json").write_text(json.dumps(truth, sort_keys=True))
    return heldout


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    generate(SynthConfig(count=64, image_size=(64, 64), seed=101), root / "synth")
    manifest = prepare_dataset(root / "synth" / "source",
                               root / "synth" / "target", root / "prepared",
                               seed=41, lossless=True, size=(64, 64))
    _build_heldout(root)

    runs = {}
    start = time.perf_counter()
    for seed in DESK_SEEDS:
        out = root / f"run_seed{seed}"
        config = TrainingConfig(dataset_dir=root / "prepared", out_dir=out,
                                epochs=20, batch_size=1, learning_rate=0.0002,
                                lambda_l1=100.0, checkpoint_every=10, seed=seed)
        records, history = train(config, manifest)
        runs[seed] = (out, records, history)
    elapsed = time.perf_counter() - start
    return {"root": root, "manifest": manifest, "runs": runs,
            "train_seconds": elapsed}


def test_criterion_6_desk_scale_training(desk_runs):
    with criterion(6, "desk-scale training"):
        improved = 0
        for seed in DESK_SEEDS:
            out, records, history = desk_runs["runs"][seed]
            assert [r.epoch for r in records] == [10, 20]
            assert (out / "checkpoints" / "model_epoch_10.weights").is_file()
            assert (out / "checkpoints" / "model_epoch_20.weights").is_file()

            rows = load_metrics_csv(out / "metrics.csv")
            assert [r["epoch"] for r in rows] == list(range(1, 21))
            for row in rows:
                for name, value in row.items():
                    if value is not None:
                        assert math.isfinite(value), f"{name} at epoch {row['epoch']}"

            l1_first = rows[0]["g_loss_l1"]
            l1_last = rows[-1]["g_loss_l1"]
            if l1_last < l1_first:
                improved += 1
            print(f"  [criterion 6] seed {seed}: L1 epoch1 {l1_first:.4f} -> "
                  f"epoch20 {l1_last:.4f}")
        assert improved >= 2, f"L1 improved in only {improved}/3 seeds"
        minutes = desk_runs["train_seconds"] / 60
        print(f"  [criterion 6] 3 runs took {minutes:.1f} min "
              f"(target < 15 min on a laptop CPU)")


def test_criterion_7_end_to_end_oracle(desk_runs):
    with criterion(7, "end-to-end oracle"):
        root = desk_runs["root"]
        out, records, _history = desk_runs["runs"][DESK_SEEDS[0]]
        checkpoint = records[-1].weights_path  # epoch 20

        result = predict_batch(root / "heldout" / "source", checkpoint,
                               root / "heldout_masks", dropout_seed=0)
        assert len(result.outputs) == 16 and not result.failures

        # truth is the evaluator's own judgment of the true masks; the
        # analytic blob oracle must agree with it exactly on every image
        truth_doc = json.loads((root / "heldout" / "truth.json").read_text())
        area = 64 * 64
        truth = []
        for name, entry in truth_doc.items():
            stem = Path(name).stem
            judged = ash_presence(load_rgb(root / "heldout" / "target" / name))
            assert judged == (entry["ash_pixels"] / area > 0.005), name
            truth.append((stem, judged))
        assert any(flag for _, flag in truth) and \
            any(not flag for _, flag in truth), "fixture must mix both classes"

        predictions = [(p.stem, ash_presence(load_rgb(p)))
                       for p in result.outputs]
        cm = compute_confusion(predictions, truth)

        # brute-force per-image recount, independent of compute_confusion
        pred_map, truth_map = dict(predictions), dict(truth)
        tp = fp = fn = tn = 0
        for stem in truth_map:
            actual, predicted = truth_map[stem], pred_map[stem]
            if actual and predicted:
                tp += 1
            elif predicted and not actual:
                fp += 1
            elif actual and not predicted:
                fn += 1
            else:
                tn += 1
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (tp, fp, fn, tn)
        assert cm.total == 16
        print(f"  [criterion 7] tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn}")
        assert cm.tp > 0 and cm.fp > 0 and cm.fn > 0 and cm.tn > 0, \
            "all four confusion cells must be populated"


# ---------------------------------------------------------------------------
# 8. whole-pipeline determinism


def _run_pipeline(base: Path) -> dict[str, bytes]:
    synth_dir = base / "synth"
    prepared = base / "prepared"
    run_dir = base / "run"
    masks = base / "masks"
    assert cli_main(["synth", "--count", "12", "--seed", "77", "--size", "32",
                     "--out", str(synth_dir)]) == 0
    assert cli_main(["prepare", "--source-dir", str(synth_dir / "source"),
                     "--target-dir", str(synth_dir / "target"),
                     "--out-dir", str(prepared), "--seed", "55", "--size", "32",
                     "--lossless"]) == 0
    assert cli_main(["split", "--source-dir", str(synth_dir / "source"),
                     "--out", str(base / "manifest_only.json"),
                     "--seed", "55"]) == 0
    assert cli_main(["train", "--data-dir", str(prepared),
                     "--out-dir", str(run_dir), "--epochs", "2",
                     "--checkpoint-every", "2", "--seed", "13"]) == 0
    assert cli_main(["predict-batch", "--dir", str(synth_dir / "source"),
                     "--checkpoint",
                     str(run_dir / "checkpoints" / "model_epoch_2.weights"),
                     "--out-dir", str(masks), "--dropout-seed", "0"]) == 0

    artifacts = {
        "manifest": (prepared / "manifest.json").read_bytes(),
        "manifest_only": (base / "manifest_only.json").read_bytes(),
        "metrics": (run_dir / "metrics.csv").read_bytes(),
    }
    for mask in sorted(masks.glob("*.png")):
        artifacts[f"mask:{mask.name}"] = mask.read_bytes()
    return artifacts


def test_criterion_8_pipeline_determinism(tmp_path):
    with criterion(8, "pipeline determinism"):
        first = _run_pipeline(tmp_path / "run1")
        second = _run_pipeline(tmp_path / "run2")
        assert first.keys() == second.keys()
        assert len([k for k in first if k.startswith("mask:")]) == 12
        for key in first:
            assert first[key] == second[key], f"{key} differs between runs"
