import json

import numpy as np
import pytest

from ashpix.errors import CheckpointError, DataError
from ashpix.models import build_generator, save_generator_checkpoint
from ashpix.pipeline import denormalize, normalize, resize_image, split_combined
from ashpix.predict import (PredictionRequest, load_image, predict,
                            predict_batch)
from ashpix.train import make_fake_samples
from ashpix.util import load_rgb, save_image


@pytest.fixture()
def checkpoint32(tiny_arch, tmp_path):
    gen = build_generator(tiny_arch.generator, init_seed=6)
    return save_generator_checkpoint(
        gen, tiny_arch, epoch=20, seed=0,
        weights_path=tmp_path / "checkpoints" / "model_epoch_20.weights")


# ---------------------------------------------------------------------------
# load_image


def test_load_image_all_white_is_ones(tmp_path):
    path = tmp_path / "white.png"
    save_image(path, np.full((256, 256, 3), 255, dtype=np.uint8))
    tensor = load_image(path, size=256)
    assert tensor.shape == (256, 256, 3)
    assert (tensor == 1.0).all()


def test_load_image_resizes_and_normalizes(tmp_path, rng):
    path = tmp_path / "big.png"
    save_image(path, rng.integers(0, 256, (768, 1024, 3), dtype=np.uint8))
    tensor = load_image(path, size=256)
    assert tensor.shape == (256, 256, 3)
    assert tensor.min() >= -1.0 and tensor.max() <= 1.0


def test_load_image_commutes_with_preresize(tmp_path, rng):
    img = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    direct = tmp_path / "direct.png"
    save_image(direct, img)
    pre = tmp_path / "pre.png"
    save_image(pre, resize_image(img, (256, 256)))
    assert np.array_equal(load_image(direct, 256), load_image(pre, 256))


def test_load_image_rejects_unreadable(tmp_path):
    missing = tmp_path / "nope.png"
    with pytest.raises(DataError, match="nope.png"):
        load_image(missing)
    corrupt = tmp_path / "bad.png"
    corrupt.write_bytes(b"this is not an image")
    with pytest.raises(DataError, match="bad.png"):
        load_image(corrupt)


# ---------------------------------------------------------------------------
# predict


def test_predict_writes_mask_and_sidecar(checkpoint32, tmp_path, rng):
    image = tmp_path / "input.png"
    save_image(image, rng.integers(0, 256, (48, 48, 3), dtype=np.uint8))
    out = tmp_path / "mask.png"
    path = predict(PredictionRequest(image, checkpoint32.weights_path, out,
                                     dropout_seed=5))
    mask = load_rgb(path)
    assert mask.shape == (32, 32, 3)
    assert mask.dtype == np.uint8
    sidecar = json.loads((tmp_path / "mask.meta.json").read_text())
    assert sidecar["checkpoint_epoch"] == 20
    assert sidecar["input_path"].endswith("input.png")
    assert sidecar["architecture_sha256"] == checkpoint32.metadata[
        "architecture_sha256"]


def test_predict_same_seed_identical_output(checkpoint32, tmp_path, rng):
    image = tmp_path / "input.png"
    save_image(image, rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    a = predict(PredictionRequest(image, checkpoint32.weights_path,
                                  tmp_path / "a.png", dropout_seed=9))
    b = predict(PredictionRequest(image, checkpoint32.weights_path,
                                  tmp_path / "b.png", dropout_seed=9))
    c = predict(PredictionRequest(image, checkpoint32.weights_path,
                                  tmp_path / "c.png", dropout_seed=10))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_predict_no_dropout_flag(checkpoint32, tmp_path, rng):
    image = tmp_path / "input.png"
    save_image(image, rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    a = predict(PredictionRequest(image, checkpoint32.weights_path,
                                  tmp_path / "a.png", dropout_seed=1,
                                  use_dropout=False))
    b = predict(PredictionRequest(image, checkpoint32.weights_path,
                                  tmp_path / "b.png", dropout_seed=2,
                                  use_dropout=False))
    assert a.read_bytes() == b.read_bytes()  # seed irrelevant without dropout


def test_predict_rejects_tampered_checkpoint(checkpoint32, tmp_path, rng):
    meta_path = checkpoint32.weights_path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text())
    meta["architecture"]["generator"]["dropout_rate"] = 0.1
    meta_path.write_text(json.dumps(meta))
    image = tmp_path / "input.png"
    save_image(image, rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    out = tmp_path / "never.png"
    with pytest.raises(CheckpointError):
        predict(PredictionRequest(image, checkpoint32.weights_path, out))
    assert not out.exists()  # failed prediction leaves no output file


def test_atomic_write_never_leaves_partial_file(tmp_path, monkeypatch):
    import os

    from ashpix.util import atomic_write_bytes

    target = tmp_path / "out.bin"

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_bytes(target, b"payload")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []  # temp file cleaned up too


def test_predict_matches_training_generation(tiny_arch, tmp_path, rng):
    """Pipeline consistency: predicting the left half of a combined pair
    reproduces the trainer's generated image bit-for-bit under the same
    dropout seed."""
    combined = rng.integers(0, 256, (32, 64, 3), dtype=np.uint8)
    source_raw, _ = split_combined(combined)
    image_path = tmp_path / "source.png"
    save_image(image_path, source_raw)

    gen = build_generator(tiny_arch.generator, init_seed=14)
    record = save_generator_checkpoint(
        gen, tiny_arch, epoch=10, seed=0,
        weights_path=tmp_path / "ckpt" / "model_epoch_10.weights")

    mask_path = predict(PredictionRequest(image_path, record.weights_path,
                                          tmp_path / "mask.png", dropout_seed=77))

    gen.seed_dropout(77)
    generated, _ = make_fake_samples(gen, normalize(source_raw)[None])
    expected = denormalize(generated[0])
    assert np.array_equal(load_rgb(mask_path), expected)


# ---------------------------------------------------------------------------
# predict_batch


def test_predict_batch_counts_and_isolation(checkpoint32, tmp_path, rng):
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    for i in range(3):
        save_image(inputs / f"img_{i}.png",
                   rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    (inputs / "broken.png").write_bytes(b"not an image")

    result = predict_batch(inputs, checkpoint32.weights_path, tmp_path / "masks",
                           dropout_seed=3)
    assert len(result.outputs) == 3
    assert len(result.failures) == 1
    assert result.failures[0][0] == "broken.png"
    summary = json.loads((tmp_path / "masks" / "summary.json").read_text())
    assert summary["predicted"] == 3 and summary["failed"] == 1
    # accounting identity: outputs == inputs - failures
    n_inputs = len(list(inputs.iterdir()))
    assert len(result.outputs) == n_inputs - len(result.failures)


def test_predict_batch_rejects_empty_dir(checkpoint32, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError, match="no images"):
        predict_batch(empty, checkpoint32.weights_path, tmp_path / "masks")


def test_predict_batch_deterministic_per_file(checkpoint32, tmp_path, rng):
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    for i in range(2):
        save_image(inputs / f"img_{i}.png",
                   rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    a = predict_batch(inputs, checkpoint32.weights_path, tmp_path / "m1",
                      dropout_seed=4)
    b = predict_batch(inputs, checkpoint32.weights_path, tmp_path / "m2",
                      dropout_seed=4)
    for pa, pb in zip(a.outputs, b.outputs):
        assert pa.read_bytes() == pb.read_bytes()
