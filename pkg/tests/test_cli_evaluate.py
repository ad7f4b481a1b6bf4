import json

import numpy as np
import pytest

from ashpix.arch import ArchitectureSpec
from ashpix.cli import main
from ashpix.models import build_generator, save_generator_checkpoint
from ashpix.train import METRIC_FIELDS
from ashpix.util import save_image


def run(*argv):
    return main(list(argv))


@pytest.fixture()
def eval_inputs(tmp_path, rng):
    """Metrics CSV, two checkpoints, sample pairs, and mask dirs."""
    arch = ArchitectureSpec.default(32)
    ckpt_dir = tmp_path / "checkpoints"
    for epoch, seed in ((10, 1), (20, 2)):
        gen = build_generator(arch.generator, init_seed=seed)
        save_generator_checkpoint(gen, arch, epoch, seed=0,
                                  weights_path=ckpt_dir /
                                  f"model_epoch_{epoch}.weights")

    lines = [",".join(METRIC_FIELDS)]
    for e in range(1, 11):
        val = e % 10 == 0
        lines.append(",".join([str(e)] + ["0.5"] * 7 +
                              (["0.4", "0.6"] if val else ["", ""])))
    (tmp_path / "metrics.csv").write_text("\n".join(lines) + "\n")

    samples = tmp_path / "samples"
    samples.mkdir()
    for i in range(4):
        save_image(samples / f"goes16_{i}.png",
                   rng.integers(0, 256, (32, 64, 3), dtype=np.uint8))

    pred, truth = tmp_path / "pred", tmp_path / "truth"
    pred.mkdir(), truth.mkdir()
    white = np.full((32, 32, 3), 255, dtype=np.uint8)
    black = np.zeros((32, 32, 3), dtype=np.uint8)
    # truth: a,b ashy; c,d clear. predictions: a correct, b missed,
    # c false alarm, d correct -> one count in every cell
    save_image(truth / "a.png", black)
    save_image(truth / "b.png", black)
    save_image(truth / "c.png", white)
    save_image(truth / "d.png", white)
    save_image(pred / "a.png", black)
    save_image(pred / "b.png", white)
    save_image(pred / "c.png", black)
    save_image(pred / "d.png", white)
    return tmp_path


def test_evaluate_plots(eval_inputs):
    out = eval_inputs / "eval"
    assert run("evaluate", "--out-dir", str(out),
               "--metrics-csv", str(eval_inputs / "metrics.csv")) == 0
    plots = list((out / "plots").glob("*.png"))
    assert any(p.name == "loss_g_loss_l1.png" for p in plots)
    assert any(p.name == "accuracy_d_acc_val_real.png" for p in plots)


def test_evaluate_compare_grids(eval_inputs):
    out = eval_inputs / "eval"
    assert run("evaluate", "--out-dir", str(out),
               "--checkpoints", str(eval_inputs / "checkpoints"),
               "--samples-dir", str(eval_inputs / "samples"),
               "--samples-count", "2") == 0
    assert (out / "compare" / "epoch_10.png").is_file()
    assert (out / "compare" / "epoch_20.png").is_file()
    assert (out / "compare" / "index.txt").is_file()


def test_evaluate_confusion_from_dirs(eval_inputs):
    out = eval_inputs / "eval"
    assert run("evaluate", "--out-dir", str(out),
               "--pred-dir", str(eval_inputs / "pred"),
               "--truth-dir", str(eval_inputs / "truth")) == 0
    doc = json.loads((out / "confusion.json").read_text())
    assert doc["counts"] == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    assert doc["metrics"]["accuracy"] == 0.5
    assert doc["thresholds"] == {"luminance": 128.0, "fraction": 0.005}


def test_evaluate_confusion_from_truth_json(eval_inputs):
    truth_doc = {"a.png": {"has_ash": True}, "b.png": {"has_ash": True},
                 "c.png": {"has_ash": False}, "d.png": {"has_ash": False}}
    truth_json = eval_inputs / "truth.json"
    truth_json.write_text(json.dumps(truth_doc))
    out = eval_inputs / "eval2"
    assert run("evaluate", "--out-dir", str(out),
               "--pred-dir", str(eval_inputs / "pred"),
               "--truth-json", str(truth_json), "--paper-compat") == 0
    doc = json.loads((out / "confusion.json").read_text())
    assert doc["counts"] == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    assert doc["paper_compat"] is True


def test_evaluate_undefined_specificity_rendering(eval_inputs, tmp_path):
    # all-ash truth: tn + fp = 0 -> specificity undefined (null), 0 in
    # paper-compat mode
    truth_doc = {f"{k}.png": {"has_ash": True} for k in "abcd"}
    truth_json = eval_inputs / "all_ash.json"
    truth_json.write_text(json.dumps(truth_doc))
    out = eval_inputs / "eval3"
    assert run("evaluate", "--out-dir", str(out),
               "--pred-dir", str(eval_inputs / "pred"),
               "--truth-json", str(truth_json)) == 0
    assert json.loads((out / "confusion.json").read_text())[
        "metrics"]["specificity"] is None
    out2 = eval_inputs / "eval4"
    assert run("evaluate", "--out-dir", str(out2),
               "--pred-dir", str(eval_inputs / "pred"),
               "--truth-json", str(truth_json), "--paper-compat") == 0
    assert json.loads((out2 / "confusion.json").read_text())[
        "metrics"]["specificity"] == 0.0


def test_evaluate_requires_some_work(tmp_path):
    assert run("evaluate", "--out-dir", str(tmp_path / "eval")) == 1


def test_evaluate_pred_dir_needs_truth(eval_inputs):
    assert run("evaluate", "--out-dir", str(eval_inputs / "eval"),
               "--pred-dir", str(eval_inputs / "pred")) == 1


def test_evaluate_custom_thresholds_change_outcome(eval_inputs):
    # with an extreme fraction threshold nothing counts as ash
    out = eval_inputs / "eval5"
    truth_json = eval_inputs / "truth_all.json"
    truth_json.write_text(json.dumps(
        {f"{k}.png": {"has_ash": True} for k in "abcd"}))
    assert run("evaluate", "--out-dir", str(out),
               "--pred-dir", str(eval_inputs / "pred"),
               "--truth-json", str(truth_json),
               "--threshold-fraction", "2.0") == 0
    doc = json.loads((out / "confusion.json").read_text())
    assert doc["counts"]["tp"] == 0 and doc["counts"]["fn"] == 4
