import csv

import numpy as np
import pytest

from fsaf.model import build_model
from fsaf.train import NumericalError, SGD, Trainer, compute_loss, gradient_check

from .conftest import tiny_config


@pytest.mark.parametrize("branches", ["af", "ab", "both"])
def test_gradient_check_passes(tiny_dataset, branches):
    params = build_model(tiny_config(branches=branches))
    images, boxes = tiny_dataset.batch(range(2), dtype=np.float64)
    report = gradient_check(params, images, boxes, samples=120)
    assert report.passed, (report.max_rel_error, report.worst_layer)


def test_gradient_check_names_corrupted_layer(tiny_dataset):
    params = build_model(tiny_config(branches="both"))
    images, boxes = tiny_dataset.batch(range(2), dtype=np.float64)
    report = gradient_check(params, images, boxes, samples=600, corrupt="reg_tower.w")
    assert not report.passed
    assert report.worst_layer == "reg_tower"


def test_gradient_check_without_instances(tiny_dataset):
    params = build_model(tiny_config(branches="both"))
    images, _ = tiny_dataset.batch(range(2), dtype=np.float64)
    report = gradient_check(params, images, [[], []], samples=80)
    assert report.passed
    _, grads, _ = compute_loss(params.astype(np.float64), images, [[], []])
    # no positives anywhere: the regression heads receive nothing
    assert not np.any(grads.get("af_reg.w", 0.0))
    assert not np.any(grads.get("ab_reg.w", 0.0))


def test_first_loss_finite_and_bounded(tiny_dataset):
    params = build_model(tiny_config(branches="both"))
    images, boxes = tiny_dataset.batch(range(4))
    report, _, levels = compute_loss(params, images, boxes)
    assert np.isfinite(report.total) and report.total < 100
    assert report.total == pytest.approx(report.ab + 0.5 * (report.af_cls + report.af_reg))
    assert [len(l) for l in levels] == [len(b) for b in boxes]


def test_zero_af_weight_freezes_af_heads(tiny_dataset):
    cfg = tiny_config(branches="both", af_weight=0.0)
    trainer = Trainer(cfg, tiny_dataset)
    before = {k: v.copy() for k, v in trainer.params.items()}
    for _ in range(3):
        trainer.train_step()
    for name in ("af_cls.w", "af_cls.b", "af_reg.w", "af_reg.b"):
        np.testing.assert_array_equal(trainer.params[name], before[name])
    assert not np.array_equal(trainer.params["ab_cls.w"], before["ab_cls.w"])


def test_small_step_reduces_loss(tiny_dataset):
    params = build_model(tiny_config(branches="both", dtype="float64"))
    images, boxes = tiny_dataset.batch(range(4), dtype=np.float64)
    report, grads, levels = compute_loss(params, images, boxes)
    SGD(params, momentum=0.0, weight_decay=0.0).step(grads, 1e-2)
    after, _, _ = compute_loss(params, images, boxes, assignments=levels)
    assert after.total < report.total


def test_sgd_matches_reference_update():
    cfg = tiny_config()
    params = build_model(cfg)
    w0 = params["stem.w"].astype(np.float64)
    g = np.full(w0.shape, 0.5)
    opt = SGD(params, momentum=0.9, weight_decay=1e-4)
    opt.step({"stem.w": g}, 0.1)
    d1 = g + 1e-4 * w0
    w1 = w0 - 0.1 * d1
    np.testing.assert_allclose(params["stem.w"], w1, rtol=1e-5)
    opt.step({"stem.w": g}, 0.1)
    d2 = 0.9 * d1 + g + 1e-4 * w1
    np.testing.assert_allclose(params["stem.w"], w1 - 0.1 * d2, rtol=1e-5)


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = tiny_config(branches="both", iterations=4, batch_size=2)
    runs = []
    for n in range(2):
        trainer = Trainer(cfg, tiny_dataset)
        trainer.train(log_path=tmp_path / f"log{n}.csv", log_every=0)
        runs.append(trainer.params)
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])
    assert (tmp_path / "log0.csv").read_text() == (tmp_path / "log1.csv").read_text()
    rows = list(csv.DictReader(open(tmp_path / "log0.csv")))
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"iteration", "lr", "loss_ab", "loss_af_cls", "loss_af_reg", "total"}


def test_non_finite_input_raises(tiny_dataset):
    params = build_model(tiny_config())
    images, boxes = tiny_dataset.batch(range(2))
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="iteration"):
        compute_loss(params, images, boxes)


def test_heuristic_selection_used(tiny_dataset):
    cfg = tiny_config(selection="heuristic")
    params = build_model(cfg)
    images, boxes = tiny_dataset.batch(range(3))
    _, _, levels = compute_loss(params, images, boxes)
    from fsaf.selection import heuristic_select
    expected = [[heuristic_select(b.w, b.h, 5, cfg.pyramid, cfg.canonical_size).level for b in bs]
                for bs in boxes]
    assert levels == expected
