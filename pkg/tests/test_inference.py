import numpy as np
import pytest

from fsaf.config import TrainConfig
from fsaf.geometry import decode_box
from fsaf.inference import (Detection, DetectOptions, decode_level, detect, load_detections, nms,
                            save_detections)
from fsaf.model import build_model

from .oracles import brute_force_nms


def test_all_below_threshold_is_empty():
    assert decode_level(np.full((2, 4, 4), 0.04), np.ones((4, 4, 4)), 3) == []


def test_top_k_keeps_highest():
    prob = np.zeros((1, 4, 4))
    prob[0, 0, 0], prob[0, 1, 1], prob[0, 2, 2] = 0.3, 0.9, 0.6
    dets = decode_level(prob, np.ones((4, 4, 4)), 3, top_k=2)
    assert [d.score for d in dets] == [0.9, 0.6]


def test_single_hot_location_decodes_by_hand():
    prob = np.zeros((3, 8, 8))
    prob[2, 5, 3] = 0.8
    offsets = np.zeros((4, 8, 8))
    offsets[:, 5, 3] = [0.75, 1.0, 0.75, 1.0]
    (d,) = decode_level(prob, offsets, 4, S=4.0)
    assert d.class_id == 2 and d.score == 0.8
    # rows 5 -/+ 3, cols 3 -/+ 4 on the level-4 grid, times 16
    assert d.box == pytest.approx((32, -16, 128, 112))
    assert d.box == pytest.approx(tuple(decode_box(5, 3, offsets[:, 5, 3], 4.0, 4)))


def test_degenerate_boxes_dropped():
    prob = np.full((1, 2, 2), 0.9)
    assert decode_level(prob, np.zeros((4, 2, 2)), 3) == []


def _det(box, score, cls=0, key=()):
    return Detection(cls, score, tuple(float(v) for v in box), key)


def test_nms_examples():
    # two 10x10 boxes offset by 2.5 px: IoU 75/125 = 0.6
    a, b = (0, 0, 10, 10), (0, 2.5, 10, 12.5)
    assert [d.score for d in nms([_det(b, 0.8), _det(a, 0.9)], 0.5)] == [0.9]
    # offset by 5.3846 px: IoU 0.3
    c = (0, 10 - 10 * 0.7 / 1.3, 10, 20 - 10 * 0.7 / 1.3)
    assert len(nms([_det(a, 0.9), _det(c, 0.8)], 0.5)) == 2
    assert len(nms([_det(a, 0.9, 0), _det(a, 0.8, 1)], 0.5)) == 2
    assert nms([], 0.5) == []


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_nms_matches_brute_force(backend, monkeypatch):
    from fsaf import inference, kernels
    impl = kernels.available_backends()
    if backend not in impl:
        pytest.skip("compiled kernels not built")
    monkeypatch.setattr(inference.kernels, "nms_sorted", impl[backend].nms_sorted)
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(0, 60))
        tl = rng.uniform(0, 50, (n, 2))
        wh = rng.uniform(1, 30, (n, 2))
        boxes = np.concatenate([tl, tl + wh], 1)
        # coarse scores produce ties, resolved by input order
        scores = np.round(rng.uniform(0, 1, n), 1)
        classes = rng.integers(0, 3, n)
        dets = [_det(boxes[m], scores[m], int(classes[m]), (m,)) for m in range(n)]
        kept = nms(dets, 0.5)
        assert [d.key[0] for d in kept] == brute_force_nms(boxes, scores, classes, 0.5)


def test_detect_on_fresh_model_is_quiet(rng):
    params = build_model(TrainConfig(branches="both", image_size=64))
    image = rng.normal(size=(3, 64, 64)).astype(np.float32)
    # every score starts near 0.01, below the 0.05 threshold
    assert detect(params, image) == []
    dets = detect(params, image, DetectOptions(score_thresh=0.0, top_k=5, max_detections=7))
    assert len(dets) <= 7
    assert all(d1.score >= d2.score for d1, d2 in zip(dets, dets[1:]))
    with pytest.raises(ValueError):
        detect(params, image[None])


def test_clip_option(rng):
    params = build_model(TrainConfig(image_size=64))
    image = rng.normal(size=(3, 64, 64)).astype(np.float32)
    dets = detect(params, image, DetectOptions(score_thresh=0.0, top_k=20, clip=True))
    assert dets
    for d in dets:
        t, l, b, r = d.box
        assert 0 <= t < b <= 64 and 0 <= l < r <= 64


def test_detection_json_round_trip(tmp_path):
    dets = {0: [_det((1, 2, 3, 4), 0.5, 1)], 3: [_det((0, 0, 5, 5), 0.25, 0), _det((1, 1, 2, 2), 0.1, 2)]}
    save_detections(tmp_path / "d.json", dets)
    back = load_detections(tmp_path / "d.json")
    assert back == dets
