import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedseg.episodes import Dataset, Sample
from guidedseg.errors import ProtocolError, ShapeError
from guidedseg.inference import (EvalProtocol, IoUAccumulator, MetricsReport, average_fuse,
                                 cgm_confidence, cgm_fuse, evaluate, fuse_logits, iou,
                                 model_predictor, segment_one_shot)
from guidedseg.network import Model, ModelConfig, mask_from_probs
from guidedseg.numerics import softmax_array
from helpers import small_dataset


def test_iou_examples():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, :] = 1
    assert iou(a, a) == 1.0
    b = np.zeros_like(a)
    b[3, :] = 1
    assert iou(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, 2:] = 1
    c[1, :2] = 1
    assert iou(a, c) == pytest.approx(2 / 6)
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert iou(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ShapeError):
        iou(a, np.zeros((3, 4)))


class ConstantPredictor:
    """Predicts a fixed foreground mask per guiding support, whatever the target."""

    def __init__(self, masks_by_id):
        self.masks = masks_by_id

    def __call__(self, support, image):
        m = self.masks[support.sample_id]
        return np.stack([1.0 - m, m.astype(float)], axis=-1) * 4.0 - 2.0


def _toy_supports():
    r = np.random.default_rng(0)
    masks = [(r.random((6, 6)) < 0.5).astype(np.uint8) for _ in range(3)]
    for m in masks:
        m[0, 0] = 1
    supports = [Sample(np.zeros((6, 6, 3)), m, 0, f"s{k}") for k, m in enumerate(masks)]
    return supports, masks


def test_cgm_confidence_hand_computation():
    supports, masks = _toy_supports()
    predicted = [(np.arange(36).reshape(6, 6) % (k + 2) == 0).astype(np.uint8) for k in range(3)]
    model = ConstantPredictor({f"s{k}": predicted[k] for k in range(3)})
    U = cgm_confidence(model, supports)
    for k in range(3):
        expected = sum(iou(predicted[k], masks[i]) for i in range(3)) / 3
        assert U[k] == pytest.approx(expected, abs=1e-15)


def test_cgm_with_one_support_and_duplicates():
    supports, masks = _toy_supports()
    model = ConstantPredictor({s.sample_id: s.mask for s in supports})
    assert cgm_confidence(model, supports[:1])[0] == 1.0
    same = [supports[1]] * 3
    U = cgm_confidence(model, same)
    assert U[0] == U[1] == U[2]


def test_fuse_logits_weighted_and_fallback():
    a = np.zeros((2, 2, 2))
    a[..., 1] = 1.0
    b = np.zeros((2, 2, 2))
    b[..., 0] = 3.0
    fused = fuse_logits([a, b], [1.0, 0.0])
    assert mask_from_probs(softmax_array(fused)).all()
    np.testing.assert_allclose(fuse_logits([a, b], [0.0, 0.0]), (a + b) / 2)
    with pytest.raises(ShapeError):
        fuse_logits([a, b], [1.0])


@pytest.fixture(scope="module")
def model():
    return Model.initialise(ModelConfig(d=8), seed=4)


def test_k1_cgm_equals_one_shot(model):
    ds = small_dataset()
    for s in ds.samples_of(4)[:3]:
        q = ds.samples_of(4)[5]
        _, mask = segment_one_shot(model, s, q.image)
        _, fused, U = cgm_fuse(model, [s], q.image)
        np.testing.assert_array_equal(fused, mask)
        assert 0.0 <= U[0] <= 1.0


def test_segment_one_shot_composition(model):
    ds = small_dataset()
    s, q = ds.samples_of(5)[:2]
    logits, mask = segment_one_shot(model, s, q.image)
    np.testing.assert_array_equal(mask, mask_from_probs(softmax_array(logits)))
    again, _ = segment_one_shot(model, s, q.image)
    assert logits.tobytes() == again.tobytes()


def test_equal_confidences_match_average_and_scaling(model):
    ds = small_dataset()
    supports, q = ds.samples_of(4)[:4], ds.samples_of(4)[6]
    _, avg_mask = average_fuse(model, supports, q.image)
    for value in (0.1, 0.5, 1.0):
        _, mask, _ = cgm_fuse(model, supports, q.image, confidences=np.full(4, value))
        np.testing.assert_array_equal(mask, avg_mask)


def test_permuting_supports_permutes_confidences(model):
    ds = small_dataset()
    supports, q = ds.samples_of(5)[:3], ds.samples_of(5)[7]
    _, mask, U = cgm_fuse(model, supports, q.image)
    order = [2, 0, 1]
    _, mask_p, U_p = cgm_fuse(model, [supports[i] for i in order], q.image)
    np.testing.assert_array_equal(U_p, U[order])
    np.testing.assert_array_equal(mask_p, mask)


def brute_force_metrics(records):
    """records: list of (class_id, pred, truth) for one seed."""
    classes = sorted({c for c, _, _ in records})
    per_class = {}
    for c in classes:
        inter = union = 0
        for cc, p, t in records:
            if cc != c:
                continue
            for a, b in zip(p.ravel(), t.ravel()):
                inter += int(a == 1 and b == 1)
                union += int(a == 1 or b == 1)
        per_class[c] = inter / union if union else 1.0
    fg_i = fg_u = bg_i = bg_u = 0
    for _, p, t in records:
        for a, b in zip(p.ravel(), t.ravel()):
            fg_i += int(a == 1 and b == 1)
            fg_u += int(a == 1 or b == 1)
            bg_i += int(a == 0 and b == 0)
            bg_u += int(a == 0 or b == 0)
    fb = ((bg_i / bg_u if bg_u else 1.0) + (fg_i / fg_u if fg_u else 1.0)) / 2
    return per_class, fb


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_accumulator_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    records = [(int(r.integers(0, 3)), (r.random((5, 4)) < r.random()).astype(np.uint8),
                (r.random((5, 4)) < r.random()).astype(np.uint8)) for _ in range(6)]
    acc = IoUAccumulator()
    for c, p, t in records:
        acc.add(c, p, t)
    per_class, fb = brute_force_metrics(records)
    assert acc.per_class().keys() == per_class.keys()
    for c in per_class:
        assert abs(acc.per_class()[c] - per_class[c]) <= 1e-12
    assert abs(acc.fb_iou() - fb) <= 1e-12


def _oracle_dataset():
    r = np.random.default_rng(0)
    samples = []
    for c in (0, 1, 2):
        for i in range(3):
            m = (r.random((4, 4)) < 0.5).astype(np.uint8)
            m[1, 1] = 1
            samples.append(Sample(r.random((4, 4, 3)), m, c, f"{c}_{i}"))
    return Dataset(samples, (0,), (1, 2))


def test_perfect_and_background_predictors():
    ds = _oracle_dataset()
    truth = {id(s.image): s.mask for s in ds.samples}
    protocol = EvalProtocol(episodes=5, seeds=(0, 1))
    perfect = evaluate(lambda sup, img: truth[id(img)], ds, protocol)
    assert perfect.mIoU == 1.0 and perfect.FB_IoU == 1.0
    assert perfect.num_episodes == 10
    blank = evaluate(lambda sup, img: np.zeros((4, 4), dtype=np.uint8), ds, protocol)
    assert blank.mIoU == 0.0
    fg = sum(int(s.mask.sum()) for s in ds.samples) > 0
    assert fg and 0.0 < blank.FB_IoU <= 0.5


def test_evaluate_matches_pixel_count_oracle():
    from guidedseg.episodes import sample_episode
    ds = _oracle_dataset()
    r = np.random.default_rng(9)
    guesses = {id(s.image): (r.random((4, 4)) < 0.5).astype(np.uint8) for s in ds.samples}
    protocol = EvalProtocol(episodes=2, seeds=(3,))
    report = evaluate(lambda sup, img: guesses[id(img)], ds, protocol)
    records = []
    for i in range(2):
        ep = sample_episode(ds, "test", 1, 1, [3, i])
        records.append((ep.class_id, guesses[id(ep.query[0].image)], ep.query[0].mask))
    per_class, fb = brute_force_metrics(records)
    assert report.per_class_iou == pytest.approx(per_class, abs=1e-12)
    assert report.mIoU == pytest.approx(np.mean(list(per_class.values())), abs=1e-12)
    assert report.FB_IoU == pytest.approx(fb, abs=1e-12)


def test_evaluate_errors_and_json_round_trip():
    ds = _oracle_dataset()
    with pytest.raises(ProtocolError):
        evaluate(lambda s, i: None, Dataset(ds.samples[:3], (0,), ()), EvalProtocol())
    report = MetricsReport({2: 0.25, 1: 0.5}, 0.375, 0.6, 4, [0, 1])
    text = report.to_json()
    assert list(json.loads(text)) == ["per_class_iou", "mIoU", "FB_IoU", "num_episodes", "seeds"]
    assert MetricsReport.from_dict(json.loads(text)) == report


def test_model_predictor_rejects_unknown_fusion(model):
    with pytest.raises(ValueError):
        model_predictor(model, "max")
