"""One-shot prediction, K-shot fusion, and IoU metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .episodes import Dataset, Sample, sample_episode
from .errors import ProtocolError, ShapeError
from .network import Model, mask_from_probs
from .numerics import no_grad, softmax_array


def iou(a, b) -> float:
    """|A and B| / |A or B|; 1 when both masks are empty."""
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


class _CachedSegmenter:
    """Memoises support-side work of a :class:`Model` across many (support, query) pairs.

    Any other callable ``segmenter(support, query_image) -> logits`` is used as is.
    """

    def __init__(self, segmenter):
        self.segmenter = segmenter
        # values keep their key objects alive so ids stay unique
        self._states = {}
        self._features = {}

    def __call__(self, support: Sample, query_image) -> np.ndarray:
        model = self.segmenter
        if not isinstance(model, Model):
            return np.asarray(model(support, query_image), dtype=np.float64)
        if id(support) not in self._states:
            self._states[id(support)] = (support, model.support_state(support))
        if id(query_image) not in self._features:
            with no_grad():
                self._features[id(query_image)] = (query_image, model.encode(query_image))
        return model.query_logits(self._states[id(support)][1], query_image,
                                  features=self._features[id(query_image)][1])


def segment_one_shot(model, support: Sample, query_image):
    """Logits (H x W x 2, query resolution) and the argmax mask for one support."""
    logits = np.asarray(model(support, query_image), dtype=np.float64)
    return logits, mask_from_probs(softmax_array(logits))


def cgm_confidence(model, supports) -> np.ndarray:
    """Score each support by how well it segments every support, itself included.

    ``U[k]`` is the mean IoU of the masks predicted for supports 0..K-1 when
    support k guides the model.
    """
    if not supports:
        raise ValueError("need at least one support")
    seg = model if isinstance(model, _CachedSegmenter) else _CachedSegmenter(model)
    K = len(supports)
    scores = np.zeros(K)
    for k, guide in enumerate(supports):
        total = 0.0
        for target in supports:
            _, pred = segment_one_shot(seg, guide, target.image)
            total += iou(pred, target.mask)
        scores[k] = total / K
    return scores


def fuse_logits(logits, weights) -> np.ndarray:
    """(1/K) * sum_k weights[k] * logits[k]; all-zero weights fall back to uniform."""
    weights = np.asarray(weights, dtype=np.float64)
    K = len(logits)
    if weights.shape != (K,):
        raise ShapeError(f"need {K} weights, got {weights.shape}")
    if not np.any(weights):
        weights = np.ones(K)
    fused = np.zeros_like(np.asarray(logits[0], dtype=np.float64))
    for w, lg in zip(weights, logits):
        fused += w * np.asarray(lg, dtype=np.float64)
    return fused / K


def _support_logits(seg, supports, query_image):
    return [segment_one_shot(seg, s, query_image)[0] for s in supports]


def cgm_fuse(model, supports, query_image, confidences=None):
    """Confidence-weighted fusion of per-support logits, softmaxed once.

    Returns ``(probabilities, mask, confidences)``; pass ``confidences`` to
    override the computed scores.
    """
    seg = _CachedSegmenter(model)
    if confidences is None:
        confidences = cgm_confidence(seg, supports)
    fused = fuse_logits(_support_logits(seg, supports, query_image), confidences)
    probs = softmax_array(fused)
    return probs, mask_from_probs(probs), np.asarray(confidences, dtype=np.float64)


def average_fuse(model, supports, query_image):
    """Softmax of the unweighted mean of the per-support logits."""
    seg = _CachedSegmenter(model)
    fused = fuse_logits(_support_logits(seg, supports, query_image), np.ones(len(supports)))
    probs = softmax_array(fused)
    return probs, mask_from_probs(probs)


def model_predictor(model, fusion: str = "cgm"):
    """Wrap a model as ``predict(supports, query_image) -> mask`` for :func:`evaluate`."""
    if fusion not in ("cgm", "avg"):
        raise ValueError(f"fusion must be 'cgm' or 'avg', got {fusion!r}")

    def predict(supports, query_image):
        if fusion == "cgm":
            return cgm_fuse(model, supports, query_image)[1]
        return average_fuse(model, supports, query_image)[1]

    return predict


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalProtocol:
    side: str = "test"
    K: int = 1
    N: int = 1
    episodes: int = 200
    seeds: tuple = (0, 1, 2)


@dataclass
class MetricsReport:
    per_class_iou: dict
    mIoU: float
    FB_IoU: float
    num_episodes: int
    seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(c): self.per_class_iou[c] for c in sorted(self.per_class_iou)},
            "mIoU": self.mIoU,
            "FB_IoU": self.FB_IoU,
            "num_episodes": self.num_episodes,
            "seeds": list(self.seeds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls({int(c): float(v) for c, v in d["per_class_iou"].items()},
                   float(d["mIoU"]), float(d["FB_IoU"]), int(d["num_episodes"]),
                   [int(s) for s in d["seeds"]])


class IoUAccumulator:
    """Pixel counts pooled over predictions: per class foreground, and global fg/bg."""

    def __init__(self):
        self.inter = {}
        self.union = {}
        self.fb = np.zeros((2, 2), dtype=np.int64)  # rows: bg, fg; cols: intersection, union

    def add(self, class_id: int, pred, truth) -> None:
        p, t = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
        if p.shape != t.shape:
            raise ShapeError(f"prediction {p.shape} vs ground truth {t.shape}")
        i_fg, u_fg = int(np.count_nonzero(p & t)), int(np.count_nonzero(p | t))
        i_bg, u_bg = int(np.count_nonzero(~p & ~t)), int(np.count_nonzero(~p | ~t))
        self.inter[class_id] = self.inter.get(class_id, 0) + i_fg
        self.union[class_id] = self.union.get(class_id, 0) + u_fg
        self.fb += [[i_bg, u_bg], [i_fg, u_fg]]

    def per_class(self) -> dict:
        return {c: (self.inter[c] / self.union[c] if self.union[c] else 1.0)
                for c in sorted(self.inter)}

    def fb_iou(self) -> float:
        ratios = [i / u if u else 1.0 for i, u in self.fb]
        return (ratios[0] + ratios[1]) / 2.0


def evaluate(predictor, dataset: Dataset, protocol: EvalProtocol) -> MetricsReport:
    """Run ``protocol.episodes`` episodes per seed and average the per-seed metrics.

    ``predictor(supports, query_image)`` returns a binary mask at query
    resolution (see :func:`model_predictor`).
    """
    if not dataset.classes(protocol.side):
        raise ProtocolError(f"the {protocol.side} split is empty")
    if not protocol.seeds or protocol.episodes < 1:
        raise ProtocolError("need at least one seed and one episode")
    per_seed = []
    for seed in protocol.seeds:
        acc = IoUAccumulator()
        for i in range(protocol.episodes):
            ep = sample_episode(dataset, protocol.side, protocol.K, protocol.N, [seed, i])
            for q in ep.query:
                acc.add(ep.class_id, predictor(ep.support, q.image), q.mask)
        per_seed.append(acc)
    return summarise(per_seed, protocol.episodes * len(protocol.seeds), protocol.seeds)


def summarise(accumulators, num_episodes: int, seeds) -> MetricsReport:
    """Average per-class IoU and FB-IoU over seeds; mIoU is the mean of the averaged classes."""
    per_class = {}
    for acc in accumulators:
        for c, v in acc.per_class().items():
            per_class.setdefault(c, []).append(v)
    per_class_iou = {c: float(np.mean(v)) for c, v in sorted(per_class.items())}
    miou = float(np.mean(list(per_class_iou.values())))
    fb = float(np.mean([acc.fb_iou() for acc in accumulators]))
    return MetricsReport(per_class_iou, miou, fb, int(num_episodes), [int(s) for s in seeds])
