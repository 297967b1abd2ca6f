"""Losses and the episodic training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .episodes import Dataset, Episode, downsample_mask, sample_episode
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .network import Model, ModelConfig, mask_from_probs
from .prototypes import decompose

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class Variant:
    """Which support vectors feed the query path and which support losses are on."""

    name: str
    query_vectors: tuple
    support_loss: bool
    refine_loss: bool

    @property
    def needs_split(self) -> bool:
        return self.refine_loss or any(v in ("pri", "aux") for v in self.query_vectors)


VARIANTS = {
    "baseline": Variant("baseline", ("s", "s"), False, False),
    "sgm": Variant("sgm", ("pri", "aux"), True, True),
}

VECTOR_GRID = (
    Variant("v_s", ("s",), True, False),
    Variant("v_pri", ("pri",), True, True),
    Variant("v_aux", ("aux",), True, True),
    Variant("v_pri+v_aux", ("pri", "aux"), True, True),
    Variant("v_s+v_pri+v_aux", ("s", "pri", "aux"), True, True),
)

LOSS_GRID = (
    Variant("L_s1", ("pri", "aux"), True, False),
    Variant("L_s2", ("pri", "aux"), False, True),
    Variant("L_s1+L_s2", ("pri", "aux"), True, True),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    episodes_per_epoch: int = 200
    K: int = 1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    d: int = 64
    variant: Variant = field(default_factory=lambda: VARIANTS["sgm"])

    def __post_init__(self):
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs and episodes_per_epoch must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.K != 1:
            raise ConfigError("training uses one-shot episodes (K = 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, query_vectors=self.variant.query_vectors)


def ce_loss(probs: nx.Tensor, mask) -> nx.Tensor:
    """Mean per-pixel cross-entropy of a two-channel probability map against a binary mask."""
    m = np.asarray(mask)
    if probs.ndim != 3 or probs.shape[2] != 2 or probs.shape[:2] != m.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match mask {m.shape}")
    fg = (m == 1).astype(np.float64)
    onehot = np.stack([1.0 - fg, fg], axis=-1)
    picked = nx.mul(nx.log(nx.clamp_min(probs, LOG_FLOOR)), onehot)
    return nx.neg(nx.sum(picked)) / (m.shape[0] * m.shape[1])


@dataclass
class LossBreakdown:
    total: nx.Tensor
    support_initial: float
    support_refined: float
    query: float


def episode_loss(model: Model, episode: Episode, variant: Variant | None = None) -> LossBreakdown:
    """Total loss of one 1-shot, 1-query episode; disabled terms count as 0."""
    variant = variant or VARIANTS["sgm"]
    support, query = episode.support[0], episode.query[0]
    f_s = model.encode(support.image)
    f_q = model.encode(query.image)
    h, w = f_s.shape[:2]
    m_s = downsample_mask(support.mask, h, w)
    m_q = downsample_mask(query.mask, *f_q.shape[:2])

    v_s = nx.masked_mean(f_s, m_s)
    terms = []
    l_s1 = l_s2 = 0.0
    vectors = {"s": v_s}
    if variant.support_loss or variant.needs_split:
        p_s1 = model.predict_support_initial(f_s, v_s)
        if variant.support_loss:
            loss = ce_loss(p_s1, m_s)
            terms.append(loss)
            l_s1 = loss.item()
        if variant.needs_split:
            sv = decompose(f_s, m_s, mask_from_probs(p_s1), v_s=v_s)
            vectors.update(pri=sv.v_pri, aux=sv.v_aux)
            if variant.refine_loss:
                loss = ce_loss(model.predict_support_refined(f_s, sv.v_pri, sv.v_aux), m_s)
                terms.append(loss)
                l_s2 = loss.item()
    _, p_q = model.predict_query(f_q, [vectors[n] for n in variant.query_vectors])
    l_q = ce_loss(p_q, m_q)
    terms.append(l_q)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(total, l_s1, l_s2, l_q.item())


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, learning_rate: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def episode_seed(seed: int, epoch: int, index: int) -> list:
    return [seed, epoch, index]


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_support_initial: float
    mean_support_refined: float
    mean_query: float

    def line(self) -> str:
        return (f"{self.epoch}, {self.mean_loss!r}, {self.mean_support_initial!r}, "
                f"{self.mean_support_refined!r}, {self.mean_query!r}")


def train(dataset: Dataset, config: TrainConfig, log_path=None, progress=None):
    """Train a fresh model; returns ``(model, [EpochRecord, ...])``.

    One optimiser step per episode.  Every random draw comes from ``config.seed``.
    """
    model = Model.initialise(config.model_config(), seed=config.seed)
    opt = SGD(model.params, config.learning_rate, config.momentum, config.weight_decay)
    records = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            sums = np.zeros(4)
            for i in range(config.episodes_per_epoch):
                seed = episode_seed(config.seed, epoch, i)
                episode = sample_episode(dataset, "train", 1, 1, seed)
                opt.zero_grad()
                out = episode_loss(model, episode, config.variant)
                value = out.total.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(seed, value)
                out.total.backward()
                opt.step()
                sums += (value, out.support_initial, out.support_refined, out.query)
            means = sums / config.episodes_per_epoch
            record = EpochRecord(epoch, *(float(m) for m in means))
            records.append(record)
            logger.info("epoch %d loss %.4f", epoch, record.mean_loss)
            if log_file is not None:
                log_file.write(record.line() + "\n")
                log_file.flush()
            if progress is not None:
                progress(record)
    finally:
        if log_file is not None:
            log_file.close()
    return model, records


def with_variant(config: TrainConfig, variant: Variant) -> TrainConfig:
    return replace(config, variant=variant)
