"""Support vectors: masked average pooling and the primary/auxiliary split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError
from .numerics import Tensor, concat_channels, expand_spatial, masked_mean


@dataclass
class SupportVectors:
    v_s: Tensor
    v_pri: Tensor
    v_aux: Tensor
    n_fg: int
    n_pri: int
    n_aux: int
    pri_mask: np.ndarray
    aux_mask: np.ndarray

    def select(self, names) -> list:
        """Vectors by name ('s', 'pri', 'aux'), in the given order."""
        table = {"s": self.v_s, "pri": self.v_pri, "aux": self.v_aux}
        return [table[n] for n in names]


def initial_vector(features: Tensor, mask) -> Tensor:
    """Masked average of the support features over the ground-truth foreground."""
    return masked_mean(features, mask)


def decompose(features: Tensor, mask, predicted, v_s: Tensor | None = None) -> SupportVectors:
    """Split the foreground into pixels the initial prediction caught and pixels it missed.

    ``mask`` and ``predicted`` are binary h x w arrays and act as constants.
    When nothing was missed the auxiliary vector repeats the primary one; when
    nothing was caught the primary vector falls back to ``v_s``.
    """
    fg = np.asarray(mask).astype(bool)
    if not fg.any():
        raise EmptyMaskError("support mask has no foreground pixel")
    hit = np.asarray(predicted) == 1
    pri_mask = fg & hit
    aux_mask = fg & ~hit
    n_fg, n_pri, n_aux = int(fg.sum()), int(pri_mask.sum()), int(aux_mask.sum())
    if v_s is None:
        v_s = masked_mean(features, fg)
    v_pri = masked_mean(features, pri_mask) if n_pri else v_s
    v_aux = masked_mean(features, aux_mask) if n_aux else v_pri
    return SupportVectors(v_s, v_pri, v_aux, n_fg, n_pri, n_aux, pri_mask, aux_mask)


def expand_concat(features: Tensor, vectors) -> Tensor:
    """Append each vector, copied to every spatial position, after the feature channels."""
    if not vectors:
        return features
    h, w = features.shape[:2]
    return concat_channels([features] + [expand_spatial(v, h, w) for v in vectors])
