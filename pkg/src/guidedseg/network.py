"""Encoder, feature processing modules, decoder, and checkpoint files.

Layer widths for feature size ``d``::

    encoder   3x3 conv 3->d/2, relu, 3x3/2 conv d/2->d/2, relu,
              3x3 conv d/2->d, relu, 3x3/2 conv d->d, relu
    support   conv (d + 2d)->d, relu, conv d->d, relu        (shared by both support paths)
    query     conv (d + n*d)->d, relu, conv d->d, relu       (n = number of query vectors)
    decoder   conv d->d, relu, conv d->d, relu, 1x1 conv d->2 (shared by all three paths)

All convolutions use zero padding that preserves size; ``head_kernel`` sets
the FPM/decoder kernel (3 normally, 1 for purely pointwise heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .numerics import (Tensor, add, bilinear_resize, channel_softmax, conv2d,
                       conv2d_expand_concat, gate, no_grad, relu)
from .prototypes import decompose, expand_concat, initial_vector
from .episodes import downsample_mask

VECTOR_NAMES = ("s", "pri", "aux")
MIN_IMAGE_SIZE = 32
INIT_GAIN = 6.0


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    query_vectors: tuple = ("pri", "aux")
    head_kernel: int = 3

    def __post_init__(self):
        if not self.query_vectors or any(v not in VECTOR_NAMES for v in self.query_vectors):
            raise ValueError(f"query_vectors must be drawn from {VECTOR_NAMES}")
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be an even integer >= 2")
        if self.head_kernel not in (1, 3):
            raise ValueError("head_kernel must be 1 or 3")

    @property
    def uses_sgm(self) -> bool:
        return any(v in ("pri", "aux") for v in self.query_vectors)


def layer_table(config: ModelConfig):
    """(name, kernel, c_in, c_out, stride) for every conv, in initialisation order."""
    d, k = config.d, config.head_kernel
    half = d // 2
    return [
        ("enc1", 3, 3, half, 1),
        ("enc2", 3, half, half, 2),
        ("enc3", 3, half, d, 1),
        ("enc4", 3, d, d, 2),
        ("sfpm1", k, 3 * d, d, 1),
        ("sfpm2", k, d, d, 1),
        ("qfpm1", k, d + len(config.query_vectors) * d, d, 1),
        ("qfpm2", k, d, d, 1),
        ("dec1", k, d, d, 1),
        ("dec2", k, d, d, 1),
        ("dec3", 1, d, 2, 1),
    ]


def init_params(config: ModelConfig, seed: int, gain: float = INIT_GAIN) -> dict:
    """Weights uniform in +-sqrt(gain/fan_in), biases zero.

    ``gain`` 6 keeps the activation scale roughly constant through the relu
    stack; with 1 the signal shrinks ~2.4x per layer and training stalls.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, k, c_in, c_out, _ in layer_table(config):
        bound = math.sqrt(gain / (k * k * c_in))
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(k, k, c_in, c_out)),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
    return params


def mask_from_probs(probs) -> np.ndarray:
    """Per-pixel argmax over (background, foreground); exact ties go to background."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return gate(p[..., 1] > p[..., 0]).astype(np.uint8)


class Model:
    """Trainable parameters plus the forward paths that use them.

    Calling a model as ``model(support_sample, query_image)`` runs one-shot
    inference and returns foreground/background logits at query resolution.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._layers = {name: (k, stride) for name, k, _, _, stride in layer_table(config)}
        expected = {f"{n}.{s}" for n in self._layers for s in ("w", "b")}
        if set(params) != expected:
            raise ValueError(f"parameter names {sorted(set(params) ^ expected)} do not match")

    @classmethod
    def initialise(cls, config: ModelConfig | None = None, seed: int = 0) -> "Model":
        config = config or ModelConfig()
        return cls(config, init_params(config, seed))

    def _conv(self, name: str, x: Tensor, activate: bool = True) -> Tensor:
        k, stride = self._layers[name]
        y = add(conv2d(x, self.params[f"{name}.w"], stride=stride, padding=k // 2),
                self.params[f"{name}.b"])
        return relu(y) if activate else y

    def _check_channels(self, name: str, x: Tensor) -> None:
        c_in = self.params[f"{name}.w"].shape[2]
        if x.ndim != 3 or x.shape[2] != c_in:
            raise ShapeError(f"{name} expects {c_in} channels, got shape {x.shape}")

    def encode(self, image) -> Tensor:
        """Backbone features at 1/4 resolution; pixels in [0, 1] are shifted to [-0.5, 0.5]."""
        pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or min(pixels.shape[:2]) < MIN_IMAGE_SIZE:
            raise ShapeError(f"encoder needs an HxWx3 image with H, W >= {MIN_IMAGE_SIZE}, "
                             f"got {pixels.shape}")
        x = Tensor(pixels - 0.5)
        for name in ("enc1", "enc2", "enc3", "enc4"):
            x = self._conv(name, x)
        return x

    def support_fpm(self, x: Tensor) -> Tensor:
        self._check_channels("sfpm1", x)
        return self._conv("sfpm2", self._conv("sfpm1", x))

    def query_fpm(self, x: Tensor) -> Tensor:
        self._check_channels("qfpm1", x)
        return self._conv("qfpm2", self._conv("qfpm1", x))

    def decode(self, x: Tensor) -> Tensor:
        """Two conv+relu layers then a 1x1 conv to (background, foreground) logits."""
        self._check_channels("dec1", x)
        return self._conv("dec3", self._conv("dec2", self._conv("dec1", x)), activate=False)

    def _fpm_on_vectors(self, prefix: str, features: Tensor, vectors) -> Tensor:
        """``<prefix>_fpm(expand_concat(features, vectors))`` without materialising the copies."""
        name = f"{prefix}fpm1"
        k, stride = self._layers[name]
        try:
            y = conv2d_expand_concat(features, vectors, self.params[f"{name}.w"],
                                     stride=stride, padding=k // 2)
        except ShapeError:
            self._check_channels(name, expand_concat(features, vectors))
            raise
        return self._conv(f"{prefix}fpm2", relu(add(y, self.params[f"{name}.b"])))

    def predict_support_initial(self, f_s: Tensor, v_s: Tensor) -> Tensor:
        return channel_softmax(self.decode(self._fpm_on_vectors("s", f_s, [v_s, v_s])))

    def predict_support_refined(self, f_s: Tensor, v_pri: Tensor, v_aux: Tensor) -> Tensor:
        return channel_softmax(self.decode(self._fpm_on_vectors("s", f_s, [v_pri, v_aux])))

    def predict_query(self, f_q: Tensor, vectors) -> tuple:
        """Logits and probabilities for the query given the configured support vectors."""
        logits = self.decode(self._fpm_on_vectors("q", f_q, list(vectors)))
        return logits, channel_softmax(logits)

    def support_vectors(self, f_s: Tensor, mask_small: np.ndarray):
        """Initial vector, and when the query path needs them the primary/auxiliary split.

        Returns ``(v_s, probs_s1, SupportVectors | None)``.
        """
        v_s = initial_vector(f_s, mask_small)
        if not self.config.uses_sgm:
            return v_s, None, None
        p_s1 = self.predict_support_initial(f_s, v_s)
        return v_s, p_s1, decompose(f_s, mask_small, mask_from_probs(p_s1), v_s=v_s)

    def query_inputs(self, v_s: Tensor, sv) -> list:
        if sv is None:
            return [v_s for _ in self.config.query_vectors]
        return sv.select(self.config.query_vectors)

    def support_state(self, support) -> list:
        """The vectors a support sample contributes to the query path (no graph)."""
        with no_grad():
            f_s = self.encode(support.image)
            v_s, _, sv = self.support_vectors(f_s, downsample_mask(support.mask, *f_s.shape[:2]))
            return self.query_inputs(v_s, sv)

    def query_logits(self, vectors, query_image, features: Tensor | None = None) -> np.ndarray:
        """Query logits upsampled to the query image size."""
        with no_grad():
            f_q = self.encode(query_image) if features is None else features
            logits, _ = self.predict_query(f_q, vectors)
            h, w = np.asarray(query_image).shape[:2]
            return bilinear_resize(logits, h, w).data

    def __call__(self, support, query_image) -> np.ndarray:
        return self.query_logits(self.support_state(support), query_image)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# --------------------------------------------------------------------------
# checkpoint files
#
#   GUIDEDSEG-CHECKPOINT 1
#   meta d 64
#   meta query_vectors pri,aux
#   meta head_kernel 3
#   param <name> <dim0>x<dim1>x... <byte offset> <byte length>
#   ...
#   end
#   <payload: float64 little-endian, row-major, offsets relative to the byte after "end\n">

MAGIC = "GUIDEDSEG-CHECKPOINT 1"


def save_checkpoint(model: Model, path) -> None:
    lines = [MAGIC,
             f"meta d {model.config.d}",
             f"meta query_vectors {','.join(model.config.query_vectors)}",
             f"meta head_kernel {model.config.head_kernel}"]
    chunks, offset = [], 0
    for name in sorted(model.params):
        raw = np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes()
        dims = "x".join(str(n) for n in model.params[name].shape)
        lines.append(f"param {name} {dims} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append("end")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks))


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    marker = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or marker < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload = data[marker + 5:]
    meta, entries = {}, []
    for line in data[:marker].decode("ascii").splitlines()[1:]:
        fields = line.split()
        if fields[0] == "meta" and len(fields) == 3:
            meta[fields[1]] = fields[2]
        elif fields[0] == "param" and len(fields) == 5:
            entries.append((fields[1], tuple(int(n) for n in fields[2].split("x")),
                            int(fields[3]), int(fields[4])))
        else:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    try:
        config = ModelConfig(d=int(meta["d"]),
                             query_vectors=tuple(meta["query_vectors"].split(",")),
                             head_kernel=int(meta["head_kernel"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    params = {}
    for name, shape, offset, length in entries:
        if length != 8 * math.prod(shape) or offset + length > len(payload):
            raise CheckpointError(f"{path}: entry {name} is out of bounds")
        values = np.frombuffer(payload[offset:offset + length], dtype="<f8")
        params[name] = Tensor(values.reshape(shape), requires_grad=True)
    try:
        return Model(config, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
