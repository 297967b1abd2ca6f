"""Synthetic shape datasets, dataset directories, and episode sampling."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .errors import (ConfigError, EmptyMaskError, EmptyMaskFileError, EpisodeSamplingError,
                     IngestionError, MalformedHeaderError, SizeMismatchError, SplitOverlapError)
from .numerics import resize_array

SIDES = ("train", "test")


@dataclass
class Sample:
    image: np.ndarray          # H x W x 3 float64 in [0, 1]
    mask: np.ndarray           # H x W uint8 in {0, 1}
    class_id: int
    sample_id: str = ""
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class Dataset:
    samples: list
    train_classes: tuple
    test_classes: tuple

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise ConfigError(f"classes {sorted(overlap)} are on both sides of the split")
        known = set(self.train_classes) | set(self.test_classes)
        self._by_class = {}
        for s in self.samples:
            if s.class_id not in known:
                raise ConfigError(f"sample {s.sample_id} has class {s.class_id} outside the split")
            self._by_class.setdefault(s.class_id, []).append(s)

    def classes(self, side: str) -> tuple:
        if side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {side!r}")
        return tuple(self.train_classes if side == "train" else self.test_classes)

    def samples_of(self, class_id: int) -> list:
        return self._by_class.get(class_id, [])


@dataclass
class Episode:
    class_id: int
    support: list
    query: list


# --------------------------------------------------------------------------
# shape families: predicates over centre-relative pixel coordinates


def _disc(dx, dy, s):
    return dx * dx + dy * dy <= s * s


def _square(dx, dy, s):
    return (np.abs(dx) <= s) & (np.abs(dy) <= s)


def _triangle(dx, dy, s):
    # apex at (0, -s), base on y = +s spanning x in [-s, s]
    return (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)


def _ring(dx, dy, s):
    r2 = dx * dx + dy * dy
    return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)


def _cross(dx, dy, s):
    t = s / 3.0
    ax, ay = np.abs(dx), np.abs(dy)
    return ((ax <= t) & (ay <= s)) | ((ay <= t) & (ax <= s))


def _ellipse(dx, dy, s):
    return (dx / s) ** 2 + (dy / (0.55 * s)) ** 2 <= 1.0


def _diamond(dx, dy, s):
    return np.abs(dx) + np.abs(dy) <= s


def _frame(dx, dy, s):
    m = np.maximum(np.abs(dx), np.abs(dy))
    return (m <= s) & (m >= 0.55 * s)


SHAPE_FAMILIES: dict = {
    "disc": _disc,
    "square": _square,
    "triangle": _triangle,
    "ring": _ring,
    "cross": _cross,
    "ellipse": _ellipse,
    "diamond": _diamond,
    "frame": _frame,
}
FAMILY_NAMES = tuple(SHAPE_FAMILIES)


def shape_mask(family: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Rasterise a shape on a size x size grid, sampling at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size]
    return SHAPE_FAMILIES[family](xs + 0.5 - cx, ys + 0.5 - cy, radius)


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _class_colours(class_id: int, rng: np.random.Generator):
    """Body and rim colours jittered around hues fixed per class."""
    base = class_id / len(FAMILY_NAMES)
    body = _hsv(base + rng.uniform(-0.03, 0.03), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
    rim = _hsv(base + 0.3 + rng.uniform(-0.03, 0.03), rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.6))
    return body, rim


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.6, size=(4, 4, 1)) + rng.uniform(-0.08, 0.08, size=(4, 4, 3))
    smooth = resize_array(coarse, size, size)
    return np.clip(smooth + rng.normal(0.0, 0.04, size=(size, size, 3)), 0.0, 1.0)


def _paint_shape(image, class_id, size, rng):
    """Draw one two-tone shape of ``class_id``; returns its mask and generator parameters."""
    family = FAMILY_NAMES[class_id]
    radius = rng.uniform(0.12, 0.28) * size
    cx = rng.uniform(radius + 1, size - radius - 1)
    cy = rng.uniform(radius + 1, size - radius - 1)
    mask = shape_mask(family, size, cx, cy, radius)
    inner = shape_mask(family, size, cx, cy, radius * 0.6)
    body, rim = _class_colours(class_id, rng)
    image[mask & ~inner] = rim
    image[inner] = body
    return mask, {"family": family, "cx": cx, "cy": cy, "radius": radius}


def _generate_sample(class_id, side_classes, size, rng):
    while True:
        image = _background(size, rng)
        others = [c for c in side_classes if c != class_id]
        n_distractors = int(rng.integers(0, 3)) if others else 0
        for _ in range(n_distractors):
            _paint_shape(image, int(rng.choice(others)), size, rng)
        mask, params = _paint_shape(image, class_id, size, rng)
        frac = mask.mean()
        if 0.01 < frac < 0.9:
            params["distractors"] = n_distractors
            return image, mask.astype(np.uint8), params


def generate_synthetic_dataset(classes: int = 6, samples_per_class: int = 40,
                               image_size: int = 64, seed: int = 0,
                               test_classes: int | None = None) -> Dataset:
    """Build a dataset of parametric shapes with exact masks.

    Class ``c`` is shape family ``FAMILY_NAMES[c]``; the last ``test_classes``
    ids (default ``classes // 3``) form the test split.  Distractors are drawn
    from the same side of the split as the target so test shapes never appear
    in training images.
    """
    if classes < 4 or samples_per_class < 8 or image_size < 32:
        raise ConfigError("need classes >= 4, samples_per_class >= 8, image_size >= 32")
    if classes > len(FAMILY_NAMES):
        raise ConfigError(f"only {len(FAMILY_NAMES)} shape families are available, "
                          f"asked for {classes} classes")
    n_test = classes // 3 if test_classes is None else int(test_classes)
    if not 1 <= n_test < classes:
        raise ConfigError(f"test_classes must be in [1, {classes - 1}]")
    train_ids = tuple(range(classes - n_test))
    test_ids = tuple(range(classes - n_test, classes))
    samples = []
    for c in range(classes):
        side_classes = train_ids if c in train_ids else test_ids
        for i in range(samples_per_class):
            rng = np.random.default_rng([seed, c, i])
            image, mask, params = _generate_sample(c, side_classes, image_size, rng)
            # 8-bit levels, so a written-then-loaded dataset is bitwise identical
            image = np.round(image * 255.0) / 255.0
            samples.append(Sample(image, mask, c, f"c{c}_{i:04d}", params))
    return Dataset(samples, train_ids, test_ids)


# --------------------------------------------------------------------------
# sampling


def sample_episode(dataset: Dataset, side: str, K: int, N: int, rng_seed) -> Episode:
    """Draw a class uniformly from ``side`` then K + N distinct samples of it."""
    if K < 1 or N < 1:
        raise EpisodeSamplingError("K and N must be >= 1")
    eligible = [c for c in dataset.classes(side) if len(dataset.samples_of(c)) >= K + N]
    if not eligible:
        raise EpisodeSamplingError(f"no {side} class has {K + N} samples")
    rng = np.random.default_rng(rng_seed)
    class_id = eligible[int(rng.integers(len(eligible)))]
    pool = dataset.samples_of(class_id)
    picks = rng.choice(len(pool), size=K + N, replace=False)
    chosen = [pool[int(i)] for i in picks]
    return Episode(class_id, chosen[:K], chosen[K:])


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize then threshold at 0.5, never losing a nonempty mask entirely."""
    mask = np.asarray(mask)
    H, W = mask.shape
    if h > H or w > W:
        raise ValueError(f"cannot downsample {H}x{W} to larger {h}x{w}")
    out = (resize_array(mask.astype(np.float64), h, w) >= 0.5).astype(np.uint8)
    if not out.any() and mask.any():
        ys, xs = np.nonzero(mask)
        cy = min(int((ys.mean() + 0.5) * h / H), h - 1)
        cx = min(int((xs.mean() + 0.5) * w / W), w - 1)
        out[cy, cx] = 1
    return out


# --------------------------------------------------------------------------
# dataset directories


def write_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    index = []
    for s in dataset.samples:
        pnm.write_pnm(root / "images" / f"{s.sample_id}.ppm", pnm.to_bytes(s.image))
        pnm.write_pnm(root / "masks" / f"{s.sample_id}.pgm", (s.mask > 0).astype(np.uint8) * 255)
        index.append(f"{s.sample_id} {s.class_id}\n")
    (root / "index.txt").write_text("".join(index))
    split = [f"{c} train\n" for c in dataset.train_classes]
    split += [f"{c} test\n" for c in dataset.test_classes]
    (root / "split.txt").write_text("".join(split))
    return root


def _read_split(path: Path):
    sides: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SIDES:
            raise IngestionError(path, f"line {lineno}: expected '<class_id> train|test'")
        try:
            c = int(parts[0])
        except ValueError:
            raise IngestionError(path, f"line {lineno}: bad class id {parts[0]!r}") from None
        sides.setdefault(c, set()).add(parts[1])
    both = sorted(c for c, s in sides.items() if len(s) > 1)
    if both:
        raise SplitOverlapError(path, f"classes {both} listed in both train and test")
    train = tuple(sorted(c for c, s in sides.items() if "train" in s))
    test = tuple(sorted(c for c, s in sides.items() if "test" in s))
    return train, test


def load_dataset(directory) -> Dataset:
    """Read a dataset directory (images/*.ppm, masks/*.pgm, index.txt, split.txt)."""
    root = Path(directory)
    for required in ("index.txt", "split.txt"):
        if not (root / required).is_file():
            raise IngestionError(root / required, "missing")
    train, test = _read_split(root / "split.txt")
    known = set(train) | set(test)
    samples = []
    index_path = root / "index.txt"
    for lineno, line in enumerate(index_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise IngestionError(index_path, f"line {lineno}: expected '<id> <class_id>'")
        sample_id, class_id = parts[0], int(parts[1])
        if class_id not in known:
            raise IngestionError(index_path, f"line {lineno}: class {class_id} not in split.txt")
        image_path = root / "images" / f"{sample_id}.ppm"
        mask_path = root / "masks" / f"{sample_id}.pgm"
        for p in (image_path, mask_path):
            if not p.is_file():
                raise IngestionError(p, "missing")
        image = pnm.read_pnm(image_path)
        if image.ndim != 3:
            raise MalformedHeaderError(image_path, "expected a P6 colour image")
        raw_mask = pnm.read_pnm(mask_path)
        if raw_mask.ndim != 2:
            raise MalformedHeaderError(mask_path, "expected a P5 greyscale mask")
        if raw_mask.shape != image.shape[:2]:
            raise SizeMismatchError(mask_path, f"mask {raw_mask.shape} vs image {image.shape[:2]}")
        mask = (raw_mask >= 128).astype(np.uint8)
        if not mask.any():
            raise EmptyMaskFileError(mask_path, "mask has no foreground pixel")
        samples.append(Sample(image.astype(np.float64) / 255.0, mask, class_id, sample_id))
    return Dataset(samples, train, test)


def require_foreground(mask: np.ndarray, what: str = "mask") -> None:
    if not np.asarray(mask).any():
        raise EmptyMaskError(f"{what} has no foreground pixel")

