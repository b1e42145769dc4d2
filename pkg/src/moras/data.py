"""Datasets: the MDS container, CSV import, stratified splits and a synthetic
image generator used in place of CIFAR at desk scale.

MDS layout (little-endian)::

    b"MDS1" | u32 N | u16 C | u16 H | u16 W | u16 class_count
    | N*C*H*W u8 pixels (row-major) | N u16 labels
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DatasetValidationError, FormatError
from .rng import stream

MAGIC = b"MDS1"
_HEADER = struct.Struct("<4sIHHHH")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled image set; pixels are stored as bytes."""

    pixels: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if pixels.ndim != 4:
            raise DatasetValidationError(f"pixels must be (N, C, H, W), got {pixels.shape}")
        if len(pixels) == 0:
            raise DatasetValidationError("dataset is empty")
        if labels.shape != (len(pixels),):
            raise DatasetValidationError(
                f"{len(pixels)} images but labels have shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise DatasetValidationError(
                f"labels must lie in [0, {self.class_count}), found {labels.min()}..{labels.max()}")
        pixels.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def images(self) -> np.ndarray:
        """Pixels scaled to [0, 1] in the current default precision."""
        return self.pixels.astype(T.default_dtype()) / T.default_dtype()(255)

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index], self.labels[index], self.class_count,
                       self.name if name is None else name)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.pixels.tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        return h.hexdigest()

    @staticmethod
    def concatenate(parts: Sequence["Dataset"], name: str = "") -> "Dataset":
        return Dataset(np.concatenate([p.pixels for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       parts[0].class_count, name)


def from_float_images(images: np.ndarray, labels, class_count: int, name: str = "") -> Dataset:
    """Quantize [0, 1] images to bytes (used to export adversarial examples)."""
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Dataset(pixels, labels, class_count, name)


# ---------------------------------------------------------------------------
# MDS and CSV
# ---------------------------------------------------------------------------

def to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.pixels.shape
    header = _HEADER.pack(MAGIC, n, c, h, w, ds.class_count)
    return header + ds.pixels.tobytes() + ds.labels.astype("<u2").tobytes()


def from_bytes(buf: bytes, name: str = "") -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}",
                          offset=len(buf))
    magic, n, c, h, w, classes = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    n_pix = n * c * h * w
    expected = _HEADER.size + n_pix + 2 * n
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "trailing bytes in"
        raise FormatError(f"{kind} file: expected {expected} bytes, got {len(buf)}",
                          offset=min(len(buf), expected))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n_pix, offset=_HEADER.size)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=_HEADER.size + n_pix)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise DatasetValidationError(
            f"label {labels[bad[0]]} at sample {bad[0]} is >= class_count {classes}")
    return Dataset(pixels.reshape(n, c, h, w), labels.astype(np.int64), classes, name)


def save(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> Dataset:
    """Read an MDS file (or a CSV file, by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return from_bytes(path.read_bytes(), name=path.stem)


def load_csv(path, shape: tuple[int, int, int] | None = None,
             class_count: int | None = None) -> Dataset:
    """Import ``pixel_0..pixel_k,label`` rows of byte values.

    Without ``shape`` the images are taken to be single-channel squares.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty CSV file", offset=0)
        if header[-1].strip() != "label" or not all(
                col.strip() == f"pixel_{i}" for i, col in enumerate(header[:-1])):
            raise FormatError(f"{path}: header must be pixel_0..pixel_k,label")
        rows = [list(map(int, r)) for r in reader if r]
    if not rows:
        raise DatasetValidationError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=np.int64)
    pix, labels = arr[:, :-1], arr[:, -1]
    if pix.min() < 0 or pix.max() > 255:
        raise DatasetValidationError(f"{path}: pixel values must be bytes")
    k = pix.shape[1]
    if shape is None:
        side = int(round(k ** 0.5))
        if side * side != k:
            raise FormatError(f"{path}: {k} pixels per row is not a square image; pass shape")
        shape = (1, side, side)
    if int(np.prod(shape)) != k:
        raise FormatError(f"{path}: shape {shape} does not match {k} pixels per row")
    classes = int(labels.max()) + 1 if class_count is None else class_count
    return Dataset(pix.astype(np.uint8).reshape((-1,) + tuple(shape)), labels, classes, path.stem)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

DESK_FRACTIONS = (10, 2, 3)


def _allocate(count: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder rounding, so each part is within one sample of its share
    exact = count * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:count - base.sum()]] += 1
    return base


def split(ds: Dataset, fractions: Sequence[float] = DESK_FRACTIONS,
          seed: int = 0) -> tuple[Dataset, ...]:
    """Stratified, disjoint split into ``len(fractions)`` parts.

    Samples are first ordered by a content hash, so the result does not depend
    on the order of the input rows.
    """
    weights = np.asarray(fractions, dtype=np.float64)
    if weights.ndim != 1 or len(weights) == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError(f"invalid split fractions {fractions}")
    keys = np.array([hashlib.blake2b(ds.pixels[i].tobytes() + bytes([int(ds.labels[i]) % 256]),
                                     digest_size=8).hexdigest() for i in range(len(ds))])
    parts: list[list[int]] = [[] for _ in weights]
    for cls in range(ds.class_count):
        members = np.flatnonzero(ds.labels == cls)
        if members.size == 0:
            continue
        members = members[np.argsort(keys[members], kind="stable")]
        members = members[stream(seed, "split", cls).permutation(members.size)]
        counts = _allocate(members.size, weights)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for p in range(len(weights)):
            parts[p].extend(members[bounds[p]:bounds[p + 1]].tolist())
    names = ("train", "val", "test") if len(weights) == 3 else tuple(
        f"part{i}" for i in range(len(weights)))
    out = []
    for p, idx in enumerate(parts):
        if not idx:
            raise DatasetValidationError(f"split part {p} would be empty")
        idx = np.sort(np.asarray(idx))
        out.append(ds.subset(idx, name=names[p]))
    return tuple(out)


@dataclass
class Splits:
    """Train/validation/test splits with access tracking.

    ``accessed`` records which split attributes have been read, so callers
    can assert that a stage never touched data it should not see.
    """

    _train: Dataset
    _val: Dataset
    _test: Dataset | None = None
    accessed: set[str] = field(default_factory=set)

    @property
    def train(self) -> Dataset:
        self.accessed.add("train")
        return self._train

    @property
    def val(self) -> Dataset:
        self.accessed.add("val")
        return self._val

    @property
    def test(self) -> Dataset:
        self.accessed.add("test")
        if self._test is None:
            raise DatasetValidationError("no test split available")
        return self._test

    @classmethod
    def from_dataset(cls, ds: Dataset, fractions=DESK_FRACTIONS, seed: int = 0) -> "Splits":
        train, val, test = split(ds, fractions, seed)
        return cls(train, val, test)


# ---------------------------------------------------------------------------
# synthetic desk data
# ---------------------------------------------------------------------------

PATTERNS = ("horizontal_bars", "vertical_bars", "diagonal_bars", "blob", "checkerboard", "ring")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parametric pattern classes rendered as single-channel images.

    ``contrast`` is the pattern amplitude range and ``noise`` the standard
    deviation of additive Gaussian pixel noise; lowering contrast or raising
    noise makes the task harder.
    """

    n_per_class: int = 135
    classes: int = 4
    size: int = 16
    contrast: tuple[float, float] = (0.2, 0.4)
    noise: float = 0.08

    def __post_init__(self):
        if not 2 <= self.classes <= len(PATTERNS):
            raise ValueError(f"classes must be in [2, {len(PATTERNS)}]")
        if self.n_per_class < 1 or self.size < 4:
            raise ValueError("need n_per_class >= 1 and size >= 4")


def _render(pattern: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    if pattern == "horizontal_bars":
        return np.sign(np.sin(2 * np.pi * yy / period + phase))
    if pattern == "vertical_bars":
        return np.sign(np.sin(2 * np.pi * xx / period + phase))
    if pattern == "diagonal_bars":
        return np.sign(np.sin(2 * np.pi * (xx + yy) / (period * 1.414) + phase))
    if pattern == "checkerboard":
        return np.sign(np.sin(np.pi * xx / (period / 2) + phase)) * np.sign(
            np.sin(np.pi * yy / (period / 2) + phase))
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if pattern == "blob":
        sigma = rng.uniform(size * 0.12, size * 0.22)
        return 2.0 * np.exp(-r2 / (2 * sigma ** 2)) - 1.0
    if pattern == "ring":
        radius = rng.uniform(size * 0.2, size * 0.3)
        return 2.0 * np.exp(-((np.sqrt(r2) - radius) ** 2) / 2.0) - 1.0
    raise ValueError(pattern)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Dataset:
    """Exactly ``n_per_class`` images of each of ``spec.classes`` patterns."""
    rng = stream(seed, "synthetic")
    n = spec.n_per_class * spec.classes
    labels = np.repeat(np.arange(spec.classes), spec.n_per_class)
    images = np.empty((n, 1, spec.size, spec.size))
    for i, cls in enumerate(labels):
        base = rng.uniform(0.35, 0.65)
        amp = rng.uniform(*spec.contrast) / 2
        img = base + amp * _render(PATTERNS[cls], spec.size, rng)
        images[i, 0] = img + rng.normal(0.0, spec.noise, size=img.shape)
    order = rng.permutation(n)
    pixels = np.rint(np.clip(images[order], 0.0, 1.0) * 255).astype(np.uint8)
    return Dataset(pixels, labels[order], spec.classes, "synthetic")
