"""Synthetic 2D distributions with exact densities, and a tiny binary image corpus.

Corpus file layout, little-endian::

    b"APTC" | version u32 | count u32 | edge u32 | channels u32 | classes u32
    then ``count`` records of: label u32 | edge * edge * channels uint8 bytes
    (row-major, channel-last)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from apt_lab.config import DataConfig
from apt_lab.errors import ConfigError, CorpusFormatError, InvalidInputError

CORPUS_MAGIC = b"APTC"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def ring_centers(spec: DataConfig) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_modes) / spec.n_modes
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def checkerboard_cells(spec: DataConfig) -> np.ndarray:
    """Lower-left corners of the filled cells (alternating pattern)."""
    size = 2 * spec.extent / spec.grid
    cells = [
        (-spec.extent + i * size, -spec.extent + j * size)
        for i in range(spec.grid)
        for j in range(spec.grid)
        if (i + j) % 2 == 0
    ]
    return np.asarray(cells)


def mode_centers(spec: DataConfig) -> np.ndarray:
    if spec.kind == "gmm_ring":
        return ring_centers(spec)
    if spec.kind == "checkerboard":
        size = 2 * spec.extent / spec.grid
        return checkerboard_cells(spec) + size / 2
    raise InvalidInputError(f"{spec.kind} has no known modes")


@dataclass
class Normalization:
    """Affine map ``normalized = (raw - offset) * scale``."""

    scale: float = 1.0
    offset: float = 0.0

    def apply(self, x):
        return (x - self.offset) * self.scale

    def invert(self, x):
        return x / self.scale + self.offset


def normalization_for(spec: DataConfig) -> Normalization:
    if spec.kind == "checkerboard":
        return Normalization(scale=1.0 / spec.extent)
    if spec.kind == "image_corpus":
        return Normalization(scale=1.0 / 127.5, offset=127.5)
    return Normalization()


def _sample_ring(spec: DataConfig, generator: torch.Generator, n: int) -> tuple[Tensor, Tensor]:
    labels = torch.randint(spec.n_modes, (n,), generator=generator)
    centers = torch.as_tensor(ring_centers(spec), dtype=torch.float32)
    noise = torch.randn(n, 2, generator=generator) * spec.mode_std
    return centers[labels] + noise, labels


def _sample_checkerboard(spec: DataConfig, generator: torch.Generator, n: int) -> tuple[Tensor, Tensor]:
    cells = torch.as_tensor(checkerboard_cells(spec), dtype=torch.float32)
    size = 2 * spec.extent / spec.grid
    labels = torch.randint(len(cells), (n,), generator=generator)
    offsets = torch.rand(n, 2, generator=generator) * size
    return cells[labels] + offsets, labels


def log_density(spec: DataConfig, points: np.ndarray) -> np.ndarray:
    """Exact log-density of the raw (unnormalized) synthetic distribution."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if spec.kind == "gmm_ring":
        centers = ring_centers(spec)
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        log_comp = -d2 / (2 * spec.mode_std**2) - np.log(2 * np.pi * spec.mode_std**2)
        m = log_comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(log_comp - m).mean(axis=1, keepdims=True)))[:, 0]
    if spec.kind == "checkerboard":
        cells = checkerboard_cells(spec)
        size = 2 * spec.extent / spec.grid
        inside = np.zeros(len(points), dtype=bool)
        for x0, y0 in cells:
            inside |= (points[:, 0] >= x0) & (points[:, 0] < x0 + size) & (points[:, 1] >= y0) & (points[:, 1] < y0 + size)
        return np.where(inside, -np.log(len(cells) * size * size), -np.inf)
    raise InvalidInputError(f"{spec.kind} has no closed-form density")


@dataclass
class ImageCorpus:
    images: np.ndarray  # (count, edge, edge, channels) uint8
    labels: np.ndarray  # (count,) int64
    classes: int
    normalization: Normalization = field(default_factory=lambda: Normalization(scale=1.0 / 127.5, offset=127.5))

    @property
    def edge(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def tensors(self) -> tuple[Tensor, Tensor]:
        x = torch.as_tensor(self.normalization.apply(self.images.astype(np.float32)))
        return x[:, None], torch.as_tensor(self.labels)


def write_image_corpus(path: str | Path, images: np.ndarray, labels, classes: int) -> Path:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise InvalidInputError("images must be (count, edge, edge, channels)")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(images):
        raise InvalidInputError("labels and images differ in length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count, edge, _, channels = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, count, edge, channels, classes))
        for label, img in zip(labels, images):
            fh.write(struct.pack("<I", int(label)))
            fh.write(img.tobytes())
    return path


def read_corpus_header(data: bytes) -> tuple[int, int, int, int, int]:
    if len(data) < _HEADER.size:
        raise CorpusFormatError("corpus file shorter than its header")
    magic, version, count, edge, channels, classes = _HEADER.unpack_from(data)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError(f"bad corpus magic {magic!r}")
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    return version, count, edge, channels, classes


def load_image_corpus(spec: DataConfig) -> ImageCorpus:
    """Decode, validate labels, center-crop to ``spec.edge`` and attach the [-1, 1] normalization."""
    path = Path(spec.path)
    if not path.exists():
        raise ConfigError(f"corpus file {path} does not exist")
    data = path.read_bytes()
    _, count, edge, channels, classes = read_corpus_header(data)
    record = 4 + edge * edge * channels
    payload = len(data) - _HEADER.size
    if payload != count * record:
        raise CorpusFormatError(
            f"count field says {count} records of {record} bytes but the payload holds {payload} bytes"
        )
    images = np.empty((count, edge, edge, channels), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        start = _HEADER.size + i * record
        (label,) = struct.unpack_from("<I", data, start)
        if label >= classes:
            raise CorpusFormatError(f"record {i}: label {label} outside [0, {classes})")
        labels[i] = label
        images[i] = np.frombuffer(data, dtype=np.uint8, count=record - 4, offset=start + 4).reshape(edge, edge, channels)
    if spec.channels is not None and spec.channels != channels:
        raise ConfigError(f"data.channels={spec.channels} but the corpus has {channels} channels")
    if spec.classes is not None and spec.classes != classes:
        raise ConfigError(f"data.classes={spec.classes} but the corpus has {classes} classes")
    target = spec.edge or edge
    if target > edge:
        raise ConfigError(f"data.edge={target} exceeds the stored image edge {edge}")
    lo = (edge - target) // 2
    images = images[:, lo:lo + target, lo:lo + target]
    return ImageCorpus(images=np.ascontiguousarray(images), labels=labels, classes=classes)


class DataSource:
    """Seeded sampler of ``(x, c)`` batches shaped ``(n, 1, h, w, c)``."""

    def __init__(self, spec: DataConfig):
        spec.validate()
        self.spec = spec
        self.normalization = normalization_for(spec)
        self.corpus = load_image_corpus(spec) if spec.kind == "image_corpus" else None
        if self.corpus is not None:
            self._x, self._labels = self.corpus.tensors()

    @property
    def num_classes(self) -> int:
        if self.spec.kind == "gmm_ring":
            return self.spec.n_modes
        if self.spec.kind == "checkerboard":
            return len(checkerboard_cells(self.spec))
        return self.corpus.classes

    @property
    def data_shape(self) -> tuple[int, int, int, int]:
        if self.corpus is None:
            return (1, 1, 1, 2)
        return (1, self.corpus.edge, self.corpus.edge, self.corpus.channels)

    def sample(self, generator: torch.Generator, n: int) -> tuple[Tensor, Tensor]:
        return sample_real(self, generator, n)


def sample_real(source: DataSource | DataConfig, generator: torch.Generator, n: int) -> tuple[Tensor, Tensor]:
    if isinstance(source, DataConfig):
        source = DataSource(source)
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    spec = source.spec
    if spec.kind == "gmm_ring":
        x, c = _sample_ring(spec, generator, n)
    elif spec.kind == "checkerboard":
        x, c = _sample_checkerboard(spec, generator, n)
    elif spec.kind == "image_corpus":
        idx = torch.randint(len(source._labels), (n,), generator=generator)
        return source._x[idx], source._labels[idx]
    else:
        raise ConfigError(f"unknown data kind {spec.kind!r}")
    x = source.normalization.apply(x)
    return x.view(n, 1, 1, 1, 2), c

