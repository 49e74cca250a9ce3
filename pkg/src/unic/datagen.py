"""ShapeGrid: a synthetic task with an image-level and a per-cell label.

Each image is a G x G grid of cells. A cell shows one of C patterns: a
fixed square-wave grating whose orientation identifies the pattern, drawn
at a random phase, plus Gaussian pixel noise. All patterns share the same
mean intensity, so a cell's identity is not a linear function of its
pixels. The image label is the majority pattern (lowest id on ties) and
each cell's label is its own pattern id.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"UNICDAT1"
_SPEC_FMT = "<HHHHIIQd"
_SPEC_SIZE = struct.calcsize(_SPEC_FMT)

BASE_LEVEL = 0.5
AMPLITUDE = 0.3
CYCLES_PER_CELL = 2.0
CHANNEL_TINT = (1.0, 0.9, 0.8)


@dataclass(frozen=True)
class ShapeGridSpec:
    grid: int = 4
    cell_pixels: int = 8
    num_patterns: int = 5
    channels: int = 3
    train_size: int = 4000
    eval_size: int = 1000
    seed: int = 0
    noise_std: float = 0.05

    def __post_init__(self):
        for name in ("grid", "cell_pixels", "num_patterns", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.train_size < 0 or self.eval_size < 0 or self.noise_std < 0:
            raise ConfigError("dataset sizes and noise_std must be non-negative")
        if self.num_patterns > 65535:
            raise ConfigError("num_patterns must fit in u16 labels")

    @property
    def image_size(self):
        return self.grid * self.cell_pixels

    @property
    def cells(self):
        return self.grid ** 2

    def to_dict(self):
        return asdict(self)


def pattern_tiles(spec: ShapeGridSpec, cell_labels, phases):
    """(N, cells, channels, p, p) tiles for pattern ids and grating phases."""
    p = spec.cell_pixels
    yy, xx = np.mgrid[0:p, 0:p].astype(np.float64)
    angle = np.pi * np.asarray(cell_labels) / spec.num_patterns
    omega = 2.0 * np.pi * CYCLES_PER_CELL / p
    arg = omega * (xx * np.cos(angle)[..., None, None] + yy * np.sin(angle)[..., None, None])
    wave = np.sign(np.sin(arg + np.asarray(phases)[..., None, None]))
    tint = np.resize(np.asarray(CHANNEL_TINT), spec.channels)
    return (BASE_LEVEL + AMPLITUDE * wave)[:, :, None] * tint[None, None, :, None, None]


def majority_label(cell_labels, num_patterns):
    """Most frequent id per row, lowest id on ties."""
    cell_labels = np.atleast_2d(cell_labels)
    counts = np.zeros((cell_labels.shape[0], num_patterns), dtype=np.int64)
    for k in range(num_patterns):
        counts[:, k] = (cell_labels == k).sum(axis=1)
    return counts.argmax(axis=1)


def compose(spec: ShapeGridSpec, cell_labels, phases, noise=None):
    """Images (N, C, H, W) for (N, G*G) pattern ids and phases plus optional noise."""
    cell_labels = np.asarray(cell_labels)
    n, g, p = cell_labels.shape[0], spec.grid, spec.cell_pixels
    tiles = pattern_tiles(spec, cell_labels, phases).reshape(n, g, g, spec.channels, p, p)
    images = tiles.transpose(0, 3, 1, 4, 2, 5).reshape(n, spec.channels, g * p, g * p)
    if noise is not None:
        images = images + noise
    # f32-representable so the on-disk container round-trips exactly
    return images.astype(np.float32).astype(np.float64)


def _draw(spec, n, rng, cells=None):
    if cells is None:
        cells = rng.integers(spec.num_patterns, size=(n, spec.cells))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, spec.cells))
    noise = None
    if spec.noise_std > 0:
        noise = rng.normal(0.0, spec.noise_std, size=(n, spec.channels, spec.image_size, spec.image_size))
    return compose(spec, cells, phases, noise), cells


def render_batch(spec: ShapeGridSpec, n, rng):
    """Draw ``n`` samples; returns (images, global_labels, cell_labels)."""
    images, cells = _draw(spec, n, rng)
    return images, majority_label(cells, spec.num_patterns), cells


@dataclass
class Sample:
    image: np.ndarray
    global_label: int
    cell_labels: np.ndarray


def render(spec: ShapeGridSpec, rng, cell_labels=None) -> Sample:
    """One sample; ``cell_labels`` forces the pattern ids instead of drawing them."""
    cells = None
    if cell_labels is not None:
        cells = np.asarray(cell_labels, dtype=np.int64).reshape(1, spec.cells)
    images, cells = _draw(spec, 1, rng, cells)
    return Sample(images[0], int(majority_label(cells, spec.num_patterns)[0]), cells[0])


class Dataset:
    """Images with image-level and per-cell labels."""

    def __init__(self, spec, images, labels, cell_labels):
        self.spec = spec
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.cell_labels = np.asarray(cell_labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.spec, self.images[idx], self.labels[idx], self.cell_labels[idx])


def split_rng(spec: ShapeGridSpec, split, epoch=0):
    streams = {"train": 0, "eval": 1, "fresh": 2}
    return np.random.default_rng([spec.seed, streams[split], epoch])


def make_dataset(spec: ShapeGridSpec, split="train", epoch=0, size=None):
    if size is None:
        size = spec.eval_size if split == "eval" else spec.train_size
    images, labels, cells = render_batch(spec, size, split_rng(spec, split, epoch))
    return Dataset(spec, images, labels, cells)


# ---------------------------------------------------------------- container

def _record_dtype(spec):
    return np.dtype([
        ("image", "<f4", (spec.channels * spec.image_size * spec.image_size,)),
        ("label", "<u2"),
        ("cells", "<u2", (spec.cells,)),
    ])


def record_size(spec):
    return _record_dtype(spec).itemsize


def header_size():
    return len(MAGIC) + 4 + _SPEC_SIZE


def encode_dataset(ds: Dataset):
    spec = ds.spec
    rec = np.zeros(len(ds), dtype=_record_dtype(spec))
    rec["image"] = ds.images.reshape(len(ds), -1)
    rec["label"] = ds.labels
    rec["cells"] = ds.cell_labels
    header = MAGIC + struct.pack("<I", len(ds)) + struct.pack(
        _SPEC_FMT, spec.grid, spec.cell_pixels, spec.num_patterns, spec.channels,
        spec.train_size, spec.eval_size, spec.seed, spec.noise_std)
    return header + rec.tobytes()


def decode_dataset(buf) -> Dataset:
    if len(buf) < len(MAGIC) or bytes(buf[:len(MAGIC)]) != MAGIC:
        raise FormatError("bad dataset magic", 0)
    if len(buf) < header_size():
        raise FormatError("truncated dataset header", len(buf))
    (count,) = struct.unpack_from("<I", buf, len(MAGIC))
    fields = struct.unpack_from(_SPEC_FMT, buf, len(MAGIC) + 4)
    try:
        spec = ShapeGridSpec(*fields)
    except ConfigError as exc:
        raise FormatError(f"invalid spec record: {exc}", len(MAGIC) + 4) from exc
    dt = _record_dtype(spec)
    expected = header_size() + count * dt.itemsize
    if len(buf) != expected:
        raise FormatError(f"dataset body has {len(buf) - header_size()} bytes, expected "
                          f"{count * dt.itemsize} for {count} records", min(len(buf), expected))
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=header_size())
    images = rec["image"].astype(np.float64).reshape(count, spec.channels, spec.image_size, spec.image_size)
    cells = rec["cells"].astype(np.int64)
    labels = rec["label"].astype(np.int64)
    if count and (cells.max() >= spec.num_patterns or labels.max() >= spec.num_patterns):
        raise FormatError("label out of range for the spec's pattern count", header_size())
    return Dataset(spec, images, labels, cells)


def save_dataset(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
