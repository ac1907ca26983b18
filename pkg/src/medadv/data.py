"""
Datasets: the synthetic lesion-image generator, seeded Train/AdvTrain/AdvTest
splitting, CSV manifests and image ingestion.

All pixels live in [-1, 1]; 8-bit gray level ``v`` maps to ``v * 2/255 - 1``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError
from .tensorio import load_tensor, read_pnm

SPLITS = ("Train", "AdvTrain", "AdvTest")


@dataclass
class Dataset:
    """Images (N, H, W, C) float32 with integer labels and string ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: list
    num_classes: int
    split: str | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], [self.ids[i] for i in index], self.num_classes, self.split)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int
    split: str | None = None


@dataclass
class DatasetManifest:
    entries: list
    num_classes: int
    shape: tuple
    split: str | None = None

    def __post_init__(self):
        for e in self.entries:
            if not 0 <= e.label < self.num_classes:
                raise ValueError(f"entry {e.id}: label {e.label} outside [0, {self.num_classes})")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")


# ---------------------------------------------------------------------------
# synthetic lesions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic lesion generator.

    Each image is a dark background with an oriented sinusoidal texture,
    pixel noise and a few Gaussian "lesion" blobs whose size and peak
    intensity do not depend on the class. Two low-amplitude cues carry the
    label: class ``k`` shifts the whole image tone by ``k * tone_step``, and
    its lesions carry a fine period-2 pattern of amplitude ``lesion_texture``
    (row stripes, column stripes, checkerboard, none for k = 0..3).
    """

    num_classes: int = 2
    image_size: int = 32
    channels: int = 3
    background: float = -0.2
    background_jitter: float = 0.02
    tone_step: float = 0.03
    texture_amplitude: float = 0.06
    texture_frequency: tuple = (0.8, 1.6)
    noise_std: float = 0.02
    blob_count: tuple = (1, 2)
    blob_radius: tuple = (7.0, 10.0)
    intensity_range: tuple = (0.3, 0.6)
    lesion_texture: float = 0.1
    tint: tuple = (1.0, 0.7, 0.5)
    seed: int = 0

    def validate(self):
        if not 2 <= self.num_classes <= 4:
            raise ConfigError("num_classes must be between 2 and 4")
        if self.image_size < 8 or self.channels not in (1, 3):
            raise ConfigError("image_size >= 8 and 1 or 3 channels required")
        if self.tone_step < 0 or self.lesion_texture < 0 or self.noise_std < 0:
            raise ConfigError("tone_step, lesion_texture and noise_std must be non-negative")
        if self.blob_count[0] < 1 or self.blob_count[1] < self.blob_count[0]:
            raise ConfigError("blob_count must be a non-empty positive range")
        if self.blob_radius[0] <= 0 or self.blob_radius[1] < self.blob_radius[0]:
            raise ConfigError("blob_radius must be a positive range")
        if 2 * self.blob_radius[1] >= self.image_size:
            raise ConfigError("blobs do not fit inside the image")
        if self.intensity_range[1] < self.intensity_range[0]:
            raise ConfigError("intensity_range must be ordered")


def _synth_image(cfg: SynthConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    s, c = cfg.image_size, cfg.channels
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    tone = cfg.background + label * cfg.tone_step + rng.uniform(-1, 1) * cfg.background_jitter
    freq = rng.uniform(*cfg.texture_frequency)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    img = tone + cfg.texture_amplitude * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    lesion = np.zeros((s, s))
    envelope = np.zeros((s, s))
    for _ in range(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1)):
        r = rng.uniform(*cfg.blob_radius)
        cy, cx = rng.uniform(r, s - r, size=2)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 2) ** 2))
        lesion = np.maximum(lesion, rng.uniform(*cfg.intensity_range) * bump)
        envelope = np.maximum(envelope, bump)
    iy, ix = yy.astype(int), xx.astype(int)
    patterns = [(-1.0) ** iy, (-1.0) ** ix, (-1.0) ** (iy + ix), np.zeros((s, s))]
    pattern = patterns[label % 4]
    lesion = lesion + cfg.lesion_texture * envelope * pattern
    tint = np.asarray(cfg.tint[:c] if c == 3 else cfg.tint[:1])
    out = img[..., None] + lesion[..., None] * tint + rng.normal(0, cfg.noise_std, size=(s, s, c))
    return np.clip(out, -1.0, 1.0)


def threshold_baseline(images: np.ndarray, labels: np.ndarray, num_classes: int,
                       eval_images=None, eval_labels=None) -> float:
    """Accuracy of a pixel-mean classifier with midpoint thresholds between class means.

    Thresholds come from ``images``; accuracy is measured on the evaluation
    pair when given, otherwise on the fitting data itself.
    """
    means = images.reshape(len(images), -1).mean(axis=1)
    centers = np.array([means[labels == k].mean() for k in range(num_classes)])
    order = np.argsort(centers)
    cuts = (centers[order][:-1] + centers[order][1:]) / 2
    if eval_images is None:
        eval_images, eval_labels = images, labels
    probe = eval_images.reshape(len(eval_images), -1).mean(axis=1)
    predicted = order[np.searchsorted(cuts, probe)]
    return float(np.mean(predicted == eval_labels))


PROBE_SIZE = 400
PROBE_MARGIN = 0.1


def learnability_check(config: SynthConfig) -> float:
    """Held-out threshold accuracy on a probe set drawn from a side stream of the seed."""
    rng = np.random.default_rng([config.seed, 0x5E1F])
    labels = np.arange(PROBE_SIZE) % config.num_classes
    images = np.stack([_synth_image(config, int(k), rng) for k in labels]).astype(np.float32)
    half = PROBE_SIZE // 2
    return threshold_baseline(images[:half], labels[:half], config.num_classes, images[half:], labels[half:])


def generate_synthetic(config: SynthConfig, count: int, prefix: str = "s") -> Dataset:
    """Seeded, class-balanced synthetic dataset.

    Every sample draws from its own substream ``(seed, index)`` so any subset
    can be regenerated independently. Raises :class:`ConfigError` when a
    pixel-mean threshold classifier fails to clearly beat chance on a
    held-out probe drawn from the same config.
    """
    config.validate()
    if count < config.num_classes:
        raise ValueError("count must be at least num_classes")
    labels = np.arange(count) % config.num_classes
    labels = np.random.default_rng([config.seed, 0xC1A55]).permutation(labels)
    images = np.empty((count, config.image_size, config.image_size, config.channels), dtype=np.float32)
    for i in range(count):
        rng = np.random.default_rng([config.seed, i])
        images[i] = _synth_image(config, int(labels[i]), rng)
    probe = learnability_check(config)
    if probe < 1.0 / config.num_classes + PROBE_MARGIN:
        raise ConfigError(f"synthetic task is not learnable: probe threshold accuracy {probe:.3f} "
                          f"is within {PROBE_MARGIN} of chance")
    return Dataset(images, labels, [f"{prefix}{i:06d}" for i in range(count)], config.num_classes)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_sizes(n: int, ratios) -> list:
    r = np.asarray(ratios, dtype=np.float64)
    if len(r) != 3 or np.any(r < 0) or not np.isclose(r.sum(), 1.0):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    cuts = np.round(np.cumsum(r) * n).astype(int)
    cuts[-1] = n
    return list(np.diff(np.concatenate([[0], cuts])))


def split_dataset(data: Dataset, ratios=(0.5, 0.4, 0.1), seed: int = 0) -> tuple:
    """Seeded shuffle then contiguous cut into Train, AdvTrain and AdvTest."""
    if len(data) == 0:
        raise ValueError("cannot split an empty dataset")
    sizes = split_sizes(len(data), ratios)
    order = np.random.default_rng(seed).permutation(len(data))
    parts, start = [], 0
    for name, size in zip(SPLITS, sizes):
        part = data.subset(np.sort(order[start:start + size]))
        part.split = name
        parts.append(part)
        start += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# manifests and ingestion
# ---------------------------------------------------------------------------

def read_manifest(path, num_classes: int | None = None, shape=None) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "path", "label", "split"]:
            raise FormatError(f"{path}: header must be id,path,label,split")
        for row in reader:
            p = row["path"]
            if not os.path.isabs(p):
                p = os.path.join(base, p)
            entries.append(ManifestEntry(row["id"], p, int(row["label"]), row["split"] or None))
    if num_classes is None:
        num_classes = max(e.label for e in entries) + 1 if entries else 2
    return DatasetManifest(entries, num_classes, tuple(shape) if shape is not None else (32, 32, 3))


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "path", "label", "split"])
        for e in manifest.entries:
            w.writerow([e.id, e.path, e.label, e.split or ""])


def to_unit_range(pixels) -> np.ndarray:
    """8-bit gray levels to [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)).astype(np.float32)


def crop_or_pad(image: np.ndarray, height: int, width: int, fill: float = -1.0) -> np.ndarray:
    """Center-crop or pad (with ``fill``) to the requested spatial size."""
    h, w = image.shape[:2]
    out = np.full((height, width) + image.shape[2:], fill, dtype=image.dtype)
    sy, sx = max((h - height) // 2, 0), max((w - width) // 2, 0)
    dy, dx = max((height - h) // 2, 0), max((width - w) // 2, 0)
    ch, cw = min(h, height), min(w, width)
    out[dy:dy + ch, dx:dx + cw] = image[sy:sy + ch, sx:sx + cw]
    return out


def _match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[2] == channels:
        return image
    if image.shape[2] == 1:
        return np.repeat(image, channels, axis=2)
    if channels == 1:
        return image.mean(axis=2, keepdims=True)
    raise FormatError(f"cannot map {image.shape[2]} channels to {channels}")


def load_image(path, shape) -> np.ndarray:
    """Read one PGM/PPM (8-bit) or TNSR image into the declared (H, W, C) shape."""
    if str(path).lower().endswith(".tnsr"):
        img = load_tensor(path)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise FormatError(f"{path}: TNSR image must have rank 2 or 3")
        if img.min() < -1 or img.max() > 1:
            raise FormatError(f"{path}: TNSR image values must lie in [-1, 1]")
    else:
        img = to_unit_range(read_pnm(path))
    img = _match_channels(img.astype(np.float32), shape[2])
    return crop_or_pad(img, shape[0], shape[1])


def load_images(manifest: DatasetManifest) -> Dataset:
    h, w, c = manifest.shape
    images = np.empty((len(manifest.entries), h, w, c), dtype=np.float32)
    for i, entry in enumerate(manifest.entries):
        try:
            images[i] = load_image(entry.path, manifest.shape)
        except OSError as exc:
            raise FormatError(f"{entry.path}: {exc}") from exc
    return Dataset(images, [e.label for e in manifest.entries], [e.id for e in manifest.entries],
                   manifest.num_classes, manifest.split)


def manifest_splits(manifest: DatasetManifest) -> dict:
    """Group manifest entries by their split column."""
    groups = {}
    for e in manifest.entries:
        groups.setdefault(e.split, []).append(e)
    return {k: replace(manifest, entries=v, split=k) for k, v in groups.items()}
