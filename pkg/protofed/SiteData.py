"""Synthetic non-IID clinical sites with planted lesion glyphs.

Class 0 is healthy. Every other class plants a cluster of bright disks (one
more disk per class index) at a uniformly random position and records the
exact bounding rectangle of the planted pixels.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .RunSettings import DataConfig, RunConfig
from .protofed_types import FreezeMode
from .image_utils import load_pnm, save_pnm, upsample_bilinear
from .protofed_aux import Box, ConfigurationError, DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["path", "label", "site", "box_x", "box_y", "box_w", "box_h"]
TEST_SITE = "test"
EXTERNAL_SITE = "external"
PRETRAIN_SITE_ID = 99

_GLYPH_INTENSITY = 0.55
_BACKGROUND_GRID = 4


@dataclass(frozen=True)
class SiteSpec(object):
    site_id: int
    num_samples: int
    healthy_fraction: float
    brightness: float = 0.0
    contrast: float = 1.0
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.healthy_fraction <= 1.0:
            raise ConfigurationError(
                f"site {self.site_id}: healthy fraction {self.healthy_fraction} "
                f"outside [0, 1]")
        if self.noise_std < 0:
            raise ConfigurationError(f"site {self.site_id}: noise std must be >= 0")
        if self.num_samples < 1:
            raise ConfigurationError(f"site {self.site_id}: needs >= 1 sample")


@dataclass
class SiteDataset(object):
    images: np.ndarray
    labels: np.ndarray
    boxes: list
    spec: SiteSpec
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.boxes)):
            raise DataError("images, labels and boxes differ in length")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return "'SiteDataset: site {}, {} samples, {}'".format(
            self.spec.site_id, len(self), np.bincount(self.labels).tolist())

    def subset(self, idx) -> "SiteDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SiteDataset(self.images[idx], self.labels[idx],
                           [self.boxes[i] for i in idx], self.spec,
                           self.indices[idx])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    @property
    def diseased(self) -> np.ndarray:
        return np.flatnonzero(self.labels != 0)


def _glyph(rng: np.random.Generator, size: int, label: int) -> np.ndarray:
    """A size×size mask of ``label + 1`` disks."""
    mask = np.zeros((size, size), dtype=bool)
    radius = max(1.0, size / 3.0)
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = radius, size - 1 - radius
    for _ in range(label + 1):
        cy, cx = rng.uniform(lo, max(lo, hi), size=2)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return mask


def generate_site(spec: SiteSpec, extents: tuple[int, int], num_classes: int,
                  channels: int = 1, glyph_size: int = 16) -> SiteDataset:
    """Deterministic in ``spec.seed``."""
    height, width = extents
    if glyph_size > height or glyph_size > width:
        raise ConfigurationError(
            f"glyph of {glyph_size} px does not fit {height}x{width} images")
    if num_classes < 1:
        raise ConfigurationError("num_classes must be >= 1")
    rng = np.random.default_rng(spec.seed)

    n = spec.num_samples
    healthy = int(round(spec.healthy_fraction * n)) if num_classes > 1 else n
    labels = np.zeros(n, dtype=np.int64)
    if num_classes > 1:
        labels[healthy:] = 1 + np.arange(n - healthy) % (num_classes - 1)
    labels = rng.permutation(labels)

    images = np.empty((n, channels, height, width))
    boxes = []
    for i, label in enumerate(labels):
        coarse = rng.uniform(0.2, 0.5, size=(_BACKGROUND_GRID, _BACKGROUND_GRID))
        image = upsample_bilinear(coarse, (height, width))
        image = spec.contrast * (image - 0.5) + 0.5 + spec.brightness
        image = image + rng.normal(0.0, spec.noise_std, size=(height, width)) \
            if spec.noise_std > 0 else image
        box = None
        if label != 0:
            mask = _glyph(rng, glyph_size, int(label))
            y0 = int(rng.integers(0, height - glyph_size + 1))
            x0 = int(rng.integers(0, width - glyph_size + 1))
            window = image[y0:y0 + glyph_size, x0:x0 + glyph_size]
            window[mask] += _GLYPH_INTENSITY * spec.contrast
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = Box(x0 + int(cols[0]), y0 + int(rows[0]),
                      int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
        images[i] = np.clip(image, 0.0, 1.0)[None]
        boxes.append(box)
    logger.debug("generated site %d: %d samples, %d healthy", spec.site_id, n,
                 int(np.sum(labels == 0)))
    return SiteDataset(images, labels, boxes, spec)


def split_train_val(dataset: SiteDataset, fraction: float = 0.8, seed: int = 0
                    ) -> tuple[SiteDataset, SiteDataset]:
    """Stratified split; per class round(fraction·n_c), keeping at least one
    sample on each side."""
    if len(dataset) < 5:
        raise DataError(f"cannot split {len(dataset)} samples, need >= 5")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < 2:
            raise DataError(
                f"class {c} of site {dataset.spec.site_id} has {len(members)} "
                f"sample(s), need >= 2 to split")
        members = rng.permutation(members)
        k = min(max(int(round(fraction * len(members))), 1), len(members) - 1)
        train.append(members[:k])
        val.append(members[k:])
    return (dataset.subset(np.sort(np.concatenate(train))),
            dataset.subset(np.sort(np.concatenate(val))))


@dataclass
class SamplerState(object):
    pools: list
    cursors: list
    rng: np.random.Generator
    batches_drawn: int = 0


class BalancedSampler(object):
    """Class-balanced batches drawn from per-class cycled permutations.

    One epoch has ceil(C·n_max / B) batches; smaller classes wrap around and
    are reshuffled each time their pool is exhausted.
    """

    def __init__(self, labels: np.ndarray, num_classes: int, batch_size: int,
                 seed: int):
        labels = np.asarray(labels)
        if batch_size < num_classes:
            raise DataError(
                f"batch size {batch_size} cannot hold {num_classes} classes")
        members = [np.flatnonzero(labels == c) for c in range(num_classes)]
        empty = [c for c, m in enumerate(members) if len(m) == 0]
        if empty:
            raise DataError(f"class(es) {empty} have no samples to sample from")
        rng = np.random.default_rng(seed)
        self.members = members
        self.num_classes = num_classes
        self.batch_size = batch_size
        self.state = SamplerState(pools=[rng.permutation(m) for m in members],
                                  cursors=[0] * num_classes, rng=rng)

    def __len__(self):
        return math.ceil(self.num_classes * max(len(m) for m in self.members)
                         / self.batch_size)

    def _take(self, c: int, k: int) -> np.ndarray:
        state = self.state
        out = []
        while k > 0:
            if state.cursors[c] == len(state.pools[c]):
                state.pools[c] = state.rng.permutation(self.members[c])
                state.cursors[c] = 0
            step = min(k, len(state.pools[c]) - state.cursors[c])
            out.append(state.pools[c][state.cursors[c]:state.cursors[c] + step])
            state.cursors[c] += step
            k -= step
        return np.concatenate(out)

    def composition(self, batch: int) -> np.ndarray:
        """Samples per class in the ``batch``-th batch."""
        counts = np.full(self.num_classes, self.batch_size // self.num_classes)
        extra = self.batch_size % self.num_classes
        counts[(batch + np.arange(extra)) % self.num_classes] += 1
        return counts

    def epoch(self) -> Iterator[np.ndarray]:
        for _ in range(len(self)):
            counts = self.composition(self.state.batches_drawn)
            batch = np.concatenate([self._take(c, int(k))
                                    for c, k in enumerate(counts)])
            self.state.batches_drawn += 1
            yield self.state.rng.permutation(batch)


def balanced_batches(dataset: SiteDataset, batch_size: int, seed: int,
                     num_classes: Optional[int] = None) -> Iterator[np.ndarray]:
    """One epoch of class-balanced index batches into ``dataset``."""
    if num_classes is None:
        num_classes = int(dataset.labels.max()) + 1
    return BalancedSampler(dataset.labels, num_classes, batch_size, seed).epoch()


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips, quarter turns (square images only) and brightness
    jitter of ±0.1."""
    out = np.empty_like(images)
    square = images.shape[-1] == images.shape[-2]
    for i, image in enumerate(images):
        if rng.random() < 0.5:
            image = image[..., ::-1]
        if rng.random() < 0.5:
            image = image[..., ::-1, :]
        if square:
            image = np.rot90(image, k=int(rng.integers(0, 4)), axes=(-2, -1))
        out[i] = np.clip(image + rng.uniform(-0.1, 0.1), 0.0, 1.0)
    return out


def site_specs(data: DataConfig) -> dict:
    """Train site specs (ids 1..N), the held-out test site and, when
    configured, the external site."""
    rng = np.random.default_rng(data.seed)
    specs = {}
    for i, (n, frac) in enumerate(zip(data.train_sizes, data.healthy_fractions)):
        shift = dict(brightness=rng.uniform(-0.1, 0.1),
                     contrast=rng.uniform(0.8, 1.2),
                     noise_std=rng.uniform(0.02, 0.05)) \
            if data.appearance_skew else {}
        specs[f"site{i + 1}"] = SiteSpec(i + 1, n, frac,
                                         seed=data.seed * 1000 + i + 1, **shift)
    specs[TEST_SITE] = SiteSpec(len(data.train_sizes) + 1, data.test_size,
                                data.test_healthy_fraction,
                                seed=data.seed * 1000 + len(data.train_sizes) + 1)
    if data.external_size > 0:
        specs[EXTERNAL_SITE] = SiteSpec(
            len(data.train_sizes) + 2, data.external_size,
            data.external_healthy_fraction, brightness=0.15, contrast=0.7,
            noise_std=0.06, seed=data.seed * 1000 + len(data.train_sizes) + 2)
    return specs


@dataclass
class FederatedData(object):
    train: list
    val: list
    test: SiteDataset
    external: Optional[SiteDataset] = None
    pretrain: Optional[SiteDataset] = None
    sites: dict = field(default_factory=dict)


def write_site(dataset: SiteDataset, directory: Union[str, Path], name: str
               ) -> Path:
    """Writes one PNM per sample and ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".pgm" if dataset.images.shape[1] == 1 else ".ppm"
    with open(directory / MANIFEST_NAME, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i, (image, label, box) in enumerate(zip(dataset.images,
                                                    dataset.labels,
                                                    dataset.boxes)):
            path = f"img_{i:05d}{suffix}"
            save_pnm(image, directory / path)
            writer.writerow([path, int(label), name]
                            + (list(box.as_tuple()) if box else ["", "", "", ""]))
    return directory


def load_site(directory: Union[str, Path], site_id: int = 0) -> SiteDataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    images, labels, boxes = [], [], []
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{manifest} has header {reader.fieldnames}, "
                            f"expected {MANIFEST_HEADER}")
        for row in reader:
            images.append(load_pnm(directory / row["path"]))
            labels.append(int(row["label"]))
            boxes.append(Box(*(int(row[k]) for k in MANIFEST_HEADER[3:]))
                         if row["box_x"] else None)
    if not labels:
        raise DataError(f"{manifest} lists no samples")
    labels = np.asarray(labels, dtype=np.int64)
    spec = SiteSpec(site_id, len(labels), float(np.mean(labels == 0)))
    return SiteDataset(np.stack(images), labels, boxes, spec)


def _generate(spec: SiteSpec, config: RunConfig) -> SiteDataset:
    backbone = config.backbone
    return generate_site(spec, tuple(backbone.image_size), backbone.num_classes,
                         backbone.in_channels, config.data.glyph_size)


def build_sites(config: RunConfig) -> FederatedData:
    """Generates (or loads from ``[data] dataset_dir``) the training sites,
    their validation splits, the test site and the optional external and
    warm-up sites."""
    data = config.data
    specs = site_specs(data)
    sites = {}
    for name, spec in specs.items():
        if data.dataset_dir:
            directory = Path(data.dataset_dir) / name
            if not directory.exists():
                if name == EXTERNAL_SITE:
                    continue
                raise DataError(f"dataset directory {directory} is missing")
            sites[name] = load_site(directory, spec.site_id)
        else:
            sites[name] = _generate(spec, config)
    train, val = [], []
    for i in range(config.federation.num_clients):
        t, v = split_train_val(sites[f"site{i + 1}"], data.train_fraction,
                               seed=data.seed + i)
        train.append(t)
        val.append(v)
    pretrain = None
    if config.backbone.freeze_mode is FreezeMode.WarmupPretrained:
        pretrain = _generate(SiteSpec(PRETRAIN_SITE_ID,
                                      config.backbone.warmup_samples, 0.5,
                                      seed=data.seed * 1000 + PRETRAIN_SITE_ID),
                             config)
    return FederatedData(train=train, val=val, test=sites[TEST_SITE],
                         external=sites.get(EXTERNAL_SITE), pretrain=pretrain,
                         sites=sites)
