"""FER-2013 ingestion, class weighting, augmentation and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .core import RngStream, Tensor

CLASS_NAMES = ("angry", "disgusted", "fearful", "happy", "neutral", "sad", "surprised")
N_CLASSES = len(CLASS_NAMES)
IMAGE_SIDE = 48
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE
USAGE_MAP = {"Training": "train", "PublicTest": "test", "PrivateTest": "test"}


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    usage: str = "train"

    def __post_init__(self):
        if self.pixels.size != N_PIXELS:
            raise DatasetError(f"image has {self.pixels.size} pixels, expected {N_PIXELS}")
        if not 0 <= self.label < N_CLASSES:
            raise DatasetError(f"label {self.label} outside [0, {N_CLASSES})")


@dataclass
class Split:
    images: np.ndarray  # (N, 48, 48) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Split":
        indices = np.asarray(indices)
        return Split(self.images[indices], self.labels[indices])

    def sample(self, i: int, usage: str = "train") -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]), usage)


@dataclass
class FerDataset:
    train: Split
    test: Split

    def save_npz(self, path) -> None:
        np.savez_compressed(path, train_x=(self.train.images * 255).round().astype(np.uint8), train_y=self.train.labels,
                            test_x=(self.test.images * 255).round().astype(np.uint8), test_y=self.test.labels)

    @classmethod
    def load_npz(cls, path) -> "FerDataset":
        with np.load(path) as z:
            return cls(Split(z["train_x"].astype(np.float32) / 255, z["train_y"].astype(np.int64)),
                       Split(z["test_x"].astype(np.float32) / 255, z["test_y"].astype(np.int64)))


def load_fer_csv(path) -> FerDataset:
    """Parse the ``emotion,pixels,Usage`` CSV (PublicTest and PrivateTest both go to test)."""
    images = {"train": [], "test": []}
    labels = {"train": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        try:
            i_label, i_pix, i_use = header.index("emotion"), header.index("pixels"), header.index("Usage")
        except ValueError as exc:
            raise DatasetError(f"{path}: header must contain emotion,pixels,Usage; got {header}") from exc
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                label = int(row[i_label])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {line}: bad label {row[i_label]!r}") from exc
            if not 0 <= label < N_CLASSES:
                raise DatasetError(f"{path}: line {line}: label {label} outside [0, {N_CLASSES - 1}]")
            usage = USAGE_MAP.get(row[i_use].strip())
            if usage is None:
                raise DatasetError(f"{path}: line {line}: unknown Usage {row[i_use]!r}")
            pix = np.array(row[i_pix].split(), dtype=np.int64)
            if pix.size != N_PIXELS:
                raise DatasetError(f"{path}: line {line}: {pix.size} pixels, expected {N_PIXELS}")
            if pix.min() < 0 or pix.max() > 255:
                raise DatasetError(f"{path}: line {line}: pixel values must lie in 0..255")
            images[usage].append(pix.astype(np.uint8))
            labels[usage].append(label)

    def stack(usage):
        if not images[usage]:
            return Split(np.zeros((0, IMAGE_SIDE, IMAGE_SIDE), np.float32), np.zeros(0, np.int64))
        x = np.stack(images[usage]).reshape(-1, IMAGE_SIDE, IMAGE_SIDE).astype(np.float32) / 255
        return Split(x, np.asarray(labels[usage], dtype=np.int64))

    return FerDataset(stack("train"), stack("test"))


def load_dataset(path) -> FerDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return FerDataset.load_npz(path) if path.suffix == ".npz" else load_fer_csv(path)


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported")
    if magic == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)[:w * h]
    else:
        raise DatasetError(f"{path}: not a PGM file (magic {magic!r})")
    if (h, w) != (IMAGE_SIDE, IMAGE_SIDE):
        raise DatasetError(f"{path}: image is {w}x{h}, expected {IMAGE_SIDE}x{IMAGE_SIDE}")
    return data.reshape(h, w).astype(np.float32) / maxval


def load_pgm_dir(path) -> Split:
    """Images under ``path/<class_name>/*.pgm``; unlabeled files directly under ``path`` get label -1."""
    path = Path(path)
    images, labels = [], []
    for f in sorted(path.rglob("*.pgm")):
        parent = f.parent.name
        images.append(_read_pgm(f))
        labels.append(CLASS_NAMES.index(parent) if parent in CLASS_NAMES else -1)
    if not images:
        return Split(np.zeros((0, IMAGE_SIDE, IMAGE_SIDE), np.float32), np.zeros(0, np.int64))
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64))


def class_weights(train_labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Balanced weights ``N / (C * n_c)``."""
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes)
    if counts.size > n_classes or np.any(counts == 0):
        missing = [c for c in range(n_classes) if counts[c] == 0]
        raise DatasetError(f"class(es) {missing} absent from the training labels")
    return counts.sum() / (n_classes * counts.astype(np.float64))


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentationConfig:
    enabled: bool = True
    crop_scale: Tuple[float, float] = (0.80, 1.0)
    rotation_deg: float = 15.0
    hflip_prob: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.15


@dataclass
class AugmentParams:
    crop_scale: float = 1.0
    crop_top: float = 0.0
    crop_left: float = 0.0
    angle_deg: float = 0.0
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0


def sample_augment_params(cfg: AugmentationConfig, rng: RngStream, side: int = IMAGE_SIDE) -> AugmentParams:
    g = rng.generator
    scale = g.uniform(*cfg.crop_scale)
    crop = side * math.sqrt(scale)
    return AugmentParams(
        crop_scale=scale,
        crop_top=g.uniform(0, side - crop),
        crop_left=g.uniform(0, side - crop),
        angle_deg=g.uniform(-cfg.rotation_deg, cfg.rotation_deg),
        flip=bool(g.random() < cfg.hflip_prob),
        brightness=g.uniform(-cfg.brightness, cfg.brightness),
        contrast=g.uniform(-cfg.contrast, cfg.contrast),
    )


def _bilinear(images: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (B, H, W) images at per-image float coordinates, replicating edges."""
    h, w = images.shape[1:]
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(rows).astype(np.int64), h - 2)
    c0 = np.minimum(np.floor(cols).astype(np.int64), w - 2)
    fr, fc = rows - r0, cols - c0
    b = np.arange(images.shape[0])[:, None, None]
    top = images[b, r0, c0] * (1 - fc) + images[b, r0, c0 + 1] * fc
    bottom = images[b, r0 + 1, c0] * (1 - fc) + images[b, r0 + 1, c0 + 1] * fc
    return top * (1 - fr) + bottom * fr


def apply_augment(images: np.ndarray, params: Sequence[AugmentParams]) -> np.ndarray:
    """Crop-resize -> rotate -> flip -> brightness -> contrast -> clamp, per image."""
    x = np.asarray(images, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    n, h, w = x.shape
    grid_r, grid_c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    scale = np.array([math.sqrt(p.crop_scale) for p in params])[:, None, None]
    top = np.array([p.crop_top for p in params])[:, None, None]
    left = np.array([p.crop_left for p in params])[:, None, None]
    x = _bilinear(x, top + (grid_r + 0.5) * scale - 0.5, left + (grid_c + 0.5) * scale - 0.5)

    theta = np.deg2rad([p.angle_deg for p in params])[:, None, None]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = grid_r - cy, grid_c - cx
    cos, sin = np.cos(theta), np.sin(theta)
    x = _bilinear(x, cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)

    flips = np.array([p.flip for p in params])
    x[flips] = x[flips, :, ::-1]
    x = x * (1 + np.array([p.brightness for p in params]))[:, None, None]
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = (x - mean) * (1 + np.array([p.contrast for p in params]))[:, None, None] + mean
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return x[0] if squeeze else x


def augment(sample: ImageSample, cfg: AugmentationConfig, rng: RngStream,
            params: Optional[AugmentParams] = None) -> ImageSample:
    if not cfg.enabled:
        return sample
    params = params if params is not None else sample_augment_params(cfg, rng)
    pixels = apply_augment(sample.pixels.reshape(IMAGE_SIDE, IMAGE_SIDE), [params])
    return ImageSample(pixels, sample.label, sample.usage)


def augment_batch(images: np.ndarray, indices: Sequence[int], cfg: AugmentationConfig, rng: RngStream,
                  epoch: int) -> np.ndarray:
    """Augment a batch; sample ``i`` draws from substream (epoch, i) of ``rng``."""
    if not cfg.enabled:
        return images
    params = [sample_augment_params(cfg, rng.substream(epoch, int(i)), images.shape[-1]) for i in indices]
    return apply_augment(images, params)


def batch_iter(split: Split, batch_size: int, rng: Optional[RngStream] = None, shuffle: bool = True,
               transform: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
               ) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Yield ``(x, labels)`` with x of shape (B, 1, H, W); the last partial batch is kept.

    ``transform(images, indices)`` runs on each batch before conversion.
    """
    n = len(split)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        images = split.images[idx]
        if transform is not None:
            images = transform(images, idx)
        yield Tensor(images[:, None].astype(np.float32), dtype=np.float32), split.labels[idx]


def synthetic_expressions(n_train: int, n_test: int, seed: int = 0, n_classes: int = N_CLASSES,
                          side: int = IMAGE_SIDE, noise: float = 0.08) -> FerDataset:
    """Stand-in dataset of class-specific blob patterns with jitter and noise.

    Shapes and value ranges match FER-2013 so the whole pipeline can run
    without the real images; it says nothing about accuracy on faces.
    """
    gen = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    protos = []
    for _ in range(n_classes):
        img = np.zeros((side, side))
        for _ in range(4):
            cy, cx = gen.uniform(0.2, 0.8, 2)
            s = gen.uniform(0.06, 0.15)
            img += gen.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        protos.append(img)
    protos = np.stack(protos)

    def make(n):
        labels = gen.integers(0, n_classes, n)
        labels[:n_classes] = np.arange(n_classes)[:n] if n else labels[:0]
        base = protos[labels]
        shifts = gen.integers(-3, 4, size=(n, 2))
        out = np.empty((n, side, side))
        for i in range(n):
            out[i] = np.roll(base[i], tuple(shifts[i]), axis=(0, 1))
        out = 0.5 + 0.3 * out * gen.uniform(0.7, 1.3, (n, 1, 1)) + gen.normal(0, noise, out.shape)
        return Split(np.clip(out, 0, 1).astype(np.float32), labels.astype(np.int64))

    return FerDataset(make(n_train), make(n_test))


def write_fer_csv(dataset: FerDataset, path) -> None:
    """Write a dataset back out in the FER-2013 CSV layout (test rows as PublicTest)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["emotion", "pixels", "Usage"])
        for split, usage in ((dataset.train, "Training"), (dataset.test, "PublicTest")):
            pix = (split.images.reshape(len(split), -1) * 255).round().astype(np.uint8)
            for label, row in zip(split.labels, pix):
                w.writerow([int(label), " ".join(map(str, row.tolist())), usage])


def stratified_subset(split: Split, n: int, rng: RngStream) -> Split:
    """Seeded subset of ``n`` samples keeping each class's share."""
    if n >= len(split):
        return split
    counts = np.bincount(split.labels, minlength=N_CLASSES)
    quota = np.maximum(1, np.floor(counts / counts.sum() * n)).astype(int)
    picks = []
    for c in range(N_CLASSES):
        members = np.flatnonzero(split.labels == c)
        if members.size:
            picks.append(rng.generator.choice(members, min(quota[c], members.size), replace=False))
    chosen = np.concatenate(picks)
    rest = np.setdiff1d(np.arange(len(split)), chosen)
    if chosen.size < n:
        chosen = np.concatenate([chosen, rng.generator.choice(rest, n - chosen.size, replace=False)])
    return split.subset(np.sort(chosen[:n]))
