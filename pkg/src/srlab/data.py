"""Datasets: CIFAR-10 binary batches, a synthetic two-band set, augmentation
and stratified splitting."""
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .spectral import band_slice

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W in [0, 1]
    labels: np.ndarray  # N ints
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError("images must be N x C x H x W with one label each")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.split)


# CIFAR-10 ---------------------------------------------------------------------

def read_cifar_batch(path, split="train"):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return Dataset(images, labels, 10, split)


def _concat(parts, split):
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), parts[0].num_classes, split)


def load_cifar10(directory=None):
    """Read the binary CIFAR-10 distribution; returns ``(train, test)``."""
    directory = directory or os.environ.get("SRL_DATA_DIR", ".")
    for candidate in (directory, os.path.join(directory, "cifar-10-batches-bin")):
        if os.path.exists(os.path.join(candidate, CIFAR_TEST_FILE)):
            directory = candidate
            break
    paths = [os.path.join(directory, f) for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    train = _concat([read_cifar_batch(p, "train") for p in paths[:-1]], "train")
    test = read_cifar_batch(paths[-1], "test")
    return train, test


# synthetic two-band set ---------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    """Knobs of :func:`synth_freq_dataset`, in [0, 1] pixel units.

    ``band_flip`` is the probability that an image is drawn from the other
    class's band while keeping its label. At zero the two classes are exactly
    separable by band.
    """

    low_amplitude: float = 0.12
    high_amplitude: float = 0.12
    noise: float = 0.02
    n_components: int = 4
    background: float = 0.5
    band_flip: float = 0.0


# Preset used for the natural-vs-adversarial behavioral runs. A single strong
# component per image is learnable under PGD training; a few mislabeled bands
# force natural training to memorize, which is what leaves it brittle.
BEHAVIOR_PARAMS = SynthParams(low_amplitude=0.15, high_amplitude=0.15, noise=0.05,
                              n_components=1, band_flip=0.06)


def _band_bins(size, low):
    """Frequency bins (unshifted index pairs) for one class.

    The low band is the centred ``size/4`` window of the shifted spectrum minus
    DC; the high band is every bin with a signed frequency of magnitude at
    least ``size/4`` along some axis.
    """
    freqs = np.fft.fftfreq(size, d=1.0 / size).astype(int)
    sl = band_slice(size, size // 4)
    low_set = set(np.fft.fftshift(freqs)[sl])
    bins = []
    for a in range(size):
        for b in range(size):
            fa, fb = freqs[a], freqs[b]
            if (fa, fb) == (0, 0):
                continue
            if low:
                if fa in low_set and fb in low_set:
                    bins.append((a, b))
            elif max(abs(fa), abs(fb)) >= size // 4:
                bins.append((a, b))
    return bins


def _pattern(bins, size, n_components, rng):
    spec = np.zeros((size, size), dtype=np.complex128)
    for idx in rng.choice(len(bins), size=n_components, replace=False):
        a, b = bins[idx]
        c = np.exp(1j * rng.uniform(0, 2 * np.pi))
        spec[a, b] += c
        spec[(-a) % size, (-b) % size] += np.conj(c)
    img = np.fft.ifft2(spec).real
    return img / np.abs(img).max()


def synth_freq_dataset(n, size=16, seed=0, params=SynthParams(), dtype=np.float32):
    """Balanced two-class images that differ only in spectral band.

    Class 0 is a random superposition of low-frequency bins, class 1 the same
    construction over the mid/high band. Both share the mean intensity, so a
    DC-only view carries no label information.
    """
    if n % 2:
        raise DatasetError("n must be even for a balanced two-class set")
    if size < 4 or size & (size - 1):
        raise DatasetError("size must be a power of two >= 4")
    rng = np.random.default_rng(seed)
    bands = (_band_bins(size, True), _band_bins(size, False))
    labels = np.repeat(np.arange(2), n // 2)
    rng.shuffle(labels)
    images = np.empty((n, 1, size, size), dtype=np.float64)
    for k, y in enumerate(labels):
        band = 1 - y if rng.random() < params.band_flip else y
        amp = params.high_amplitude if band else params.low_amplitude
        img = params.background + amp * _pattern(bands[band], size, params.n_components, rng)
        img += params.noise * rng.standard_normal((size, size))
        images[k, 0] = img
    return Dataset(np.clip(images, 0, 1).astype(dtype), labels, 2, "synthetic")


def save_dataset(path, ds):
    checkpoint.save_tensors(path, {
        "images": ds.images,
        "labels": ds.labels.astype(np.float64),
        "num_classes": np.array([ds.num_classes], dtype=np.float64),
    })


def load_dataset(path, split="train"):
    t = checkpoint.load_tensors(path)
    return Dataset(t["images"], t["labels"].astype(np.int64), int(t["num_classes"][0]), split)


# augmentation and splitting --------------------------------------------------------

PAD = 4


def augment(batch, rng, pad=PAD, offsets=None, flips=None):
    """Zero-pad by ``pad``, random-crop back to size, flip with probability 1/2.

    ``offsets`` (N x 2) and ``flips`` (N bools) override the random draws.
    """
    batch = np.asarray(batch)
    N, C, H, W = batch.shape
    if H != W:
        raise DatasetError("augment expects square images")
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(N, 2))
    if flips is None:
        flips = rng.random(N) < 0.5
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for k in range(N):
        oi, oj = offsets[k]
        crop = padded[k, :, oi:oi + H, oj:oj + W]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return out


def split(ds, seed=0, val_fraction=0.1):
    """Stratified 9:1 train/validation partition."""
    if len(ds) < 10:
        raise DatasetError("need at least 10 samples to split")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 10:
            raise DatasetError(f"class {c} has only {len(idx)} samples")
        idx = rng.permutation(idx)
        nv = int(round(len(idx) * val_fraction))
        val_idx.append(idx[:nv])
        train_idx.append(idx[nv:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return ds.subset(tr, "train"), ds.subset(va, "validation")
