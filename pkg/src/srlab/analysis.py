"""Diagnostics: band-filter sweeps, perturbation spectra and Fourier heat maps."""
import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, FourierBasisSpec, fourier_corrupt
from .checkpoint import atomic_write_bytes
from .rng import substream
from .spectral import apply_filter, hpf, low_frequency_ratio, lpf, power_spectrum
from .training import EVAL_BATCH, accuracy, evaluate, perturbations

DEFAULT_HEATMAP_V = 0.06
DEFAULT_HEATMAP_SAMPLES = 256


@dataclass
class SweepResult:
    """Accuracy curves over a list of bandwidths.

    ``curves`` maps a column name to one accuracy per bandwidth; ``extras``
    holds per-model scalars (such as PGD-20 accuracy) that are appended as
    trailing columns of the CSV.
    """

    bandwidths: list
    curves: dict
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        b = list(self.bandwidths)
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError("bandwidths must be strictly increasing")
        for name, col in self.curves.items():
            if len(col) != len(b):
                raise ValueError(f"curve {name!r} has {len(col)} points for {len(b)} bandwidths")
            if any(not 0 <= a <= 100 for a in col):
                raise ValueError(f"curve {name!r} has accuracies outside [0, 100]")
        if any(not 0 <= a <= 100 for a in self.extras.values()):
            raise ValueError("extra columns must be accuracies in [0, 100]")

    def column(self, name, bandwidth):
        return self.curves[name][list(self.bandwidths).index(bandwidth)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bandwidth", *self.curves, *self.extras])
        for r, k in enumerate(self.bandwidths):
            w.writerow([k, *(repr(float(c[r])) for c in self.curves.values()),
                        *(repr(float(v)) for v in self.extras.values())])
        return buf.getvalue()

    def to_dict(self):
        return {"bandwidths": list(self.bandwidths), "curves": {k: list(v) for k, v in self.curves.items()},
                "extras": dict(self.extras), "metadata": dict(self.metadata)}

    def save(self, path):
        atomic_write_bytes(path, self.to_csv().encode())


# raster maps -----------------------------------------------------------------------

@dataclass
class _RasterMap:
    values: np.ndarray

    def _meta(self):
        return {}

    def sidecar(self):
        v = np.asarray(self.values, dtype=np.float64)
        finite = v[np.isfinite(v)]
        vmax = float(finite.max()) if finite.size else 0.0
        return {"kind": type(self).__name__, "height": int(v.shape[0]), "width": int(v.shape[1]),
                "max_value": vmax, "scale": vmax / 65535.0, "centered": True,
                "missing_cells": int((~np.isfinite(v)).sum()), **self._meta()}

    def to_pgm(self):
        """16-bit binary PGM; the map maximum maps to 65535, missing cells to 0."""
        v = np.asarray(self.values, dtype=np.float64)
        vmax = self.sidecar()["max_value"]
        scaled = np.zeros(v.shape) if vmax <= 0 else np.where(np.isfinite(v), v / vmax * 65535.0, 0.0)
        pix = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
        header = f"P5\n{v.shape[1]} {v.shape[0]}\n65535\n".encode("ascii")
        return header + pix.tobytes()

    def save(self, path):
        """Write ``path`` (PGM) and ``path`` with a ``.json`` suffix."""
        atomic_write_bytes(path, self.to_pgm())
        atomic_write_bytes(os.path.splitext(path)[0] + ".json",
                           json.dumps(self.sidecar(), indent=2).encode())


def read_pgm(path):
    """Read a 16-bit PGM written by :meth:`_RasterMap.save` back into integers."""
    with open(path, "rb") as f:
        raw = f.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"65535":
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.int64)


@dataclass
class SpectrumMap(_RasterMap):
    """Average DFT magnitude of perturbations, zero frequency at the centre."""

    n_samples: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or (self.values < 0).any():
            raise ValueError("spectrum map must be a non-negative 2-D array")

    @property
    def low_frequency_ratio(self):
        return low_frequency_ratio(self.values)

    def _meta(self):
        return {"n_samples": self.n_samples, "low_frequency_ratio": self.low_frequency_ratio}


@dataclass
class HeatMap(_RasterMap):
    """Error rate (%) under Fourier-basis noise per frequency, centred.

    Cells skipped by a strided lattice hold NaN.
    """

    v: float = DEFAULT_HEATMAP_V
    n_samples: int = 0
    model_id: str = ""
    clean_error: float = 0.0
    stride: int = 1

    def __post_init__(self):
        v = self.values[np.isfinite(self.values)]
        if self.values.ndim != 2 or (v < 0).any() or (v > 100).any():
            raise ValueError("heat map cells must be error rates in [0, 100]")

    def _meta(self):
        return {"v": self.v, "n_samples": self.n_samples, "model_id": self.model_id,
                "clean_error": self.clean_error, "stride": self.stride, "unit": "percent error"}


# protocols ---------------------------------------------------------------------------

def _check_bandwidths(bandwidths, H, W):
    bandwidths = [int(k) for k in bandwidths]
    for k in bandwidths:
        lpf(k).validate(H, W)
    return bandwidths


def lpf_accuracy_sweep(models, dataset, bandwidths, attack=None, seed=0, batch_size=EVAL_BATCH):
    """Clean accuracy of each model on low-pass filtered inputs.

    ``models`` maps a name to a Network. One column per model, plus a trailing
    ``<name>_pgd20`` column holding unfiltered robust accuracy under
    ``attack`` (PGD-20 by default; pass ``attack=False`` to skip it).
    """
    H, W = dataset.image_shape[-2:]
    bandwidths = _check_bandwidths(bandwidths, H, W)
    if attack is None:
        attack = AttackConfig.pgd20()
    curves, extras = {}, {}
    for name, net in models.items():
        curves[name] = [evaluate(net, dataset, input_filter=lpf(k)) for k in bandwidths]
    if attack:
        for name, net in models.items():
            extras[f"{name}_pgd20"] = evaluate(net, dataset, attack=attack, seed=seed, batch_size=batch_size)
    meta = {"protocol": "lpf-inputs", "dataset": dataset.split, "n": len(dataset),
            "attack": vars(attack) if attack else None, "seed": seed}
    return SweepResult(bandwidths, curves, extras, meta)


def band_aggressiveness(net, dataset, attack, bandwidths, seed=0, batch_size=EVAL_BATCH):
    """Robust accuracy when only a band of each perturbation is applied.

    Perturbations are generated once against unfiltered inputs, then low- or
    high-pass filtered, added back and clipped. Returns ``lpf`` and ``hpf``
    curves; ``metadata`` carries the clean and full-perturbation accuracies.
    """
    H, W = dataset.image_shape[-2:]
    bandwidths = _check_bandwidths(bandwidths, H, W)
    x, y = dataset.images, dataset.labels
    delta = perturbations(net, x, y, attack, seed, batch_size)
    curves = {"lpf": [], "hpf": []}
    for k in bandwidths:
        for name, spec in (("lpf", lpf(k)), ("hpf", hpf(k))):
            curves[name].append(accuracy(net, np.clip(x + apply_filter(delta, spec), 0, 1), y))
    meta = {"protocol": "perturbation-bands", "dataset": dataset.split, "n": len(dataset),
            "attack": vars(attack), "seed": seed,
            "clean": accuracy(net, x, y), "robust": accuracy(net, np.clip(x + delta, 0, 1), y)}
    return SweepResult(bandwidths, curves, {}, meta)


def perturbation_spectrum(net, dataset, attack, n_samples=None, seed=0, batch_size=EVAL_BATCH):
    """Mean centred DFT magnitude of PGD perturbations on the first
    ``n_samples`` images."""
    n = len(dataset) if n_samples is None else int(n_samples)
    if not 0 < n <= len(dataset):
        raise ValueError(f"n_samples must lie in [1, {len(dataset)}]")
    x, y = dataset.images[:n], dataset.labels[:n]
    delta = perturbations(net, x, y, attack, seed, batch_size)
    acc = np.zeros(dataset.image_shape[-2:], dtype=np.float64)
    for d in delta:
        acc += power_spectrum(d.astype(np.float64))
    return SpectrumMap(acc / n, n)


def _heat_cell(net, x, y, i, j, v, seed):
    rng = substream(seed, f"heatmap/i={i}/j={j}")
    spec = FourierBasisSpec(i, j, v)
    xc = np.stack([fourier_corrupt(img, spec, rng) for img in x])
    return 100.0 - accuracy(net, xc, y)


def fourier_heatmap(net, dataset, v=DEFAULT_HEATMAP_V, n_samples=DEFAULT_HEATMAP_SAMPLES, seed=0,
                    stride=1, workers=1, model_id=""):
    """Error rate under Fourier-basis noise of magnitude ``v`` at every
    frequency, returned zero-frequency-centred.

    Each cell draws its signs and phases from an rng derived from
    ``(seed, i, j)`` so the result does not depend on evaluation order or
    ``workers``. With ``stride > 1`` only the lattice ``i, j = 0 mod stride``
    of the unshifted grid is evaluated.
    """
    if v < 0:
        raise ValueError("v must be non-negative")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = min(int(n_samples), len(dataset))
    x, y = dataset.images[:n], dataset.labels[:n]
    H, W = dataset.image_shape[-2:]
    cells = [(i, j) for i in range(0, H, stride) for j in range(0, W, stride)]

    def run(cell):
        return _heat_cell(net, x, y, cell[0], cell[1], v, seed)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            errors = list(pool.map(run, cells))
    else:
        errors = [run(c) for c in cells]
    grid = np.full((H, W), np.nan)
    for (i, j), e in zip(cells, errors):
        grid[i, j] = e
    return HeatMap(np.fft.fftshift(grid), v, n, model_id, 100.0 - accuracy(net, x, y), stride)
