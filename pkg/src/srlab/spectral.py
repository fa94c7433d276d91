"""FFT helpers, band filters and spectral distances.

Conventions used everywhere in the package:

* forward DFT is unnormalized, the inverse carries the ``1/(H*W)`` factor;
* the DC bin sits at ``(0, 0)`` before shifting and at ``(H//2, W//2)`` after;
* a band of width ``k`` covers rows/cols ``c - k//2 .. c - k//2 + k - 1``
  around the centre ``c = n//2`` of the relevant layout.

The low-pass filter keeps that patch of the *shifted* spectrum, the high-pass
filter keeps it in the *unshifted* layout, whose centre holds the highest
frequencies.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T

LOW_PASS = "low"
HIGH_PASS = "high"


@dataclass
class ComplexSpectrum:
    """Real and imaginary parts of a transform, as arrays or Tensors."""

    re: object
    im: object

    def __post_init__(self):
        if np.shape(self.re) != np.shape(self.im):
            raise ValueError("real and imaginary parts must have the same shape")

    @property
    def shape(self):
        return np.shape(self.re)

    def to_complex(self):
        return np.asarray(self.re) + 1j * np.asarray(self.im)

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    bandwidth: int

    def __post_init__(self):
        if self.kind not in (LOW_PASS, HIGH_PASS):
            raise ValueError(f"filter kind must be {LOW_PASS!r} or {HIGH_PASS!r}, got {self.kind!r}")
        if int(self.bandwidth) != self.bandwidth or self.bandwidth < 0:
            raise ValueError(f"bandwidth must be a non-negative integer, got {self.bandwidth!r}")

    def validate(self, H, W):
        if self.bandwidth > min(H, W):
            raise ValueError(f"bandwidth {self.bandwidth} exceeds image size {H}x{W}")

    def is_identity(self, H, W):
        return self.bandwidth == min(H, W)


def lpf(k):
    return FilterSpec(LOW_PASS, k)


def hpf(k):
    return FilterSpec(HIGH_PASS, k)


def _real(x):
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise T.NonFiniteError("non-finite input to a transform")
    return x


def fft2(x):
    """Unnormalized 2-D DFT over the last two axes."""
    return ComplexSpectrum.from_complex(np.fft.fft2(_real(x), axes=(-2, -1)))


def ifft2(s, tolerance=1e-3, return_residue=False):
    """Inverse of :func:`fft2`; returns the real part.

    Raises ``ValueError`` if the discarded imaginary part exceeds
    ``tolerance``, which means the spectrum was not conjugate-symmetric.
    """
    z = np.fft.ifft2(s.to_complex(), axes=(-2, -1))
    residue = float(np.abs(z.imag).max(initial=0.0))
    if residue > tolerance:
        raise ValueError(f"ifft2: imaginary residue {residue:.3g} exceeds {tolerance:g}")
    out = np.ascontiguousarray(z.real)
    return (out, residue) if return_residue else out


def fftshift(s):
    """Move the DC bin from ``(0, 0)`` to ``(H//2, W//2)``."""
    return ComplexSpectrum(np.fft.fftshift(np.asarray(s.re), axes=(-2, -1)),
                           np.fft.fftshift(np.asarray(s.im), axes=(-2, -1)))


def ifftshift(s):
    return ComplexSpectrum(np.fft.ifftshift(np.asarray(s.re), axes=(-2, -1)),
                           np.fft.ifftshift(np.asarray(s.im), axes=(-2, -1)))


def band_slice(n, k):
    start = n // 2 - k // 2
    return slice(start, start + k)


@lru_cache(maxsize=256)
def filter_mask(kind, k, H, W):
    """Boolean keep-mask in the *unshifted* DFT layout."""
    m = np.zeros((H, W), dtype=bool)
    m[band_slice(H, k), band_slice(W, k)] = True
    if kind == LOW_PASS:
        m = np.fft.ifftshift(m)
    m.setflags(write=False)
    return m


def _filter_array(x, spec):
    H, W = x.shape[-2], x.shape[-1]
    spec.validate(H, W)
    if spec.is_identity(H, W):
        return x.copy()
    if spec.bandwidth == 0:
        return np.zeros_like(x)
    mask = filter_mask(spec.kind, spec.bandwidth, H, W)
    z = np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * mask, axes=(-2, -1))
    # even sizes make the band asymmetric; the imaginary part is dropped
    return np.ascontiguousarray(z.real, dtype=x.dtype)


@T.register_op("band_filter")
class _BandFilter:
    # Re(F^-1 M F) with a real diagonal M is self-adjoint, so the backward
    # pass is the same filter applied to the incoming gradient.
    @staticmethod
    def forward(ctx, x, spec):
        ctx["spec"] = spec
        return _filter_array(x, spec)

    @staticmethod
    def backward(ctx, g, needs):
        return (_filter_array(g, ctx["spec"]),)


def apply_filter(x, spec):
    """Low- or high-pass filter each channel of ``(..., H, W)`` input.

    Arrays in, arrays out; Tensors go through the autodiff op.
    """
    if isinstance(x, T.Tensor):
        return T.forward(T.active_tape(), "band_filter", [x], spec=spec)
    x = _real(x)
    if x.dtype.kind != "f":
        x = x.astype(T.get_default_dtype())
    return _filter_array(x, spec)


# 1-D transform of logit vectors (differentiable) ----------------------------

@T.register_op("fft_re")
class _FFTRe:
    @staticmethod
    def forward(ctx, x):
        return np.ascontiguousarray(np.fft.fft(x, axis=-1).real, dtype=x.dtype)

    @staticmethod
    def backward(ctx, g, needs):
        # adjoint of Re(F) is Re(conj-transform) = Re(N * ifft(g))
        n = g.shape[-1]
        return (np.ascontiguousarray((np.fft.ifft(g, axis=-1) * n).real, dtype=g.dtype),)


@T.register_op("fft_im")
class _FFTIm:
    @staticmethod
    def forward(ctx, x):
        return np.ascontiguousarray(np.fft.fft(x, axis=-1).imag, dtype=x.dtype)

    @staticmethod
    def backward(ctx, g, needs):
        n = g.shape[-1]
        return (np.ascontiguousarray((np.fft.ifft(1j * g, axis=-1) * n).real, dtype=g.dtype),)


def fft1(v):
    """Unnormalized DFT along the last axis of a real Tensor (batched)."""
    v = v if isinstance(v, T.Tensor) else T.Tensor(v)
    if v.shape[-1] < 1:
        raise ValueError("fft1 needs at least one element")
    tape = T.active_tape()
    return ComplexSpectrum(T.forward(tape, "fft_re", [v]), T.forward(tape, "fft_im", [v]))


METRICS = ("l1", "l2", "cosine")


def spectral_distance(a, b, metric="l1"):
    """Distance between two spectra, reduced over the last axis.

    Leading axes are treated as batch axes, so a ``(n, C)`` pair gives ``n``
    distances and a ``(C,)`` pair gives a scalar.

    * ``l1``: sum of absolute differences of the real parts plus the same for
      the imaginary parts;
    * ``l2``: Euclidean norm of the real-part difference plus that of the
      imaginary-part difference;
    * ``cosine``: one minus the cosine similarity of the concatenated
      ``(re, im)`` vectors.
    """
    if a.shape != b.shape:
        raise ValueError(f"spectral_distance: shape mismatch {a.shape} vs {b.shape}")
    are, aim, bre, bim = (x if isinstance(x, T.Tensor) else T.Tensor(x)
                          for x in (a.re, a.im, b.re, b.im))
    if metric == "l1":
        return T.abs_(are - bre).sum(-1) + T.abs_(aim - bim).sum(-1)
    if metric == "l2":
        dre, dim = are - bre, aim - bim
        return T.sqrt((dre * dre).sum(-1)) + T.sqrt((dim * dim).sum(-1))
    if metric == "cosine":
        na2 = (are * are).sum(-1) + (aim * aim).sum(-1)
        nb2 = (bre * bre).sum(-1) + (bim * bim).sum(-1)
        if (na2.data == 0).any() or (nb2.data == 0).any():
            raise ValueError("cosine distance is undefined for a zero spectrum")
        dot = (are * bre).sum(-1) + (aim * bim).sum(-1)
        return 1.0 - dot / T.sqrt(na2 * nb2)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def power_spectrum(x):
    """Channel-averaged DFT magnitude of a ``(C, H, W)`` or ``(H, W)`` input,
    zero frequency at the centre."""
    x = _real(x)
    if x.ndim == 2:
        x = x[None]
    mag = np.abs(np.fft.fft2(x, axes=(-2, -1))).mean(axis=0)
    return np.fft.fftshift(mag)


def low_frequency_ratio(spectrum_map):
    """Mass of the central ``H/2 x W/2`` window over the total mass of a
    centred magnitude map."""
    m = np.asarray(spectrum_map, dtype=np.float64)
    H, W = m.shape
    total = m.sum()
    if total == 0:
        return 0.0
    return float(m[band_slice(H, H // 2), band_slice(W, W // 2)].sum() / total)
