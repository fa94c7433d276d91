"""L-infinity PGD and Fourier-basis corruptions."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .objectives import ce_loss

EPS_DEFAULT = 8 / 255
ALPHA_DEFAULT = 2 / 255


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = EPS_DEFAULT
    alpha: float = ALPHA_DEFAULT
    steps: int = 10
    random_start: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("epsilon, alpha and steps must be non-negative")
        if self.norm != "linf":
            raise ValueError("only the L-infinity ball is supported")

    @classmethod
    def pgd10(cls, **kw):
        return cls(steps=10, **kw)

    @classmethod
    def pgd20(cls, **kw):
        return cls(steps=20, **kw)


def input_gradient(net, x, y):
    """Gradient of the summed cross-entropy with respect to the input batch."""
    with T.Tape() as tape:
        xt = tape.watch(T.Tensor(x))
        loss = ce_loss(net(xt), y, reduction="sum")
    (g,) = T.backward(tape, loss, [xt])
    return g


def pgd(net, x, y, cfg, rng=None):
    """Projected sign-gradient ascent on the cross-entropy.

    Each step moves by ``alpha * sign(grad)``, projects back onto the
    ``epsilon`` ball around ``x`` and clips to ``[0, 1]``. Returns
    ``(x_adv, delta)`` with ``x_adv == clip(x + delta, 0, 1)`` exactly.
    """
    x = np.asarray(x)
    if cfg.epsilon == 0 or (cfg.steps == 0 and not cfg.random_start):
        return x.copy(), np.zeros_like(x)
    dt = x.dtype.type
    eps, alpha = dt(cfg.epsilon), dt(cfg.alpha)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        start = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
        x_adv = np.clip(x + start, 0, 1)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(net, x_adv, y)
        step = x_adv + alpha * np.sign(g)
        x_adv = np.clip(x + np.clip(step - x, -eps, eps), 0, 1)
    delta = x_adv - x
    return np.clip(x + delta, 0, 1), delta


# Fourier-basis noise ---------------------------------------------------------

@dataclass(frozen=True)
class FourierBasisSpec:
    """Frequency ``(i, j)``, magnitude ``v`` and optional fixed per-channel signs."""

    i: int
    j: int
    v: float
    signs: tuple = None


def fourier_basis(i, j, H, W, rng=None):
    """Real ``H x W`` matrix of unit Frobenius norm whose DFT is supported on
    ``(i, j)`` and ``(-i mod H, -j mod W)``.

    When the two bins differ the phase is drawn from ``rng``; a self-symmetric
    bin only admits a real coefficient and the phase is fixed at zero.
    """
    if not (0 <= i < H and 0 <= j < W):
        raise ValueError(f"frequency ({i}, {j}) outside a {H}x{W} grid")
    spec = np.zeros((H, W), dtype=np.complex128)
    i2, j2 = (-i) % H, (-j) % W
    if (i2, j2) == (i, j):
        spec[i, j] = 1.0
    else:
        phase = 0.0 if rng is None else rng.uniform(0.0, 2 * np.pi)
        spec[i, j] = np.exp(1j * phase)
        spec[i2, j2] = np.exp(-1j * phase)
    u = np.fft.ifft2(spec).real
    return u / np.linalg.norm(u)


def fourier_corrupt(x, spec, rng):
    """``clip(x + r * v * U_ij)`` with an independent sign and basis draw per
    channel of a ``(C, H, W)`` image."""
    x = np.asarray(x)
    C, H, W = x.shape
    out = np.empty_like(x)
    for c in range(C):
        r = spec.signs[c] if spec.signs is not None else (1.0 if rng.random() < 0.5 else -1.0)
        u = fourier_basis(spec.i, spec.j, H, W, rng)
        out[c] = x[c] + (r * spec.v * u).astype(x.dtype)
    return np.clip(out, 0, 1)
