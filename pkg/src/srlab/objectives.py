"""Training losses: cross-entropy, KL, spectral alignment, TRADES and MART."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .spectral import METRICS, fft1, spectral_distance

PROB_FLOOR = 1e-12

OBJECTIVES = (
    "natural", "lmodel", "at", "sar", "sarwa",
    "trades", "trades+sar", "trades+sarwa",
    "mart", "mart+sar", "mart+sarwa",
)

_ALIASES = {"l-model": "lmodel", "at+sar": "sar", "at+sarwa": "sarwa"}


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which loss to train with and its coefficients.

    ``sar_lambda`` weights the spectral alignment term, ``reg_lambda`` the
    TRADES/MART KL term; ``bandwidth`` is the low-pass width used by the
    L-model (``None``: half the image side).
    """

    kind: str = "at"
    sar_lambda: float = 0.1
    reg_lambda: float = 6.0
    metric: str = "l1"
    bandwidth: int = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        if self.sar_lambda < 0 or self.reg_lambda < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def base(self):
        return self.kind.split("+")[0] if "+" in self.kind else (
            "at" if self.kind in ("sar", "sarwa") else self.kind)

    @property
    def uses_sar(self):
        return self.kind.endswith("sar") or self.kind.endswith("sarwa")

    @property
    def uses_wa(self):
        return self.kind.endswith("sarwa")

    @property
    def adversarial(self):
        return self.kind not in ("natural", "lmodel")


def _labels(y, n_classes):
    y = np.asarray(y, dtype=np.intp)
    if y.ndim != 1 or (y < 0).any() or (y >= n_classes).any():
        raise IndexError(f"labels must lie in [0, {n_classes})")
    return y


def ce_loss(logits, y, reduction="mean"):
    """Cross-entropy of integer labels ``y`` under softmax(logits)."""
    y = _labels(y, logits.shape[1])
    nll = -T.take(T.log_softmax(logits), y)
    return nll.mean() if reduction == "mean" else nll.sum()


def kl_per_sample(p_logits, q_logits):
    """KL(softmax(p) || softmax(q)) for every row."""
    lp = T.log_softmax(p_logits)
    lq = T.log_softmax(q_logits)
    return (T.exp(lp) * (lp - lq)).sum(-1)


def kl_divergence(p_logits, q_logits):
    return kl_per_sample(p_logits, q_logits).mean()


def sar_term(f1_logits, f2_adv_logits, metric="l1", detach_f1=False):
    """Batch mean of the distance between the logit spectra of the natural
    branch and the adversarial branch."""
    if f1_logits.shape != f2_adv_logits.shape:
        raise ValueError(f"logit shapes differ: {f1_logits.shape} vs {f2_adv_logits.shape}")
    if detach_f1:
        f1_logits = T.detach(f1_logits)
    return spectral_distance(fft1(f1_logits), fft1(f2_adv_logits), metric).mean()


def sar_loss(f1_logits, f2_adv_logits, y, lam=0.1, metric="l1", detach_f1=False):
    """Adversarial cross-entropy plus ``lam`` times the spectral alignment term.

    With ``detach_f1`` the natural branch is treated as constant, which is how
    a frozen weight-averaged model is plugged in.
    """
    loss = ce_loss(f2_adv_logits, y)
    if lam == 0:
        return loss
    return loss + lam * sar_term(f1_logits, f2_adv_logits, metric, detach_f1)


def trades_loss(nat_logits, adv_logits, y, lam=6.0):
    loss = ce_loss(nat_logits, y)
    if lam == 0:
        return loss
    return loss + lam * kl_divergence(nat_logits, adv_logits)


def mart_bce(adv_logits, y):
    """Margin-boosted BCE: ``-log p_y - log(1 - max_{c != y} p_c)`` per row."""
    y = _labels(y, adv_logits.shape[1])
    p = T.softmax(adv_logits)
    p_true = T.take(p, y)
    onehot = np.zeros(adv_logits.shape, dtype=adv_logits.dtype)
    onehot[np.arange(len(y)), y] = 1
    # push the true class below every probability before taking the max
    p_other = T.max_(p - onehot * 2.0, axis=-1)
    return -T.log(T.clamp_min(p_true, PROB_FLOOR)) - T.log(T.clamp_min(1.0 - p_other, PROB_FLOOR))


def mart_loss(nat_logits, adv_logits, y, lam=6.0):
    """BCE on adversarial logits plus a KL term weighted by ``1 - p_y(x)``."""
    if nat_logits.shape != adv_logits.shape:
        raise ValueError(f"logit shapes differ: {nat_logits.shape} vs {adv_logits.shape}")
    bce = mart_bce(adv_logits, y).mean()
    if lam == 0:
        return bce
    y = _labels(y, nat_logits.shape[1])
    p_nat_true = T.take(T.softmax(nat_logits), y)
    weighted = kl_per_sample(nat_logits, adv_logits) * (1.0 - p_nat_true)
    return bce + lam * weighted.mean()
