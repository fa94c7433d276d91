"""Finite-difference audit of every differentiable op and composite loss.

Inputs are drawn away from kinks (ReLU/abs at zero, ties in max and pooling)
so that central differences with ``h = 1e-3`` stay on one linear piece.
"""
import numpy as np

from . import tensor as T
from .models import ModelSpec, build_model, forward
from .objectives import ce_loss, mart_loss, sar_loss, sar_term, trades_loss
from .rng import substream
from .spectral import apply_filter, fft1, hpf, lpf, spectral_distance

TOLERANCE = 1e-6
STEP = 1e-3


def _away(rng, shape, gap=0.1):
    """Normal draws pushed at least ``gap`` away from zero."""
    z = rng.standard_normal(shape)
    return np.sign(z) * (gap + np.abs(z))


def _distinct(rng, shape):
    """Entries separated by at least 0.01, so max/argmax is stable under ``h``."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005 + 0.002).reshape(shape)


def _leaf(a, name):
    return T.Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=name)


def primitive_cases(rng):
    """``{name: (loss_fn, leaves)}`` covering every registered primitive."""
    w2 = rng.standard_normal((2, 3, 4))  # fixed weights turn outputs into scalars

    def dot(out, w):
        return (out * w).sum()

    a, b = _leaf(rng.standard_normal((2, 3, 4)), "a"), _leaf(rng.standard_normal((2, 3, 4)), "b")
    # central differences carry an O(h^2) truncation error proportional to the
    # third derivative; arguments well away from zero keep it below tolerance
    pos = _leaf(rng.uniform(2.0, 4.0, (2, 3, 4)), "pos")
    kink = _leaf(_away(rng, (2, 3, 4)), "x")
    cases = {
        "add": (lambda a, b: dot(a + b, w2), [a, b]),
        "sub": (lambda a, b: dot(a - b, w2), [a, b]),
        "mul": (lambda a, b: dot(a * b, w2), [a, b]),
        "div": (lambda a, p: dot(a / p, w2), [a, pos]),
        "scale": (lambda a: dot(a * 1.7, w2), [a]),
        "shift": (lambda a: dot(a + 0.3, w2), [a]),
        "relu": (lambda x: dot(T.relu(x), w2), [kink]),
        "abs": (lambda x: dot(T.abs_(x), w2), [kink]),
        "exp": (lambda a: dot(T.exp(a), w2), [a]),
        "log": (lambda p: dot(T.log(p), w2), [pos]),
        "sqrt": (lambda p: dot(T.sqrt(p), w2), [pos]),
        "clamp_min": (lambda x: dot(T.clamp_min(x, 0.0), w2), [kink]),
        "sum": (lambda a: (T.sum_(a, axis=1) * w2[:, 0]).sum(), [a]),
        "mean": (lambda a: (T.mean(a, axis=-1) * w2[..., 0]).sum(), [a]),
        "max": (lambda d: (T.max_(d, axis=-1) * w2[..., 0]).sum(), [_leaf(_distinct(rng, (2, 3, 4)), "d")]),
        "reshape": (lambda a: (T.reshape(a, (6, 4)) * w2.reshape(6, 4)).sum(), [a]),
        "log_softmax": (lambda a: dot(T.log_softmax(a), w2), [a]),
        "take": (lambda m: (T.take(m, np.array([0, 2, 1])) * np.array([1.0, -2.0, 0.5])).sum(),
                 [_leaf(rng.standard_normal((3, 4)), "m")]),
    }
    A, B = _leaf(rng.standard_normal((3, 4)), "A"), _leaf(rng.standard_normal((4, 2)), "B")
    wm = rng.standard_normal((3, 2))
    cases["matmul"] = (lambda A, B: (T.matmul(A, B) * wm).sum(), [A, B])

    x = _leaf(rng.standard_normal((2, 2, 5, 5)), "x")
    k = _leaf(rng.standard_normal((3, 2, 3, 3)) * 0.3, "w")
    bias = _leaf(rng.standard_normal(3), "bias")
    wc = rng.standard_normal((2, 3, 5, 5))
    cases["conv2d"] = (lambda x, k, b: (T.conv2d(x, k, b, pad=1) * wc).sum(), [x, k, bias])
    pool_in = _leaf(_distinct(rng, (2, 2, 4, 4)), "p")
    wp = rng.standard_normal((2, 2, 2, 2))
    cases["maxpool2"] = (lambda p: (T.maxpool2(p) * wp).sum(), [pool_in])
    cases["avgpool2"] = (lambda p: (T.avgpool2(p) * wp).sum(), [_leaf(rng.standard_normal((2, 2, 4, 4)), "p")])

    img = _leaf(rng.standard_normal((2, 1, 8, 8)), "img")
    wi = rng.standard_normal((2, 1, 8, 8))
    cases["band_filter_low"] = (lambda v: (apply_filter(v, lpf(3)) * wi).sum(), [img])
    cases["band_filter_high"] = (lambda v: (apply_filter(v, hpf(4)) * wi).sum(), [img])
    vec = _leaf(3.0 * rng.standard_normal((3, 5)), "v")
    wf = rng.standard_normal((3, 5))
    cases["fft_re"] = (lambda v: (fft1(v).re * wf).sum(), [vec])
    cases["fft_im"] = (lambda v: (fft1(v).im * wf).sum(), [vec])
    u = _leaf(3.0 * rng.standard_normal((3, 5)), "u")
    for metric in ("l1", "l2", "cosine"):
        cases[f"spectral_distance_{metric}"] = (
            lambda v, u, m=metric: spectral_distance(fft1(v), fft1(u), m).sum(), [vec, u])
    return cases


LINEAR_SPEC = ModelSpec((1, 1, 2), (("dense", 3),), 3)
CONV_SPEC = ModelSpec((1, 4, 4), (("conv", 2, 3), ("relu",), ("avgpool",), ("dense", 3)), 3)


KINK_MARGIN = 0.05
RELU_MARGIN = 0.005  # one weight moved by h shifts a pre-activation by <= h * max|x|
PARAM_SCALE = 3.0


def _spectral_margin(f1, f2):
    """Smallest non-structural gap between two logit spectra (L1 kinks)."""
    d = np.fft.fft(f1, axis=-1) - np.fft.fft(f2, axis=-1)
    parts = np.concatenate([d.real.ravel(), d.imag[..., 1:].ravel()])
    return np.abs(parts).min()


def _runner_up_margin(logits, y):
    """Gap between the two largest wrong-class probabilities (MART max)."""
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    p[np.arange(len(y)), y] = -1
    top = np.sort(p, axis=-1)[:, -2:]
    return (top[:, 1] - top[:, 0]).min()


def _relu_margin(spec, params, x):
    if spec is not CONV_SPEC:
        return np.inf
    z = T.conv2d(T.Tensor(x), params["conv0.weight"], params["conv0.bias"], pad=1).data
    return np.abs(z).min()


def _draw_params(rng, spec):
    params = build_model(spec, seed=int(rng.integers(2**31)), dtype=np.float64)
    return {k: v * PARAM_SCALE for k, v in params.items()}


def _draw_loss_point(rng, spec, shape):
    """Parameters and inputs that keep every kink out of reach of ``h``."""
    for _ in range(1000):
        params, frozen_params = _draw_params(rng, spec), _draw_params(rng, spec)
        x = rng.uniform(0.0, 1.0, shape)
        x_adv = np.clip(x + rng.uniform(-0.3, 0.3, shape), 0, 1)
        y = rng.integers(0, spec.num_classes, shape[0])
        f_nat = forward(spec, params, x).data
        f_adv = forward(spec, params, x_adv).data
        f_frz = forward(spec, frozen_params, x).data
        margin = min(_spectral_margin(f_nat, f_adv), _spectral_margin(f_frz, f_adv),
                     _runner_up_margin(f_adv, y))
        relu = min(_relu_margin(spec, params, x), _relu_margin(spec, params, x_adv))
        if margin > KINK_MARGIN and relu > RELU_MARGIN:
            return params, f_frz, x, x_adv, y
    raise RuntimeError("could not draw a kink-free audit point")


def loss_cases(rng):
    """Composite objectives on a 6-weight linear net and on a small conv net,
    differentiated with respect to every parameter."""
    cases = {}
    for tag, spec, shape in (("linear", LINEAR_SPEC, (4, 1, 1, 2)), ("conv", CONV_SPEC, (4, 1, 4, 4))):
        params, frozen, x, x_adv, y = _draw_loss_point(rng, spec, shape)
        names = list(params)
        leaves = [_leaf(params[n], n) for n in names]

        def logits(inp, ls, spec=spec, names=names):
            return forward(spec, dict(zip(names, ls)), inp)

        cases[f"{tag}/ce"] = (lambda *ls, x=x, y=y, f=logits: ce_loss(f(x, ls), y), leaves)
        for metric in ("l1", "l2", "cosine"):
            cases[f"{tag}/sar_{metric}"] = (
                lambda *ls, m=metric, x=x, xa=x_adv, y=y, f=logits:
                sar_loss(f(x, ls), f(xa, ls), y, 0.1, m), leaves)
        cases[f"{tag}/sarwa"] = (
            lambda *ls, xa=x_adv, y=y, f=logits, fz=frozen:
            sar_loss(T.Tensor(fz), f(xa, ls), y, 0.15, "l1", detach_f1=True), leaves)
        cases[f"{tag}/trades"] = (
            lambda *ls, x=x, xa=x_adv, y=y, f=logits: trades_loss(f(x, ls), f(xa, ls), y, 6.0), leaves)
        cases[f"{tag}/mart"] = (
            lambda *ls, x=x, xa=x_adv, y=y, f=logits: mart_loss(f(x, ls), f(xa, ls), y, 6.0), leaves)
        cases[f"{tag}/trades+sar"] = (
            lambda *ls, x=x, xa=x_adv, y=y, f=logits:
            trades_loss(f(x, ls), f(xa, ls), y, 6.0) + 0.1 * sar_term(f(x, ls), f(xa, ls)), leaves)
        cases[f"{tag}/mart+sar"] = (
            lambda *ls, x=x, xa=x_adv, y=y, f=logits:
            mart_loss(f(x, ls), f(xa, ls), y, 6.0) + 0.1 * sar_term(f(x, ls), f(xa, ls)), leaves)
    return cases


def run_audit(seed=0, tolerance=TOLERANCE, h=STEP, include_losses=True):
    """Grad-check every case in 64-bit; returns ``{case: GradCheckReport}``."""
    rng = substream(seed, "gradcheck")
    with T.default_dtype(np.float64):
        cases = primitive_cases(rng)
        if include_losses:
            cases.update(loss_cases(rng))
        return {name: T.grad_check(fn, leaves, tolerance, h) for name, (fn, leaves) in cases.items()}


def summarize(reports):
    worst = max(reports, key=lambda k: reports[k].max_error)
    return {"ok": all(r.ok for r in reports.values()), "cases": len(reports),
            "max_rel_error": reports[worst].max_error, "worst_case": worst,
            "reports": {k: r.to_dict() for k, r in reports.items()}}
