"""Small convolutional classifiers and weight averaging."""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``layers`` is a sequence of tuples: ``("conv", out_channels, kernel)``,
    ``("relu",)``, ``("maxpool",)``, ``("avgpool",)``, ``("flatten",)``,
    ``("dense", units)`` and the parameter-free ``("normalize", mean, std)``.
    Convolutions use "same" zero padding. A dense layer flattens its input
    implicitly.
    """

    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))

    def param_shapes(self):
        """Ordered ``{name: shape}``; raises ModelSpecError on a bad chain."""
        if not self.layers:
            raise ModelSpecError("model needs at least one layer")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelSpecError(f"input shape must be (C, H, W), got {self.input_shape}")
        shapes = {}
        c, h, w = self.input_shape
        flat = None
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                if flat is not None:
                    raise ModelSpecError(f"layer {i}: conv after flatten")
                out, k = int(layer[1]), int(layer[2])
                if k % 2 == 0 or k > min(h, w) + 2 * (k // 2):
                    raise ModelSpecError(f"layer {i}: kernel {k} must be odd and fit the input")
                shapes[f"conv{i}.weight"] = (out, c, k, k)
                shapes[f"conv{i}.bias"] = (out,)
                c = out
            elif kind in ("maxpool", "avgpool"):
                if flat is not None or h < 2 or w < 2:
                    raise ModelSpecError(f"layer {i}: cannot pool a {h}x{w} map")
                h, w = h // 2, w // 2
            elif kind == "relu":
                pass
            elif kind == "normalize":
                if flat is not None or float(layer[2]) <= 0:
                    raise ModelSpecError(f"layer {i}: normalize needs a positive std on image input")
            elif kind == "flatten":
                flat = c * h * w if flat is None else flat
            elif kind == "dense":
                fan_in = c * h * w if flat is None else flat
                units = int(layer[1])
                shapes[f"dense{i}.weight"] = (fan_in, units)
                shapes[f"dense{i}.bias"] = (units,)
                flat = units
            else:
                raise ModelSpecError(f"layer {i}: unknown kind {kind!r}")
        if flat != self.num_classes:
            raise ModelSpecError(f"network emits {flat if flat is not None else c * h * w} "
                                 f"features, expected {self.num_classes} classes")
        return shapes

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "layers": [list(l) for l in self.layers],
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(tuple(l) for l in d["layers"]), int(d["num_classes"]))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def default_spec(input_shape=(1, 16, 16), num_classes=2, normalize=None):
    """conv(8)-relu-pool, conv(16)-relu-pool, dense(classes).

    ``normalize=(mean, std)`` prepends a fixed input standardization.
    """
    pre = (("normalize", float(normalize[0]), float(normalize[1])),) if normalize else ()
    return ModelSpec(
        input_shape,
        pre + (("conv", 8, 3), ("relu",), ("maxpool",),
         ("conv", 16, 3), ("relu",), ("maxpool",),
         ("dense", num_classes)),
        num_classes,
    )


def count_params(spec):
    return int(sum(np.prod(s) for s in spec.param_shapes().values()))


def build_model(spec, seed=0, dtype=None):
    """Fan-in scaled uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Returns an ordered ``{name: ndarray}``; identical seeds give bit-identical
    parameters.
    """
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    shapes = spec.param_shapes()
    for name, shape in shapes.items():
        layer = name.split(".")[0]
        wshape = shapes[layer + ".weight"]
        fan_in = int(np.prod(wshape[1:])) if layer.startswith("conv") else wshape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def forward(spec, params, x):
    """Logits of ``spec`` with parameters ``params`` (arrays or Tensors)."""
    h = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if tuple(h.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {h.shape[1:]} does not match model {spec.input_shape}")
    for i, layer in enumerate(spec.layers):
        kind = layer[0]
        if kind == "conv":
            h = T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], pad=int(layer[2]) // 2)
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "normalize":
            h = (h - float(layer[1])) * (1.0 / float(layer[2]))
        elif kind == "maxpool":
            h = T.maxpool2(h)
        elif kind == "avgpool":
            h = T.avgpool2(h)
        elif kind == "flatten":
            h = T.flatten(h)
        elif kind == "dense":
            if h.ndim != 2:
                h = T.flatten(h)
            h = T.matmul(h, params[f"dense{i}.weight"]) + params[f"dense{i}.bias"]
    return h


def argmax(logits):
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.asarray(logits).argmax(axis=1)


class Network:
    """A spec bound to a parameter set."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec, seed=0, dtype=None):
        return cls(spec, build_model(spec, seed, dtype))

    def __call__(self, x, params=None):
        return forward(self.spec, self.params if params is None else params, x)

    def logits(self, x, batch_size=512):
        x = np.asarray(x)
        outs = [forward(self.spec, self.params, x[i:i + batch_size]).data
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.num_classes))

    def predict(self, x, batch_size=512):
        return argmax(self.logits(x, batch_size))

    def copy(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})


def predict_logits(net, x):
    return net(x)


# weight averaging ----------------------------------------------------------

@dataclass
class WAState:
    """Running arithmetic mean of parameter snapshots.

    ``count`` is the number of snapshots absorbed so far.
    """

    params: dict = None
    count: int = 0
    start_epoch: int = 0
    cycle_length: int = 1
    history: list = field(default_factory=list, repr=False)


def wa_update(state, params, epoch=None):
    """Absorb one snapshot: ``avg <- (avg * k + params) / (k + 1)``."""
    if state.params is None:
        new = {k: np.array(v, copy=True) for k, v in params.items()}
    else:
        if set(state.params) != set(params):
            raise ModelSpecError("weight-average parameter names do not match the snapshot")
        k = state.count
        new = {}
        for name, avg in state.params.items():
            p = np.asarray(params[name])
            if p.shape != avg.shape:
                raise ModelSpecError(f"{name}: shape {p.shape} does not match average {avg.shape}")
            new[name] = ((avg * k + p) / (k + 1)).astype(avg.dtype)
    hist = state.history + ([epoch] if epoch is not None else [])
    return WAState(new, state.count + 1, state.start_epoch, state.cycle_length, hist)
