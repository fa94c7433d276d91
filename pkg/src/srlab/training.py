"""Training loop for natural, L-model, adversarial and SAR/SARWA objectives,
plus accuracy evaluation under attacks and band filters."""
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .data import augment as augment_batch
from .models import Network, WAState, build_model, default_spec, wa_update
from .objectives import ObjectiveConfig, ce_loss, mart_loss, sar_term, trades_loss
from .rng import child_seed, substream
from .spectral import apply_filter, lpf

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (22, 27)
    train_attack: AttackConfig = field(default_factory=AttackConfig.pgd10)
    eval_attack: AttackConfig = field(default_factory=AttackConfig.pgd20)
    seed: int = 0
    augment: bool = False
    eval_samples: int = None

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing")
        if self.epochs and any(m >= self.epochs for m in self.milestones):
            raise ValueError("milestones must be smaller than the epoch count")

    @property
    def reg_start(self):
        """Last epoch before SAR/WA switch on (the first learning-rate drop)."""
        return self.milestones[0] if self.milestones else 0

    def lr_at(self, epoch):
        return self.lr * 0.1 ** sum(epoch > m for m in self.milestones)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objective"] = ObjectiveConfig(**d["objective"])
        d["train_attack"] = AttackConfig(**d["train_attack"])
        d["eval_attack"] = AttackConfig(**d["eval_attack"])
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    ce_term: float
    sar_term: float
    clean_acc: float
    robust_acc: float
    wa_clean_acc: float = None
    wa_robust_acc: float = None


CSV_FIELDS = ("epoch", "lr", "loss", "clean_acc", "robust_acc", "sar_term")


@dataclass
class TrainReport:
    records: list
    best_epoch: int
    selection: str
    wall_time: float = 0.0
    config: dict = None

    @property
    def best(self):
        return next(r for r in self.records if r.epoch == self.best_epoch)

    @property
    def final(self):
        return self.records[-1]

    def to_dict(self):
        return {"best_epoch": self.best_epoch, "selection": self.selection,
                "wall_time": self.wall_time, "config": self.config,
                "epochs": [asdict(r) for r in self.records]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.clean_acc),
                        repr(r.robust_acc), repr(r.sar_term)])
        return buf.getvalue()


@dataclass
class TrainResult:
    report: TrainReport
    net: Network
    best_net: Network
    wa: WAState


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, epoch, last_good):
        super().__init__(msg)
        self.epoch = epoch
        self.last_good = last_good


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        dt = next(iter(params.values())).dtype.type
        m, wd, lr = dt(self.momentum), dt(self.weight_decay), dt(lr)
        for k, p in params.items():
            g = grads[k] + wd * p
            b = self.buf[k]
            b *= m
            b += g
            p -= lr * b


# Recipe for the behavioral runs on the synthetic set: a fixed input
# standardization in front of the default net, and a smaller step than the
# full-scale schedule, which stalls the tiny model at chance.
BEHAVIOR_NORMALIZE = (0.5, 0.1)


def behavior_config(kind, seed=0, **overrides):
    """Desk-scale TrainConfig for objective ``kind`` (SARWA uses lambda 0.15)."""
    lam = 0.15 if kind.endswith("sarwa") else 0.1
    kw = dict(objective=ObjectiveConfig(kind, sar_lambda=lam), lr=0.03, batch_size=32,
              seed=seed, eval_samples=100)
    kw.update(overrides)
    return TrainConfig(**kw)


def behavior_spec(input_shape=(1, 16, 16), num_classes=2):
    return default_spec(input_shape, num_classes, normalize=BEHAVIOR_NORMALIZE)


# evaluation ----------------------------------------------------------------------

def accuracy(net, x, y):
    if len(y) == 0:
        return 0.0
    return 100.0 * float((net.predict(x) == np.asarray(y)).mean())


def perturbations(net, x, y, attack, seed=0, batch_size=EVAL_BATCH):
    """PGD perturbations for a whole set, one named rng stream per batch."""
    deltas = np.zeros_like(x)
    for b, s in enumerate(range(0, len(x), batch_size)):
        rng = substream(seed, f"eval/pgd/batch={b}")
        _, deltas[s:s + batch_size] = pgd(net, x[s:s + batch_size], y[s:s + batch_size], attack, rng)
    return deltas


def evaluate(net, dataset, attack=None, input_filter=None, perturbation_filter=None,
             seed=0, batch_size=EVAL_BATCH):
    """Top-1 accuracy (%) of ``net`` on ``dataset``.

    ``input_filter`` band-filters the clean images first. With ``attack`` set,
    PGD perturbations are generated against ``net``, optionally band-filtered
    by ``perturbation_filter``, added back and clipped to ``[0, 1]``.
    """
    x, y = dataset.images, dataset.labels
    H, W = x.shape[-2:]
    for f in (input_filter, perturbation_filter):
        if f is not None:
            f.validate(H, W)
    if input_filter is not None:
        x = apply_filter(x, input_filter)
        if attack is not None:
            x = np.clip(x, 0, 1)
    if attack is None:
        return accuracy(net, x, y)
    delta = perturbations(net, x, y, attack, seed, batch_size)
    if perturbation_filter is not None:
        delta = apply_filter(delta, perturbation_filter)
    return accuracy(net, np.clip(x + delta, 0, 1), y)


# training -----------------------------------------------------------------------

def _eval_pair(net, ds, cfg):
    return evaluate(net, ds), evaluate(net, ds, attack=cfg.eval_attack, seed=child_seed(cfg.seed, "val"))


def train(cfg, train_set, val_set, spec=None, on_epoch=None):
    """Run ``cfg.epochs`` epochs and return a :class:`TrainResult`.

    The returned ``best_net`` is the epoch with the highest validation PGD
    accuracy for adversarial objectives and the highest clean accuracy for
    natural/L-model training.
    """
    t0 = time.perf_counter()
    obj = cfg.objective
    spec = spec or default_spec(train_set.image_shape, train_set.num_classes)
    dtype = train_set.images.dtype
    net = Network(spec, build_model(spec, child_seed(cfg.seed, "init"), dtype))
    opt = SGD(net.params, cfg.momentum, cfg.weight_decay)
    wa = WAState(start_epoch=cfg.reg_start + 1)
    bandwidth = obj.bandwidth or train_set.image_shape[-1] // 2
    val = val_set if cfg.eval_samples is None else val_set.head(cfg.eval_samples)
    selection = "robust" if obj.adversarial else "clean"

    clean, robust = _eval_pair(net, val, cfg)
    records = [EpochRecord(0, cfg.lr_at(0), float("nan"), float("nan"), 0.0, clean, robust)]
    best_epoch, best_score = 0, None
    best_params = {k: v.copy() for k, v in net.params.items()}

    N = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        reg_on = obj.uses_sar and epoch > cfg.reg_start
        if obj.uses_wa and reg_on and wa.params is None:
            wa = wa_update(wa, net.params, epoch=epoch - 1)
        wa_net = Network(spec, wa.params) if wa.params is not None else None
        last_good = {k: v.copy() for k, v in net.params.items()}
        order = substream(cfg.seed, f"shuffle/epoch={epoch}").permutation(N)
        tot = ce_tot = sar_tot = 0.0
        nb = 0
        try:
            for b, s in enumerate(range(0, N, cfg.batch_size)):
                idx = order[s:s + cfg.batch_size]
                xb, yb = train_set.images[idx], train_set.labels[idx]
                if cfg.augment:
                    xb = augment_batch(xb, substream(cfg.seed, f"augment/epoch={epoch}/batch={b}"))
                if obj.kind == "lmodel":
                    xb = apply_filter(xb, lpf(bandwidth))
                if obj.adversarial:
                    xa, _ = pgd(net, xb, yb, cfg.train_attack,
                                substream(cfg.seed, f"pgd/epoch={epoch}/batch={b}"))
                loss, ce_val, sar_val, grads = _step_loss(net, wa_net, obj, xb, xa if obj.adversarial else None,
                                                          yb, reg_on)
                opt.step(net.params, grads, lr)
                tot += loss
                ce_tot += ce_val
                sar_tot += sar_val
                nb += 1
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch, last_good) from exc

        if obj.uses_wa and reg_on:
            wa = wa_update(wa, net.params, epoch=epoch)
        clean, robust = _eval_pair(net, val, cfg)
        rec = EpochRecord(epoch, lr, tot / max(nb, 1), ce_tot / max(nb, 1), sar_tot / max(nb, 1),
                          clean, robust)
        if obj.uses_wa and wa.params is not None:
            rec.wa_clean_acc, rec.wa_robust_acc = _eval_pair(Network(spec, wa.params), val, cfg)
        records.append(rec)
        score = robust if selection == "robust" else clean
        if best_score is None or score > best_score:
            best_epoch, best_score = epoch, score
            best_params = {k: v.copy() for k, v in net.params.items()}
        log.info("epoch %d lr %.4g loss %.4f clean %.2f robust %.2f", epoch, lr, rec.loss, clean, robust)
        if on_epoch is not None:
            on_epoch(rec)

    report = TrainReport(records, best_epoch, selection, time.perf_counter() - t0, cfg.to_dict())
    return TrainResult(report, net, Network(spec, best_params), wa)


def _step_loss(net, wa_net, obj, x, x_adv, y, reg_on):
    """Build the objective on a fresh tape; returns (loss, ce, sar, grads)."""
    with T.Tape() as tape:
        params = {k: tape.watch(T.Tensor(v)) for k, v in net.params.items()}
        sar_val = 0.0
        nat_logits = None
        if obj.kind in ("natural", "lmodel"):
            loss = ce = ce_loss(net(x, params), y)
        else:
            adv_logits = net(x_adv, params)
            if obj.base == "at":
                loss = ce = ce_loss(adv_logits, y)
            elif obj.base == "trades":
                nat_logits = net(x, params)
                loss = trades_loss(nat_logits, adv_logits, y, obj.reg_lambda)
                ce = ce_loss(nat_logits, y)
            else:
                nat_logits = net(x, params)
                loss = mart_loss(nat_logits, adv_logits, y, obj.reg_lambda)
                ce = ce_loss(adv_logits, y)
            if reg_on and obj.sar_lambda > 0:
                if obj.uses_wa:
                    f1 = wa_net(x)  # frozen branch, no tape leaves
                    term = sar_term(f1, adv_logits, obj.metric, detach_f1=True)
                else:
                    f1 = nat_logits if nat_logits is not None else net(x, params)
                    term = sar_term(f1, adv_logits, obj.metric)
                loss = loss + obj.sar_lambda * term
                sar_val = float(term.data)
    names = list(params)
    grads = dict(zip(names, T.backward(tape, loss, [params[k] for k in names])))
    return float(loss.data), float(ce.data), sar_val, grads
