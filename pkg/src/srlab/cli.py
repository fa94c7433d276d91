"""``srlab`` command line: train, attack and run the spectral diagnostics.

Every run writes its artifacts plus ``run.json`` (the fully resolved
configuration) into ``--out``. Exit codes: 0 success, 1 runtime failure,
2 bad command line, 3 invalid configuration, 4 missing input file,
5 unreadable checkpoint. Errors are a single JSON line on stderr.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import __version__, kernels
from .attacks import AttackConfig
from .checkpoint import Checkpoint, CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .data import BEHAVIOR_PARAMS, load_cifar10, split, synth_freq_dataset
from .models import Network, default_spec
from .objectives import METRICS, OBJECTIVES, ObjectiveConfig
from .rng import child_seed
from .spectral import lpf

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
SUBCOMMANDS = ("train", "attack", "sweep", "aggressiveness", "spectrum", "heatmap", "gradcheck")
_EVAL = ("attack", "sweep", "aggressiveness", "spectrum", "heatmap")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


# name, type, default, subcommands, help
OPTIONS = [
    ("dataset", str, "synth", SUBCOMMANDS[:-1], "cifar10 or synth"),
    ("seed", int, 0, SUBCOMMANDS, "master seed"),
    ("out", str, None, SUBCOMMANDS, "output directory (default runs/<subcommand>)"),
    ("workers", int, 1, SUBCOMMANDS, "parallel workers for analysis cells"),
    ("train_size", int, 800, ("train",), "synthetic training-set size"),
    ("test_size", int, 400, _EVAL, "synthetic test-set size / CIFAR test subset"),
    ("objective", str, "at", ("train",), "training objective"),
    ("epochs", int, 30, ("train",), "training epochs"),
    ("batch_size", int, None, ("train",), "minibatch size"),
    ("lr", float, None, ("train",), "initial learning rate"),
    ("milestones", _int_list, None, ("train",), "learning-rate drop epochs, e.g. 22,27"),
    ("lambda", float, None, ("train",), "SAR coefficient"),
    ("reg_lambda", float, 6.0, ("train",), "TRADES/MART coefficient"),
    ("metric", str, "l1", ("train",), "spectral distance: l1, l2 or cosine"),
    ("bandwidth", int, None, ("train",), "L-model low-pass bandwidth"),
    ("epsilon", float, 8 / 255, ("train",) + _EVAL, "L-inf radius"),
    ("alpha", float, 2 / 255, ("train",) + _EVAL, "PGD step size"),
    ("steps", int, None, ("train",) + _EVAL, "PGD steps (train 10, eval 20)"),
    ("checkpoint", str, None, _EVAL, "model checkpoint; sweep accepts a comma list"),
    ("bandwidths", _int_list, None, ("sweep", "aggressiveness"), "comma-separated bandwidths"),
    ("samples", int, None, ("spectrum", "heatmap"), "images per spectrum / heat-map cell"),
    ("v", float, 0.06, ("heatmap",), "Fourier-noise magnitude"),
    ("stride", int, 1, ("heatmap",), "evaluate every stride-th frequency"),
]
_OPT = {o[0]: o for o in OPTIONS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="srlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"srlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for cmd in SUBCOMMANDS:
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat TOML (or run.json) file; flags override it")
        for name, typ, default, cmds, help_ in OPTIONS:
            if cmd not in cmds:
                continue
            flag = "--" + name.replace("_", "-")
            kw = {"type": typ, "help": f"{help_} (default: {default})"}
            if name == "dataset":
                kw["choices"] = ("cifar10", "synth")
            elif name == "objective":
                kw["choices"] = OBJECTIVES + ("l-model", "at+sar", "at+sarwa")
            elif name == "metric":
                kw["choices"] = METRICS
            p.add_argument(flag, dest=name, **kw)
    return parser


def _read_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if path.endswith(".json"):
            doc = json.loads(raw)
            doc = doc.get("config", doc)
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    return doc


def resolve(argv):
    """Parse ``argv`` into ``(command, config dict)``; defaults < file < flags."""
    ns = build_parser().parse_args(argv)
    if ns.command is None:
        raise UsageError("missing subcommand; expected one of " + ", ".join(SUBCOMMANDS))
    given = {k: v for k, v in vars(ns).items() if k != "command"}
    file_cfg = _read_config(given.pop("config")) if "config" in given else {}
    cfg = {name: default for name, _, default, cmds, _ in OPTIONS if ns.command in cmds}
    for key, value in file_cfg.items():
        key = key.replace("-", "_")
        if key in ("command", "subcommand"):
            continue
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} for {ns.command}")
        try:
            cfg[key] = None if value is None else _OPT[key][1](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    cfg.update(given)
    if cfg["out"] is None:
        cfg["out"] = os.path.join("runs", ns.command)
    _validate(ns.command, cfg)
    return ns.command, cfg


def _validate(cmd, cfg):
    def bad(msg):
        raise ConfigError(msg)

    if cfg.get("dataset") not in (None, "cifar10", "synth"):
        bad(f"unknown dataset {cfg['dataset']!r}")
    if cfg["workers"] < 1:
        bad("workers must be >= 1")
    for key in ("train_size", "test_size", "epochs", "samples", "stride", "batch_size", "steps"):
        if cfg.get(key) is not None and cfg[key] < (0 if key in ("epochs", "steps") else 1):
            bad(f"{key} must be positive")
    for key in ("epsilon", "alpha", "v", "lr", "lambda", "reg_lambda"):
        if cfg.get(key) is not None and cfg[key] < 0:
            bad(f"{key} must be non-negative")
    if cmd in _EVAL and not cfg.get("checkpoint"):
        bad(f"{cmd} needs --checkpoint")
    if cmd == "train" and cfg["dataset"] == "synth" and cfg["train_size"] % 2:
        bad("train_size must be even for the balanced synthetic set")
    if cmd in _EVAL and cfg["dataset"] == "synth" and cfg["test_size"] % 2:
        bad("test_size must be even for the balanced synthetic set")


# datasets and checkpoints --------------------------------------------------------------

def _train_data(cfg):
    if cfg["dataset"] == "synth":
        full = synth_freq_dataset(cfg["train_size"], seed=child_seed(cfg["seed"], "data/train"),
                                  params=BEHAVIOR_PARAMS)
        return split(full, seed=child_seed(cfg["seed"], "data/split"))
    train_set, _ = load_cifar10()
    return split(train_set, seed=child_seed(cfg["seed"], "data/split"))


def _test_data(cfg):
    if cfg["dataset"] == "synth":
        return synth_freq_dataset(cfg["test_size"], seed=child_seed(cfg["seed"], "data/test"),
                                  params=BEHAVIOR_PARAMS)
    _, test = load_cifar10()
    return test.head(cfg["test_size"])


def _load_net(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    return Network(ck.spec, ck.params)


def _attack(cfg, default_steps):
    steps = cfg["steps"] if cfg.get("steps") is not None else default_steps
    try:
        return AttackConfig(epsilon=cfg["epsilon"], alpha=cfg["alpha"], steps=steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# subcommands -------------------------------------------------------------------------------

def cmd_train(cfg):
    from .training import TrainConfig, behavior_spec

    synth = cfg["dataset"] == "synth"
    kind = cfg["objective"]
    lam = cfg["lambda"] if cfg["lambda"] is not None else (0.15 if kind.endswith("sarwa") else 0.1)
    try:
        obj = ObjectiveConfig(kind, sar_lambda=lam, reg_lambda=cfg["reg_lambda"],
                              metric=cfg["metric"], bandwidth=cfg["bandwidth"])
        epochs = cfg["epochs"]
        milestones = cfg["milestones"]
        if milestones is None:
            # the desk schedule's 22/27-of-30 drops, scaled to the epoch count
            milestones = sorted({min(round(epochs * r), epochs - 1) for r in (22 / 30, 27 / 30)}) \
                if epochs >= 2 else ()
        tc = TrainConfig(
            objective=obj, epochs=epochs, milestones=tuple(milestones), seed=cfg["seed"],
            batch_size=cfg["batch_size"] or (32 if synth else 64),
            lr=cfg["lr"] if cfg["lr"] is not None else (0.03 if synth else 0.1),
            train_attack=_attack(cfg, 10), eval_attack=_attack({**cfg, "steps": None}, 20),
            augment=not synth, eval_samples=100 if synth else 1000)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train_set, val_set = _train_data(cfg)
    if obj.bandwidth is not None:
        try:
            lpf(obj.bandwidth).validate(*train_set.image_shape[-2:])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    spec = behavior_spec(train_set.image_shape, train_set.num_classes) if synth else \
        default_spec(train_set.image_shape, train_set.num_classes)

    from .training import train
    result = train(tc, train_set, val_set, spec=spec)
    out = cfg["out"]
    extra = {"objective": obj.kind, "dataset": cfg["dataset"], "best_epoch": result.report.best_epoch}
    for name, net, epoch in (("final.ckpt", result.net, tc.epochs),
                             ("best.ckpt", result.best_net, result.report.best_epoch)):
        save_checkpoint(Checkpoint(spec, net.params, epoch, {"seed": cfg["seed"]}, tc.digest(), extra),
                        os.path.join(out, name))
    if result.wa.params is not None:
        save_checkpoint(Checkpoint(spec, result.wa.params, tc.epochs, {"seed": cfg["seed"]}, tc.digest(),
                                   {**extra, "weight_average": result.wa.count}),
                        os.path.join(out, "wa.ckpt"))
    atomic_write_bytes(os.path.join(out, "report.json"), result.report.to_json().encode())
    atomic_write_bytes(os.path.join(out, "report.csv"), result.report.to_csv().encode())
    final = result.report.final
    return {"best_epoch": result.report.best_epoch, "final_clean": final.clean_acc,
            "final_robust": final.robust_acc}


def cmd_attack(cfg):
    from .training import accuracy, perturbations

    net = _load_net(cfg["checkpoint"])
    ds = _test_data(cfg)
    attack = _attack(cfg, 20)
    delta = perturbations(net, ds.images, ds.labels, attack, seed=child_seed(cfg["seed"], "attack"))
    x_adv = np.clip(ds.images + delta, 0, 1)
    summary = {"clean_acc": accuracy(net, ds.images, ds.labels),
               "robust_acc": accuracy(net, x_adv, ds.labels),
               "max_linf": float(np.abs(delta).max(initial=0.0)), "n": len(ds)}
    _write_json(os.path.join(cfg["out"], "attack.json"), summary)
    return summary


def _bandwidths(cfg, ds):
    if cfg["bandwidths"]:
        return cfg["bandwidths"]
    size = min(ds.image_shape[-2:])
    return sorted({0, 1, *range(2, size + 1, 2)})


def _column_names(paths):
    """File stems, qualified by the parent directory when two stems collide."""
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    return [f"{os.path.basename(os.path.dirname(os.path.abspath(p)))}-{s}" if stems.count(s) > 1 else s
            for p, s in zip(paths, stems)]


def cmd_sweep(cfg):
    from .analysis import lpf_accuracy_sweep

    paths = [p for p in cfg["checkpoint"].split(",") if p]
    models = {name: _load_net(p) for name, p in zip(_column_names(paths), paths)}
    if len(models) != len(paths):
        raise ConfigError("checkpoints must be distinct files")
    ds = _test_data(cfg)
    try:
        res = lpf_accuracy_sweep(models, ds, _bandwidths(cfg, ds), attack=_attack(cfg, 20),
                                 seed=child_seed(cfg["seed"], "sweep"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res.save(os.path.join(cfg["out"], "sweep.csv"))
    return {"rows": len(res.bandwidths), "extras": res.extras}


def cmd_aggressiveness(cfg):
    from .analysis import band_aggressiveness

    net = _load_net(cfg["checkpoint"])
    ds = _test_data(cfg)
    try:
        res = band_aggressiveness(net, ds, _attack(cfg, 20), _bandwidths(cfg, ds),
                                  seed=child_seed(cfg["seed"], "aggressiveness"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res.save(os.path.join(cfg["out"], "aggressiveness.csv"))
    return {"rows": len(res.bandwidths), "clean": res.metadata["clean"], "robust": res.metadata["robust"]}


def cmd_spectrum(cfg):
    from .analysis import perturbation_spectrum

    net = _load_net(cfg["checkpoint"])
    ds = _test_data(cfg)
    n = cfg["samples"] or len(ds)
    if n > len(ds):
        raise ConfigError(f"samples ({n}) exceeds the dataset size ({len(ds)})")
    m = perturbation_spectrum(net, ds, _attack(cfg, 20), n, seed=child_seed(cfg["seed"], "spectrum"))
    m.save(os.path.join(cfg["out"], "spectrum.pgm"))
    return {"low_frequency_ratio": m.low_frequency_ratio, "n_samples": n}


def cmd_heatmap(cfg):
    from .analysis import DEFAULT_HEATMAP_SAMPLES, fourier_heatmap

    net = _load_net(cfg["checkpoint"])
    ds = _test_data(cfg)
    hm = fourier_heatmap(net, ds, v=cfg["v"], n_samples=cfg["samples"] or DEFAULT_HEATMAP_SAMPLES,
                         seed=child_seed(cfg["seed"], "heatmap"), stride=cfg["stride"],
                         workers=cfg["workers"], model_id=os.path.basename(cfg["checkpoint"]))
    hm.save(os.path.join(cfg["out"], "heatmap.pgm"))
    return {"clean_error": hm.clean_error, "mean_error": float(np.nanmean(hm.values))}


def cmd_gradcheck(cfg):
    from .audit import run_audit, summarize

    summary = summarize(run_audit(cfg["seed"]))
    _write_json(os.path.join(cfg["out"], "gradcheck.json"), summary)
    return {"ok": summary["ok"], "max_rel_error": summary["max_rel_error"], "cases": summary["cases"]}


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


def _fail(code, message):
    sys.stderr.write(json.dumps({"error": message, "exit_code": code}) + "\n")
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg = resolve(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    try:
        summary = COMMANDS[command](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, f"{cfg.get('checkpoint')}: {exc}")
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line error
        return _fail(EXIT_FAIL, f"{type(exc).__name__}: {exc}")
    _write_json(os.path.join(cfg["out"], "run.json"),
                {"command": command, "config": cfg, "version": __version__,
                 "kernel_backend": kernels.backend(), "summary": summary})
    print(json.dumps({"command": command, "out": cfg["out"], **summary}, sort_keys=True))
    if command == "gradcheck" and not summary["ok"]:
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
