"""Run configuration: a YAML document with model/estimator/optim/data/run sections.

Every section is a flat mapping (``optim.schedule`` and ``data.augment`` /
``data.synth`` are nested mappings). Unknown keys and out-of-range enum values
are rejected. :func:`dump_config` writes the fully resolved form, which
reproduces the run when loaded again.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .data import AugmentSpec, load_datasets
from .estimators import PATHS, EstimatorConfig
from .guesses import GUESS_FAMILIES, SPACES, TARGET_KINDS, GuessSpec, TargetSpec
from .models import AUX_KINDS, PRESETS, SPLITS, attach_auxiliaries, build_backbone
from .trainer import AUX_TRAINING, DIAGNOSTICS, RunPlan, Schedule

DATASETS = ("fashion-mnist", "mnist", "cifar10", "synth")

DEFAULTS = {
    "model": {"preset": "tiny8", "split": None, "skip": None, "aux_kind": "cnn", "h_chan": None, "n_depth": None},
    "estimator": {"guess": "local", "target": "global", "space": "weight", "span_projection": False,
                  "path": "two_pass", "ridge_eps": 1e-8, "per_tensor": False},
    "optim": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "aux_lr": None,
              "schedule": {"decay_factor": 0.2, "step_epochs": 30}},
    "data": {"dataset": "fashion-mnist", "subset_size": None, "test_subset": None, "augment": None, "root": None,
             "synth": {"classes": 10, "shape": [1, 8, 8], "count": 1024, "separation": 5.0}},
    "run": {"epochs": 10, "batch_size": 64, "seed": 0, "out_dir": "runs/default", "aux_training": None,
            "diagnostics": "full"},
}
AUGMENT_KEYS = {"random_crop_padding", "horizontal_flip_p", "normalize"}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    out = {}
    for k, d in defaults.items():
        v = given.get(k, copy.deepcopy(d))
        if isinstance(d, dict) and k not in ("augment",):
            v = _merge(d, v, f"{where}.{k}" if where else k)
        out[k] = v
    return out


def _enum(value, allowed, name):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}")


def resolve(raw: dict) -> dict:
    """Merge defaults, validate and fill derived values; returns a plain dict."""
    cfg = _merge(DEFAULTS, raw, "")
    m, e, o, d, r = cfg["model"], cfg["estimator"], cfg["optim"], cfg["data"], cfg["run"]
    _enum(m["preset"], PRESETS, "model.preset")
    preset = PRESETS[m["preset"]]
    m["split"] = preset["split"] if m["split"] is None else m["split"]
    m["skip"] = preset["skip"] if m["skip"] is None else bool(m["skip"])
    _enum(m["split"], SPLITS, "model.split")
    _enum(m["aux_kind"], AUX_KINDS + ("none",), "model.aux_kind")
    _enum(e["guess"], GUESS_FAMILIES, "estimator.guess")
    _enum(e["target"], TARGET_KINDS, "estimator.target")
    _enum(e["space"], SPACES, "estimator.space")
    _enum(e["path"], PATHS, "estimator.path")
    _enum(d["dataset"], DATASETS, "data.dataset")
    _enum(r["diagnostics"], DIAGNOSTICS, "run.diagnostics")
    if r["aux_training"] is None:
        r["aux_training"] = "detached_logging" if e["guess"] in ("gaussian", "rademacher", "exact") else "co_trained"
    _enum(r["aux_training"], AUX_TRAINING, "run.aux_training")
    if d["augment"] is not None:
        if isinstance(d["augment"], bool):
            d["augment"] = ({"random_crop_padding": 4, "horizontal_flip_p": 0.5, "normalize": True} if d["augment"]
                            else {"random_crop_padding": 0, "horizontal_flip_p": 0.0, "normalize": True})
        unknown = set(d["augment"]) - AUGMENT_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in data.augment: {', '.join(sorted(unknown))}")
    for key, lo in (("epochs", 0), ("batch_size", 1)):
        if not isinstance(r[key], int) or r[key] < lo:
            raise ConfigError(f"run.{key} must be an integer >= {lo}")
    if not o["lr"] or o["lr"] <= 0:
        raise ConfigError("optim.lr must be positive")
    try:
        estimator_config(cfg)
        Schedule(o["lr"], **o["schedule"])
        if d["augment"] is not None:
            AugmentSpec(**d["augment"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve(raw)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def estimator_config(cfg: dict) -> EstimatorConfig:
    e = cfg["estimator"]
    return EstimatorConfig(GuessSpec(e["guess"], per_tensor=bool(e["per_tensor"])), TargetSpec(e["target"]),
                           e["space"], bool(e["span_projection"]), float(e["ridge_eps"]), e["path"])


def run_plan(cfg: dict) -> RunPlan:
    o, r = cfg["optim"], cfg["run"]
    return RunPlan(estimator=estimator_config(cfg), schedule=Schedule(float(o["lr"]), **o["schedule"]),
                   epochs=r["epochs"], batch_size=r["batch_size"], seed=r["seed"], aux_training=r["aux_training"],
                   momentum=float(o["momentum"]), weight_decay=float(o["weight_decay"]),
                   aux_lr=None if o["aux_lr"] is None else float(o["aux_lr"]), diagnostics=r["diagnostics"])


def build(cfg: dict):
    """Network, plan and datasets described by a resolved config."""
    m, d, r = cfg["model"], cfg["data"], cfg["run"]
    aug = None if d["augment"] is None else AugmentSpec(**d["augment"])
    synth = dict(d["synth"])
    synth["shape"] = tuple(synth["shape"])
    train, test = load_datasets(d["dataset"], d["subset_size"], d["test_subset"], aug, r["seed"], d["root"], synth)
    net = build_backbone(m["preset"], split=m["split"], skip=m["skip"], input_shape=train.shape,
                         class_count=train.class_count, seed=r["seed"])
    if m["aux_kind"] != "none":
        attach_auxiliaries(net, m["aux_kind"], m["h_chan"], m["n_depth"], seed=r["seed"])
    return net, run_plan(cfg), train, test
