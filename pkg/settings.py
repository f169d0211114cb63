import copy
import importlib.util
import json
import logging
import os
from dataclasses import replace

from attack import AttackSpec
from experiment import DatasetParams, EvalConfig, ExperimentConfig, FlippedConfig, Scenario, presets
from formats import read_json
from net import NetworkConfig
from train import SchedulerConfig, StopConfig, TrainConfig
from utils import ConfigError, resolve_threads

logger = logging.getLogger(__name__)

LOG_LEVEL = os.environ.get("ADVFEAT_LOG_LEVEL", "INFO").upper()


def default_figure_format():
    """SVG when kaleido can render it, else standalone HTML"""
    return "svg" if importlib.util.find_spec("kaleido") is not None else "html"


_TRAIN_DEFAULTS = {
    "loss_kind": "exponential",
    "lr": 0.01,
    "momentum": 0.9,
    "max_epochs": 2000,
    "batch_size": None,
    "seed": 0,
    "trace_points": 10_000,
    "progress": False,
    "scheduler": {"factor": 0.1, "patience_epochs": 10, "min_improvement": 1e-12, "min_lr_ratio": 1e-6},
    "stop": {"direction_tol": 1e-6, "window": 5, "require_positive_margins": True, "check_every": 100},
}

DEFAULTS = {
    "dataset": {
        "source": "uniform",
        "d": 2048,
        "n": 205,
        "scale": 1.0,
        "noise_source": "uniform",
        "n_adv": 2048,
        "held_out": 0,
        "path": None,
    },
    "network": {"m": 64, "gamma": 0.5, "init_scale": 0.01, "m_plus": None},
    "train": {**copy.deepcopy(_TRAIN_DEFAULTS), "student": {}},
    "attack": {
        "norm": "L2",
        "mode": "geometry",
        "epsilon": 0.353,
        "d_delta": None,
        "steps": None,
        "step_size": None,
        "target_rule": "random_pm1",
        "seed": 0,
        "explicit_targets": None,
        "objective": "score",
        "loss_kind": "exponential",
    },
    "experiment": {
        "name": "experiment",
        "preset": None,
        "scenario": "noise",
        "seed": 0,
        "threads": None,
        "n_probes": 10_000,
        "band": 1e-3,
        "accuracy_target": "natural_train",
        "map_resolution": 64,
        "map_half_width": None,
        "robust_fraction": 0.5,
        "sweep": {
            "axis": "n_adv",
            "values": [16, 64, 256, 1024],
            "seeds": [0],
            "scale_epsilon": False,
            "with_control": False,
        },
    },
    "output": {"out_dir": "runs", "force": False, "figure_format": default_figure_format()},
}

# Sections whose values are free-form dicts.
_OPEN_PATHS = {("train", "student")}


def _check_keys(doc, reference, path=()):
    for key, value in doc.items():
        dotted = ".".join(path + (key,))
        if key not in reference:
            raise ConfigError(dotted, "unknown key")
        if path + (key,) in _OPEN_PATHS:
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected an object")
            _check_keys(value, _TRAIN_DEFAULTS, path + (key,))
            continue
        if isinstance(reference[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected an object")
            _check_keys(value, reference[key], path + (key,))


def deep_merge(base, override):
    """Recursively merge override into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text):
    """
    Parse "a.b.c=value"; the value is read as JSON when possible, else kept as a string

    Returns:
        tuple: (list of keys, value)
    """
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    dotted, raw = text.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if len(keys) < 2:
        raise ConfigError(dotted, "override needs a section and a key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def _under_open(keys):
    return any(tuple(keys[: len(p)]) == p for p in _OPEN_PATHS)


def apply_override(doc, keys, value):
    node = doc
    for depth, key in enumerate(keys[:-1]):
        child = node.get(key)
        if child is None and _under_open(keys[: depth + 1]):
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(".".join(keys[: depth + 1]), "not a section")
        node = child
    node[keys[-1]] = value
    return doc


def load_document(path=None, overrides=()):
    """
    Defaults, then a JSON file, then dotted overrides

    Raises:
        ConfigError: unknown keys, naming the dotted path
        FormatError: unreadable config file
    """
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        user = read_json(path)
        if not isinstance(user, dict):
            raise ConfigError(str(path), "config file must hold a JSON object")
        _check_keys(user, DEFAULTS)
        doc = deep_merge(doc, user)
    for text in overrides:
        keys, value = parse_override(text)
        apply_override(doc, keys, value)
    _check_keys(doc, DEFAULTS)
    doc["experiment"]["threads"] = resolve_threads(doc["experiment"]["threads"])
    return doc


def _built(path, factory, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc))


def network_config(doc, d=None):
    return _built("network", NetworkConfig, d=d if d is not None else doc["dataset"]["d"], **doc["network"])


def train_config(doc, student=False):
    section = {k: v for k, v in doc["train"].items() if k != "student"}
    if student:
        section = deep_merge(section, doc["train"].get("student", {}))
    section = dict(section)
    section["scheduler"] = _built("train.scheduler", SchedulerConfig, **section["scheduler"])
    section["stop"] = _built("train.stop", StopConfig, **section["stop"])
    section["threads"] = doc["experiment"]["threads"]
    return _built("train", TrainConfig, **section)


def attack_spec(doc):
    section = dict(doc["attack"])
    if section.get("explicit_targets") is not None:
        section["explicit_targets"] = tuple(section["explicit_targets"])
    return _built("attack", AttackSpec, **section)


def experiment_config(doc):
    """ExperimentConfig from a resolved document; a named preset replaces the sections"""
    exp = doc["experiment"]
    if exp["preset"] is not None:
        table = presets()
        if exp["preset"] not in table:
            raise ConfigError("experiment.preset", f"unknown preset {exp['preset']!r}; have {sorted(table)}")
        return replace(table[exp["preset"]], seed=exp["seed"], threads=exp["threads"])
    ds = {k: v for k, v in doc["dataset"].items() if k != "path"}
    scenario = _built("experiment.scenario", Scenario, exp["scenario"])
    if scenario is not Scenario.NOISE:
        ds["n_adv"] = None
    return _built(
        "experiment",
        ExperimentConfig,
        name=exp["name"],
        scenario=scenario,
        dataset=_built("dataset", DatasetParams, **ds),
        network=network_config(doc),
        standard_train=train_config(doc),
        student_train=train_config(doc, student=True),
        attack=attack_spec(doc),
        eval=_built(
            "experiment",
            EvalConfig,
            n_probes=exp["n_probes"],
            band=exp["band"],
            accuracy_target=exp["accuracy_target"],
            map_resolution=exp["map_resolution"],
            map_half_width=exp["map_half_width"],
        ),
        flipped=FlippedConfig(exp["robust_fraction"]) if scenario is Scenario.FLIPPED else None,
        seed=exp["seed"],
        threads=exp["threads"],
    )
