"""Experiment configuration: JSON schema, validation, and the resolved echo.

A config file describes datasets, the stream shape, augmentation, network
widths, the method, and the seed list. Validation happens before any
compute; every error names the offending key path and unknown keys are
rejected. `Experiment.resolved()` returns the fully-defaulted dictionary,
which is written next to results and loads back to an identical experiment
(the echo closure property).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import scenario as sc
from .losses import LossWeights
from .trainer import MethodConfig, NetArch


class ConfigError(ValueError):
    """Invalid experiment configuration; message starts with the key path."""


def _fail(path, message):
    raise ConfigError(f"{path}: {message}")


def _check_keys(obj, path, required, optional=()):
    if not isinstance(obj, dict):
        _fail(path, "expected an object")
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            _fail(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in obj:
            _fail(f"{path}.{key}", "missing required key")


def _get_int(obj, path, key, default=None, minimum=None):
    if key not in obj:
        if default is None:
            _fail(f"{path}.{key}", "missing required key")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(f"{path}.{key}", "expected an integer")
    if minimum is not None and value < minimum:
        _fail(f"{path}.{key}", f"must be >= {minimum}")
    return value


def _get_float(obj, path, key, default=None):
    if key not in obj:
        if default is None:
            _fail(f"{path}.{key}", "missing required key")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(f"{path}.{key}", "expected a number")
    return float(value)


def _get_bool(obj, path, key, default):
    value = obj.get(key, default)
    if not isinstance(value, bool):
        _fail(f"{path}.{key}", "expected true or false")
    return value


def _get_str(obj, path, key, default=None):
    if key not in obj:
        if default is None:
            _fail(f"{path}.{key}", "missing required key")
        return default
    value = obj[key]
    if not isinstance(value, str):
        _fail(f"{path}.{key}", "expected a string")
    return value


def _get_number_list(obj, path, key, default, length=None):
    value = obj.get(key)
    if value is None:
        return list(default)
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool)
            for v in value):
        _fail(f"{path}.{key}", "expected a list of numbers")
    if length is not None and len(value) != length:
        _fail(f"{path}.{key}", f"expected exactly {length} values")
    return [float(v) for v in value]


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


def _parse_dataset(obj, path):
    if not isinstance(obj, dict):
        _fail(path, "expected an object")
    kind = _get_str(obj, path, "kind")
    if kind == "synthetic":
        _check_keys(obj, path,
                    required=("kind", "classes", "dim", "train_per_class",
                              "test_per_class", "seed"),
                    optional=("mean_radius", "noise_sigma", "name"))
        return {
            "kind": "synthetic",
            "classes": _get_int(obj, path, "classes", minimum=1),
            "dim": _get_int(obj, path, "dim", minimum=1),
            "train_per_class": _get_int(obj, path, "train_per_class", minimum=1),
            "test_per_class": _get_int(obj, path, "test_per_class", minimum=0),
            "seed": _get_int(obj, path, "seed", minimum=0),
            "mean_radius": _get_float(obj, path, "mean_radius", 4.0),
            "noise_sigma": _get_float(obj, path, "noise_sigma", 1.0),
            "name": _get_str(obj, path, "name", ""),
        }
    if kind == "cifar":
        _check_keys(obj, path, required=("kind", "train_path"),
                    optional=("test_path", "name"))
        return {
            "kind": "cifar",
            "train_path": _get_str(obj, path, "train_path"),
            "test_path": _get_str(obj, path, "test_path", ""),
            "name": _get_str(obj, path, "name", "cifar"),
        }
    if kind == "file":
        _check_keys(obj, path, required=("kind", "path"))
        return {"kind": "file", "path": _get_str(obj, path, "path")}
    _fail(f"{path}.kind", "expected one of synthetic, cifar, file")


def _parse_scenario(obj, path):
    _check_keys(obj, path,
                required=("n_tasks", "classes_per_task", "labeled_fraction",
                          "n_related", "n_unrelated"),
                optional=("variant", "non_iid_fraction"))
    kwargs = {
        "n_tasks": _get_int(obj, path, "n_tasks", minimum=1),
        "classes_per_task": _get_int(obj, path, "classes_per_task", minimum=1),
        "labeled_fraction": _get_float(obj, path, "labeled_fraction"),
        "n_related": _get_int(obj, path, "n_related", minimum=0),
        "n_unrelated": _get_int(obj, path, "n_unrelated", minimum=0),
        "variant": _get_str(obj, path, "variant", "standard"),
        "non_iid_fraction": _get_float(obj, path, "non_iid_fraction", 0.5),
    }
    try:
        sc.ScenarioConfig(seed=0, **kwargs)
    except ValueError as exc:
        _fail(path, str(exc))
    return kwargs


def _parse_augmenter(obj, path):
    _check_keys(obj, path, required=(),
                optional=("mode", "sigma", "dropout", "crop_scale", "flip_p",
                          "jitter_p", "jitter_strengths", "gray_p",
                          "image_hw"))
    kwargs = {
        "mode": _get_str(obj, path, "mode", "vector"),
        "sigma": _get_float(obj, path, "sigma", 0.5),
        "dropout": _get_float(obj, path, "dropout", 0.1),
        "crop_scale": tuple(_get_number_list(obj, path, "crop_scale",
                                             (0.2, 1.0), length=2)),
        "flip_p": _get_float(obj, path, "flip_p", 0.5),
        "jitter_p": _get_float(obj, path, "jitter_p", 0.8),
        "jitter_strengths": tuple(_get_number_list(
            obj, path, "jitter_strengths", (0.4, 0.4, 0.4, 0.1), length=4)),
        "gray_p": _get_float(obj, path, "gray_p", 0.2),
        "image_hw": _get_int(obj, path, "image_hw", 32, minimum=1),
    }
    try:
        return sc.Augmenter(**kwargs)
    except ValueError as exc:
        _fail(path, str(exc))


def _parse_arch(obj, path):
    _check_keys(obj, path, required=(),
                optional=("hidden", "proj_hidden", "embed_dim"))
    hidden = obj.get("hidden", [64, 64])
    if (not isinstance(hidden, list) or not hidden or not all(
            isinstance(h, int) and not isinstance(h, bool) and h >= 1
            for h in hidden)):
        _fail(f"{path}.hidden", "expected a non-empty list of positive ints")
    return NetArch(hidden=tuple(hidden),
                   proj_hidden=_get_int(obj, path, "proj_hidden", 32, minimum=1),
                   embed_dim=_get_int(obj, path, "embed_dim", 16, minimum=1))


def _parse_weights(obj, path):
    defaults = LossWeights()
    _check_keys(obj, path, required=(),
                optional=("tau", "tau_teacher", "tau_student", "td_weight",
                          "kd_weight"))
    kwargs = {name: _get_float(obj, path, name, getattr(defaults, name))
              for name in ("tau", "tau_teacher", "tau_student", "td_weight",
                           "kd_weight")}
    try:
        return LossWeights(**kwargs)
    except ValueError as exc:
        _fail(path, str(exc))


_METHOD_INTS = ("n_aug", "memory_size", "epochs_first", "epochs_later",
                "epochs_learner", "batch_size", "classifier_epochs",
                "classifier_batch")
_METHOD_FLOATS = ("eta_id", "eta_pl", "lr", "min_lr", "classifier_lr")
_METHOD_BOOLS = ("use_sup", "use_td", "use_kd", "pretrain_reference",
                 "pseudo_anchor", "pseudo_positive")
_METHOD_STRS = ("method", "seg_variant", "spread_mode", "memory_policy")


def _parse_method(obj, path):
    defaults = MethodConfig()
    _check_keys(obj, path, required=(),
                optional=_METHOD_INTS + _METHOD_FLOATS + _METHOD_BOOLS
                + _METHOD_STRS + ("weights",))
    kwargs = {}
    for name in _METHOD_STRS:
        kwargs[name] = _get_str(obj, path, name, getattr(defaults, name))
    for name in _METHOD_BOOLS:
        kwargs[name] = _get_bool(obj, path, name, getattr(defaults, name))
    for name in _METHOD_INTS:
        kwargs[name] = _get_int(obj, path, name, getattr(defaults, name))
    for name in _METHOD_FLOATS:
        kwargs[name] = _get_float(obj, path, name, getattr(defaults, name))
    kwargs["weights"] = _parse_weights(obj.get("weights", {}),
                                       f"{path}.weights")
    try:
        return MethodConfig(**kwargs)
    except ValueError as exc:
        _fail(path, str(exc))


def _parse_seeds(obj, path):
    seeds = obj.get("seeds")
    if (not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0
            for s in seeds)):
        _fail(f"{path}.seeds", "expected a non-empty list of seeds >= 0")
    if len(set(seeds)) != len(seeds):
        _fail(f"{path}.seeds", "seeds must be unique")
    return tuple(seeds)


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    """A validated experiment: everything a `run` invocation needs."""

    name: str
    main_dataset: dict
    peripheral_datasets: tuple
    scenario_kwargs: dict
    augmenter: sc.Augmenter
    arch: NetArch
    method: MethodConfig
    seeds: tuple
    output_dir: str

    def resolved(self):
        """Fully-defaulted JSON-ready dictionary; loads back identically."""
        method = {name: getattr(self.method, name)
                  for name in _METHOD_STRS + _METHOD_BOOLS + _METHOD_INTS
                  + _METHOD_FLOATS}
        method["weights"] = {
            name: getattr(self.method.weights, name)
            for name in ("tau", "tau_teacher", "tau_student", "td_weight",
                         "kd_weight")}
        aug = self.augmenter
        return {
            "name": self.name,
            "datasets": {
                "main": dict(self.main_dataset),
                "peripheral": [dict(p) for p in self.peripheral_datasets],
            },
            "scenario": dict(self.scenario_kwargs),
            "augmenter": {
                "mode": aug.mode,
                "sigma": aug.sigma,
                "dropout": aug.dropout,
                "crop_scale": list(aug.crop_scale),
                "flip_p": aug.flip_p,
                "jitter_p": aug.jitter_p,
                "jitter_strengths": list(aug.jitter_strengths),
                "gray_p": aug.gray_p,
                "image_hw": aug.image_hw,
            },
            "arch": {
                "hidden": list(self.arch.hidden),
                "proj_hidden": self.arch.proj_hidden,
                "embed_dim": self.arch.embed_dim,
            },
            "method": method,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def build_datasets(self):
        """Materialize (main, peripherals) from their specs."""
        return (_build_dataset(self.main_dataset),
                [_build_dataset(p) for p in self.peripheral_datasets])

    def scenario_config(self, seed):
        return sc.ScenarioConfig(seed=int(seed), **self.scenario_kwargs)


def _build_dataset(spec):
    if spec["kind"] == "synthetic":
        return sc.synth_dataset(
            spec["classes"], spec["dim"], spec["train_per_class"],
            spec["test_per_class"], spec["seed"],
            mean_radius=spec["mean_radius"],
            noise_sigma=spec["noise_sigma"],
            name=spec["name"] or None)
    if spec["kind"] == "cifar":
        return sc.load_cifar_binary(spec["train_path"],
                                    spec["test_path"] or None,
                                    name=spec["name"])
    return sc.load_dataset(spec["path"])


def from_dict(data, path="config"):
    """Validate a parsed JSON object into an Experiment."""
    _check_keys(data, path, required=("datasets", "scenario", "seeds"),
                optional=("name", "augmenter", "arch", "method",
                          "output_dir"))
    ds = data["datasets"]
    _check_keys(ds, f"{path}.datasets", required=("main",),
                optional=("peripheral",))
    peripheral = ds.get("peripheral", [])
    if not isinstance(peripheral, list):
        _fail(f"{path}.datasets.peripheral", "expected a list")
    return Experiment(
        name=_get_str(data, path, "name", "experiment"),
        main_dataset=_parse_dataset(ds["main"], f"{path}.datasets.main"),
        peripheral_datasets=tuple(
            _parse_dataset(p, f"{path}.datasets.peripheral[{i}]")
            for i, p in enumerate(peripheral)),
        scenario_kwargs=_parse_scenario(data["scenario"], f"{path}.scenario"),
        augmenter=_parse_augmenter(data.get("augmenter", {}),
                                   f"{path}.augmenter"),
        arch=_parse_arch(data.get("arch", {}), f"{path}.arch"),
        method=_parse_method(data.get("method", {}), f"{path}.method"),
        seeds=_parse_seeds(data, path),
        output_dir=_get_str(data, path, "output_dir", ""),
    )


def load_experiment(path):
    """Read and validate a JSON experiment file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)
