"""Experiment configuration: YAML in, canonical JSON for hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources

import yaml

from ..transforms import MaskSpec

DEFAULT_CONFIG = "default.yaml"

_SECTIONS = ("dataset", "splits", "masks", "pretrain", "probe", "unlearn", "sweeps")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def hash_of(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


class ExperimentConfig:
    """Nested dict wrapper with a hash that ignores key order.

    ``out`` and ``threads`` steer where and how a run executes but not what
    it computes, so they are left out of the hash.
    """

    def __init__(self, data, source=None):
        missing = [s for s in _SECTIONS if s not in data]
        if missing:
            raise ValueError(f"config missing sections: {missing}")
        self.data = copy.deepcopy(data)
        self.source = source

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data.get("seed", 0))

    @property
    def out(self):
        return self.data.get("out", "runs")

    def hashed_part(self):
        return {k: v for k, v in self.data.items() if k not in ("out", "threads")}

    @property
    def hash(self):
        return hash_of(self.hashed_part())

    def section_hash(self, *keys):
        """Hash of a subset of sections plus the seed, for caching stages."""
        return hash_of({"seed": self.seed, **{k: self.data[k] for k in keys}})

    def with_overrides(self, seed=None, out=None, alpha=None):
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["out"] = out
        if alpha is not None:
            data["unlearn"]["alpha"] = float(alpha)
        return ExperimentConfig(data, self.source)

    def mask(self, name):
        return MaskSpec.from_dict(self.data["masks"][name])

    def pretrain_masks(self):
        return [MaskSpec.from_dict(d) for d in self.data["masks"]["pretrain"]]

    def to_dict(self):
        return copy.deepcopy(self.data)


def default_config_text():
    return resources.files("i2iunlearn").joinpath("configs", DEFAULT_CONFIG).read_text("utf-8")


def load_config(path=None):
    """Read a YAML config; ``None`` gives the packaged default.

    Sections absent from the file are taken from the default.
    """
    base = yaml.safe_load(default_config_text())
    if path is None:
        return ExperimentConfig(base, source=DEFAULT_CONFIG)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            user = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ValueError(f"unreadable config {path}: {exc}") from exc
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ValueError(f"unreadable config {path}: top level must be a mapping")
    return ExperimentConfig(_merge(base, user), source=path)


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
