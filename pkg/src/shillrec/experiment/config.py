"""Layered YAML experiment configuration.

Resolution order, lowest to highest precedence: built-in defaults, the
top-level file, per-dataset / per-model / per-attack files found next to it
(``dataset/<name>.yaml``, ``model/<victim>.yaml``, ``attack/<name>.yaml``),
extra files given explicitly, then ``key=value`` overrides.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


class _Required:
    """Marks fields that must be provided by a file or override."""

    def __deepcopy__(self, memo):
        return self

    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "name": "dataset",
        "path": REQUIRED,
        "schema": {"user": 0, "item": 1, "rating": 2, "timestamp": 3},
        "delimiter": None,
        "header": None,
        "rating_bounds": None,
        "implicit": False,
        "threshold": None,
        "split": {"strategy": "ratio_random", "train_fraction": 0.8, "k": 1, "seed": None},
    },
    "attack": {
        "name": "none",
        "seed": None,
        "attack_fraction": 0.2,
        "attack_size": None,
        "filler_size": None,
        "target_mode": "auto",
        "target_count": None,
        "target_items": [],
        "intent": "push",
        "bandwagon": {"popular_fraction": 0.5, "popularity_rule": "by_count"},
        "segment": {"size": 10},
        "surrogate": {
            "model": "mf_pointwise",
            "d": 16,
            "learning_rate": 0.3,
            "l2_reg": 0.001,
            "inner_steps": 2,
            "outer_steps": 20,
            "outer_step_size": 0.1,
            "unroll_steps": 3,
            "pretrain_steps": 20,
            "negative_weight": 0.05,
            "margin_rank": 50,
            "adv_users": None,
            "init": "auto",
        },
    },
    "victim": {
        "model": "mf_pointwise",
        "d": 32,
        "learning_rate": 0.01,
        "l2_reg": 0.0001,
        "epochs": 50,
        "batch_size": 256,
        "negatives_per_positive": 1,
        "n_layers": 2,
        "k_neighbors": 50,
    },
    "metrics": {"k": [10, 50]},
    "defense": {
        "method": "none",
        "n_components": 50,
        "flag_count": None,
    },
}

# Types for every leaf; keys whose default is None or REQUIRED need an entry.
_NUM = (int, float)
TYPES = {
    "seed": int, "output_dir": str,
    "dataset.name": str, "dataset.path": str, "dataset.schema": dict,
    "dataset.delimiter": (str, type(None)), "dataset.header": (bool, type(None)),
    "dataset.rating_bounds": (list, type(None)), "dataset.implicit": bool,
    "dataset.threshold": (*_NUM, type(None)),
    "dataset.split.strategy": str, "dataset.split.train_fraction": _NUM,
    "dataset.split.k": int, "dataset.split.seed": (int, type(None)),
    "attack.name": str, "attack.seed": (int, type(None)), "attack.attack_fraction": _NUM,
    "attack.attack_size": (int, type(None)), "attack.filler_size": (int, type(None)),
    "attack.target_mode": str, "attack.target_count": (int, type(None)),
    "attack.target_items": list, "attack.intent": str,
    "attack.bandwagon.popular_fraction": _NUM, "attack.bandwagon.popularity_rule": str,
    "attack.segment.size": int,
    "attack.surrogate.model": str, "attack.surrogate.d": int,
    "attack.surrogate.learning_rate": _NUM, "attack.surrogate.l2_reg": _NUM,
    "attack.surrogate.inner_steps": int, "attack.surrogate.outer_steps": int,
    "attack.surrogate.outer_step_size": _NUM, "attack.surrogate.unroll_steps": int,
    "attack.surrogate.pretrain_steps": int, "attack.surrogate.negative_weight": _NUM,
    "attack.surrogate.margin_rank": int, "attack.surrogate.adv_users": (int, type(None)),
    "attack.surrogate.init": str,
    "victim.model": str, "victim.d": int, "victim.learning_rate": _NUM,
    "victim.l2_reg": _NUM, "victim.epochs": int, "victim.batch_size": int,
    "victim.negatives_per_positive": int, "victim.n_layers": int, "victim.k_neighbors": int,
    "metrics.k": list,
    "defense.method": str, "defense.n_components": int, "defense.flag_count": (int, type(None)),
}

CHOICES = {
    "attack.name": ("none", "random", "average", "bandwagon", "lovehate", "segment",
                    "single_level", "bilevel"),
    "attack.target_mode": ("auto", "popular", "random", "explicit"),
    "attack.intent": ("push", "nuke"),
    "victim.model": ("mf_pointwise", "bpr_mf", "lightgcn", "itemknn"),
    "defense.method": ("none", "identity", "pca", "oracle"),
    "dataset.split.strategy": ("ratio_random", "leave_k_out_per_user"),
    "attack.surrogate.model": ("mf_pointwise", "bpr_mf"),
    "attack.surrogate.init": ("auto", "heuristic", "uniform"),
    "attack.bandwagon.popularity_rule": ("by_count", "by_mean_rating"),
}

# Free-form mappings: their contents are not checked against DEFAULTS.
_OPEN = {"dataset.schema"}


def _leaves(tree, prefix=""):
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and path not in _OPEN:
            yield from _leaves(v, path + ".")
        else:
            yield path, v


def _check_type(path, value):
    want = TYPES[path]
    if value is REQUIRED:
        return
    # bool is an int subclass; do not let True pass as a number
    if isinstance(value, bool) and bool not in (want if isinstance(want, tuple) else (want,)):
        raise ConfigError(f"{path}: expected {_type_name(want)}, got bool")
    if not isinstance(value, want):
        raise ConfigError(f"{path}: expected {_type_name(want)}, got {type(value).__name__}")
    if path in CHOICES and value not in CHOICES[path]:
        raise ConfigError(f"{path}: {value!r} is not one of {', '.join(CHOICES[path])}")


def _type_name(want):
    ts = want if isinstance(want, tuple) else (want,)
    return " or ".join("null" if t is type(None) else t.__name__ for t in ts)


def merge(base: dict, layer: dict, origin: str = "", prefix: str = "") -> dict:
    """Recursive merge of ``layer`` into a copy of ``base`` with key validation."""
    out = copy.deepcopy(base)
    for k, v in (layer or {}).items():
        path = f"{prefix}{k}"
        if k not in base:
            valid = ", ".join(sorted(base))
            raise ConfigError(f"unknown key {path!r}{_where(origin)}; valid keys here: {valid}")
        if isinstance(base[k], dict) and path not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{_where(origin)}: expected a mapping")
            out[k] = merge(base[k], v, origin, path + ".")
        else:
            _check_type(path, v)
            out[k] = copy.deepcopy(v)
    return out


def _where(origin):
    return f" in {origin}" if origin else ""


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; value parsed as YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def _read_yaml(path: Path) -> dict:
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    ds = doc.get("dataset")
    # relative data paths are relative to the file that names them
    if isinstance(ds, dict) and isinstance(ds.get("path"), str) and not Path(ds["path"]).is_absolute():
        ds["path"] = str((path.parent / ds["path"]).resolve())
    return doc


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved configuration tree."""

    tree: dict
    sources: tuple = ()

    def get(self, dotted: str):
        node = self.tree
        for part in dotted.split("."):
            node = node[part]
        return node

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    def snapshot(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True, default_flow_style=False)

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot().encode()).hexdigest()[:16]

    def run_name(self) -> str:
        t = self.tree
        return f"{t['dataset']['name']}_{t['attack']['name']}_{t['victim']['model']}_seed{t['seed']}"

    def with_overrides(self, overrides) -> "ExperimentConfig":
        tree = self.tree
        for o in overrides:
            tree = merge(tree, parse_override(o) if isinstance(o, str) else o, "override")
        return ExperimentConfig(_finish(tree), self.sources)


def _finish(tree: dict) -> dict:
    missing = [p for p, v in _leaves(tree) if v is REQUIRED]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    k = tree["metrics"]["k"]
    if not k or not all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in k):
        raise ConfigError("metrics.k: expected a non-empty list of positive integers")
    rb = tree["dataset"]["rating_bounds"]
    if rb is not None and (len(rb) != 2 or not all(isinstance(x, _NUM) for x in rb)):
        raise ConfigError("dataset.rating_bounds: expected [low, high]")
    return tree


def load_config(paths, overrides=(), snapshot_dir=None) -> ExperimentConfig:
    """Resolve a config from files and overrides; optionally write the snapshot."""
    paths = [Path(p) for p in ([paths] if isinstance(paths, (str, Path)) else paths)]
    if not paths:
        raise ConfigError("at least one config file is required")
    top, extra = paths[0], paths[1:]
    over = [parse_override(o) if isinstance(o, str) else o for o in overrides]

    tree = merge(DEFAULTS, _read_yaml(top), str(top))
    # names deciding the per-dataset/model/attack files may themselves be overridden
    probe = tree
    for o in over:
        probe = merge(probe, o, "override")
    sources = [str(top)]
    base = top.parent
    for group, name in (("dataset", probe["dataset"]["name"]), ("model", probe["victim"]["model"]),
                        ("attack", probe["attack"]["name"])):
        f = base / group / f"{name}.yaml"
        if f.is_file():
            tree = merge(tree, _read_yaml(f), str(f))
            sources.append(str(f))
    for f in extra:
        tree = merge(tree, _read_yaml(f), str(f))
        sources.append(str(f))
    for o in over:
        tree = merge(tree, o, "override")
    cfg = ExperimentConfig(_finish(tree), tuple(sources))
    if snapshot_dir is not None:
        d = Path(snapshot_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.resolved.yaml").write_text(cfg.snapshot())
    return cfg


def expand_grid(grid_specs) -> list[list[str]]:
    """``["a=1,2", "b=x,y"]`` -> every combination as override lists."""
    axes = []
    for spec in grid_specs:
        if "=" not in spec:
            raise ConfigError(f"grid axis {spec!r} is not key=v1,v2")
        key, values = spec.split("=", 1)
        axes.append([f"{key}={v}" for v in values.split(",")])
    return [list(combo) for combo in itertools.product(*axes)] if axes else [[]]
