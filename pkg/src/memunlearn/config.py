"""Experiment configuration files (YAML, schema version 1)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .backend import BackendError, ModelSpec, TrainConfig
from .memorization import PROXY_KINDS
from .unlearn import UnlearnConfig, UnlearnError

SCHEMA_VERSION = 1
PROTOCOLS = ("single_shot", "continual", "proxy_validation", "ablation")


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    name: str
    protocol: str
    dataset: dict
    model: ModelSpec
    train: TrainConfig
    seeds: list[int]
    proxy: str = "conf"
    unlearn: list[UnlearnConfig] = field(default_factory=list)
    models: list[ModelSpec] = field(default_factory=list)
    proxies: list[str] = field(default_factory=lambda: list(PROXY_KINDS))
    train_fraction: float = 0.8
    holdout_fraction: float = 0.2
    pretrain_fraction: float = 0.0
    pretrain: Optional[TrainConfig] = None
    strategy: str = "extremes"
    M: int = 3
    N: int = 1000
    steps: int = 5
    mia_family: str = "threshold"
    variant: str = "three-term"
    mem_T: int = 200
    mem_p: float = 0.7
    mem_train: Optional[TrainConfig] = None
    n_jobs: int = 1
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def dataset_options(self) -> dict:
        return dict(self.dataset.get("options") or {})


def _require(d: dict, key: str, where: str):
    if key not in d or d[key] is None:
        raise ConfigError(f"{where}{key}", "required field is missing")
    return d[key]


def _build(factory, payload, where):
    try:
        return factory(**payload)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None
    except (BackendError, UnlearnError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def parse_config(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a config mapping; ``overrides`` are applied at the top level first."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        raw[key] = value

    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    raw["schema_version"] = SCHEMA_VERSION
    protocol = _require(raw, "protocol", "")
    if protocol not in PROTOCOLS:
        raise ConfigError("protocol", f"must be one of {PROTOCOLS}")
    dataset = _require(raw, "dataset", "")
    if not isinstance(dataset, dict):
        raise ConfigError("dataset", "must be a mapping")
    _require(dataset, "name", "dataset.")

    seeds = _require(raw, "seeds", "")
    if isinstance(seeds, int):
        seeds = [seeds]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")
    if "runs" in raw and raw["runs"] != len(seeds):
        raise ConfigError("runs", f"runs={raw['runs']} but {len(seeds)} seeds given")

    model_raw = dict(_require(raw, "model", ""))
    _require(model_raw, "architecture", "model.")
    model = _build(ModelSpec, model_raw, "model")
    models = [_build(ModelSpec, dict(m), f"models[{k}]") for k, m in enumerate(raw.get("models") or [])]
    train = _build(TrainConfig, dict(raw.get("train") or {}), "train")
    pretrain = _build(TrainConfig, dict(raw["pretrain"]), "pretrain") if raw.get("pretrain") else None

    unlearn = []
    for k, u in enumerate(raw.get("unlearn") or []):
        if not isinstance(u, dict):
            raise ConfigError(f"unlearn[{k}]", "must be a mapping")
        _require(u, "method", f"unlearn[{k}].")
        unlearn.append(_build(UnlearnConfig, dict(u), f"unlearn[{k}]"))
    if protocol in ("single_shot", "continual", "ablation") and not unlearn:
        raise ConfigError("unlearn", "at least one unlearning method is required")

    partition = dict(raw.get("partition") or {})
    mem = dict(raw.get("memorization") or {})
    split = dict(raw.get("split") or {})
    mia = dict(raw.get("mia") or {})
    cfg = ExperimentConfig(
        name=str(raw.get("name", protocol)),
        protocol=protocol,
        dataset=dataset,
        model=model,
        train=train,
        seeds=seeds,
        proxy=raw.get("proxy", "conf"),
        unlearn=unlearn,
        models=models,
        proxies=list(raw.get("proxies") or PROXY_KINDS),
        train_fraction=float(split.get("train_fraction", 0.8)),
        holdout_fraction=float(split.get("holdout_fraction", 0.2)),
        pretrain_fraction=float(split.get("pretrain_fraction", 0.0)),
        pretrain=pretrain,
        strategy=partition.get("strategy", "extremes"),
        M=int(partition.get("M", 3)),
        N=int(partition.get("N", 1000)),
        steps=int(raw.get("steps", (raw.get("continual") or {}).get("steps", 5))),
        mia_family=mia.get("family", "threshold"),
        variant=raw.get("variant", "three-term"),
        mem_T=int(mem.get("T", 200)),
        mem_p=float(mem.get("p", 0.7)),
        mem_train=_build(TrainConfig, dict(mem["train"]), "memorization.train") if mem.get("train") else None,
        n_jobs=int(raw.get("n_jobs", 1)),
        raw=raw,
    )
    if cfg.proxy not in PROXY_KINDS:
        raise ConfigError("proxy", f"must be one of {PROXY_KINDS}")
    bad = [p for p in cfg.proxies if p not in PROXY_KINDS]
    if bad:
        raise ConfigError("proxies", f"unknown proxies {bad}")
    if cfg.strategy not in ("extremes", "random-then-sort"):
        raise ConfigError("partition.strategy", "must be extremes or random-then-sort")
    if cfg.M < 1 or cfg.N < 1:
        raise ConfigError("partition", "M and N must be positive")
    if protocol == "continual":
        if cfg.steps < 2:
            raise ConfigError("steps", "continual runs need at least two steps")
        if len(unlearn) != 1:
            raise ConfigError("unlearn", "continual runs take exactly one method")
    if cfg.mia_family not in ("threshold", "logistic"):
        raise ConfigError("mia.family", "must be threshold or logistic")
    if cfg.variant not in ("three-term", "two-term"):
        raise ConfigError("variant", "must be three-term or two-term")
    if protocol in ("single_shot", "continual", "ablation"):
        for k, u in enumerate(unlearn):
            if u.method != "retrain" and len(u.epochs) != cfg.M:
                raise ConfigError(f"unlearn[{k}].epochs", f"needs {cfg.M} entries, one per partition")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("split.train_fraction", "must lie in (0, 1)")
    return cfg


def load_config(path: str | Path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "file not found") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(where, f"YAML parse error: {getattr(exc, 'problem', exc)}") from None
    return parse_config(raw, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with a YAML-typed value."""
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(text, "override must look like key=value")
    return key.strip(), yaml.safe_load(value)
