"""End-to-end experiment protocols and the run-record log."""

from __future__ import annotations

import csv
import json
import logging
import platform
import subprocess
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .backend import (
    Checkpoint,
    ModelSpec,
    TrainConfig,
    TrajectorySnapshots,
    evaluate_accuracy,
    probs_matrix,
    initial_checkpoint,
    train,
)
from .config import SCHEMA_VERSION, ExperimentConfig
from .data import (
    DatasetHandle,
    ForgetPartitioning,
    SplitSpec,
    build_forget_partitioning,
    carve,
    load_dataset,
    make_splits,
)
from .memorization import (
    ProxyFidelity,
    compute_proxy,
    estimate_memorization_subsample,
    validate_proxy,
)
from .metrics import MetricResult, evaluate_pair
from .store import CheckpointStore
from .unlearn import UnlearnConfig, bare_unlearn, retrain_reference, rum_unlearn

log = logging.getLogger(__name__)

SUMMARY_FIELDS = [
    "protocol", "seed", "step", "method", "rum", "proxy", "architecture", "status",
    "tow", "tow_mia", "original_tow", "original_tow_mia", "m_u", "m_r",
    "forget_acc_u", "forget_acc_r", "retain_acc_u", "retain_acc_r", "test_acc_u", "test_acc_r", "seconds", "schema_version",
]


class ProtocolError(Exception):
    pass


def _git_revision() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def versions() -> dict:
    return {"memunlearn": __version__, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version(), "git": _git_revision()}


@dataclass
class RunRecord:
    config_hash: str
    protocol: str
    seed: int
    status: str = "ok"
    method: Optional[str] = None
    rum: Optional[bool] = None
    proxy: Optional[str] = None
    architecture: Optional[str] = None
    dataset: Optional[str] = None
    step: Optional[int] = None
    metrics: Optional[dict] = None
    original: Optional[dict] = None
    accuracies: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    split_digest: Optional[str] = None
    forget_ids: Optional[list] = None
    partitions: Optional[list] = None
    mia: dict = field(default_factory=dict)
    unlearn_config: Optional[dict] = None
    seconds: float = 0.0
    error: Optional[str] = None
    schema_version: int = SCHEMA_VERSION
    versions: dict = field(default_factory=versions)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, default=_jsonable)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))

    def summary_row(self) -> dict:
        m, o = self.metrics or {}, self.original or {}
        acc_u, acc_r = (m.get("acc_u") or {}), (m.get("acc_r") or {})
        return {
            "protocol": self.protocol, "seed": self.seed, "step": self.step, "method": self.method,
            "rum": self.rum, "proxy": self.proxy, "architecture": self.architecture, "status": self.status,
            "tow": m.get("tow"), "tow_mia": m.get("tow_mia"), "original_tow": o.get("tow"),
            "original_tow_mia": o.get("tow_mia"), "m_u": m.get("m_u"), "m_r": m.get("m_r"),
            "forget_acc_u": acc_u.get("forget_acc"), "forget_acc_r": acc_r.get("forget_acc"),
            "retain_acc_u": acc_u.get("retain_acc"), "retain_acc_r": acc_r.get("retain_acc"),
            "test_acc_u": acc_u.get("test_acc"), "test_acc_r": acc_r.get("test_acc"), "seconds": round(self.seconds, 3),
            "schema_version": self.schema_version,
        }


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


class RunLog:
    """Append-only ``records.jsonl`` plus split files and a checkpoint store."""

    def __init__(self, run_dir: str | Path, store: Optional[CheckpointStore] = None):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "splits").mkdir(exist_ok=True)
        self.store = store or CheckpointStore(self.run_dir / "store")
        self.records_path = self.run_dir / "records.jsonl"

    def append(self, record: RunRecord):
        with open(self.records_path, "a") as fh:
            fh.write(record.to_json() + "\n")

    def save_split(self, split: SplitSpec) -> str:
        digest = split.digest()
        path = self.run_dir / "splits" / f"{digest}.json"
        if not path.exists():
            path.write_text(split.to_text())
        return digest

    def load_split(self, digest: str) -> SplitSpec:
        return SplitSpec.from_text((self.run_dir / "splits" / f"{digest}.json").read_text())

    def records(self) -> list[RunRecord]:
        if not self.records_path.exists():
            return []
        return [RunRecord.from_json(l) for l in self.records_path.read_text().splitlines() if l.strip()]

    def write_summary(self, records=None):
        records = self.records() if records is None else records
        with open(self.run_dir / "summary.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            writer.writeheader()
            for r in records:
                writer.writerow(r.summary_row())


# -- shared stages -----------------------------------------------------------


def load_experiment_data(cfg: ExperimentConfig) -> DatasetHandle:
    d = cfg.dataset
    return load_dataset(d["name"], d.get("root", "data"), d.get("normalization", "default"), **cfg.dataset_options)


def fit_spec(spec: ModelSpec, data: DatasetHandle) -> ModelSpec:
    c, h, _ = data.image_shape
    return replace(spec, num_classes=data.num_classes, image_size=h, in_channels=c)


def seeded(cfg: TrainConfig, seed: int, **kw) -> TrainConfig:
    return TrainConfig.from_dict({**cfg.to_dict(), "seed": seed, **kw})


@dataclass
class Trained:
    """Everything a protocol needs about one seed's original model."""

    spec: ModelSpec
    split: SplitSpec
    holdout_ids: tuple
    init: Checkpoint
    theta_o: Checkpoint
    traj: TrajectorySnapshots
    theta_prime: Optional[Checkpoint]


def prepare(cfg: ExperimentConfig, data: DatasetHandle, seed: int, store: CheckpointStore,
            need_holdout: bool, spec: Optional[ModelSpec] = None, train_cfg: Optional[TrainConfig] = None,
            snapshots: bool = True) -> Trained:
    """Split, (pre)train the initialisation, train the original and holdout models."""
    spec = fit_spec(spec or cfg.model, data)
    base_cfg = train_cfg or cfg.train
    train_cfg = seeded(base_cfg, seed, snapshot_every=base_cfg.snapshot_every if snapshots else 0)
    split = make_splits(data, cfg.train_fraction, seed)
    split, aux_ids = carve(split, cfg.pretrain_fraction, seed + 1)
    holdout_ids: tuple = ()
    if need_holdout:
        split, holdout_ids = carve(split, cfg.holdout_fraction, seed + 2)

    if aux_ids and spec.differentiable:
        pre_cfg = seeded(cfg.pretrain or cfg.train, seed, snapshot_every=0)
        init, _ = train(spec, data, aux_ids, pre_cfg, lineage="pretrained")
    elif spec.differentiable:
        init = initial_checkpoint(spec, seed)
    else:
        init = None
    if init is not None:
        store.save(init)

    theta_o, traj = train(spec, data, split.train_ids, train_cfg, init=init, lineage="original")
    store.save(theta_o)
    theta_prime = None
    if need_holdout:
        theta_prime, _ = train(spec, data, holdout_ids, seeded(train_cfg, seed, snapshot_every=0), init=init,
                               lineage="holdout")
        store.save(theta_prime)
    return Trained(spec, split, holdout_ids, init, theta_o, traj, theta_prime)


def _accs(ckpt: Checkpoint, data, split: SplitSpec, forget_ids) -> dict:
    return {"forget": evaluate_accuracy(ckpt, data, forget_ids), "retain": evaluate_accuracy(ckpt, data, split.retain_ids),
            "test": evaluate_accuracy(ckpt, data, split.test_ids), "checkpoint": ckpt.ckpt_id}


def _evaluate(theta_u, theta_r, data, split: SplitSpec, forget_ids, seed, cfg: ExperimentConfig) -> MetricResult:
    return evaluate_pair(theta_u, theta_r, data, sorted(forget_ids), split.retain_ids, split.test_ids,
                         seed=seed, family=cfg.mia_family, variant=cfg.variant)


def _metric_dict(result: MetricResult) -> dict:
    return json.loads(json.dumps(result.to_dict(), default=_jsonable))


def _with_seed(u: UnlearnConfig, seed: int) -> UnlearnConfig:
    return UnlearnConfig.from_dict({**u.to_dict(), "seed": seed})


def _guarded(cfg: ExperimentConfig, seed: int, runlog: RunLog, body) -> list[RunRecord]:
    """Run one seed; a failure becomes a diagnostic record instead of an abort."""
    start = time.time()
    try:
        records = body()
    except Exception as exc:  # isolate seeds from each other
        log.exception("seed %s failed", seed)
        rec = RunRecord(cfg.config_hash, cfg.protocol, seed, status="failed",
                        error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=5)}",
                        seconds=time.time() - start)
        runlog.append(rec)
        return [rec]
    return records


def _unlearn_record(cfg, seed, data, trained: Trained, split, partitioning: ForgetPartitioning, theta_r,
                    original: MetricResult, ucfg: UnlearnConfig, runlog: RunLog, rum: bool = True,
                    step: Optional[int] = None, theta_start: Optional[Checkpoint] = None) -> RunRecord:
    start = time.time()
    theta_start = theta_start or trained.theta_o
    ucfg = _with_seed(ucfg, seed)
    forget_ids = partitioning.forget_ids
    if ucfg.method == "retrain":
        theta_u = theta_r
    elif rum:
        theta_u = rum_unlearn(theta_start, data, partitioning, split.retain_ids, ucfg)
    else:
        theta_u = bare_unlearn(theta_start, data, split.retain_ids, forget_ids, ucfg)
    runlog.store.save(theta_u)
    result = _evaluate(theta_u, theta_r, data, split, forget_ids, seed, cfg)
    return RunRecord(
        cfg.config_hash, cfg.protocol, seed, method=ucfg.method, rum=rum, proxy=cfg.proxy,
        architecture=trained.spec.architecture, dataset=data.name, step=step,
        metrics=_metric_dict(result), original=_metric_dict(original),
        accuracies={"original": _accs(trained.theta_o, data, split, forget_ids),
                    "retrained": _accs(theta_r, data, split, forget_ids),
                    "unlearned": _accs(theta_u, data, split, forget_ids)},
        checkpoints={"original": trained.theta_o.ckpt_id, "retrained": theta_r.ckpt_id, "unlearned": theta_u.ckpt_id,
                     "start": theta_start.ckpt_id, "init": trained.init.ckpt_id if trained.init else None,
                     "holdout": trained.theta_prime.ckpt_id if trained.theta_prime else None},
        split_digest=runlog.save_split(split), forget_ids=list(forget_ids),
        partitions=[list(p) for p in partitioning.partitions],
        mia={"seed": seed, "family": cfg.mia_family, "variant": cfg.variant},
        unlearn_config=ucfg.to_dict(), seconds=time.time() - start,
    )


def _proxy_for(cfg, data, trained: Trained, ids, model: Checkpoint, single_snapshot: bool):
    if cfg.proxy == "hr":
        return compute_proxy("hr", data, ids, theta_o=model, theta_prime=trained.theta_prime)
    if single_snapshot:
        traj = TrajectorySnapshots(tuple(sorted(ids)))
        traj.epochs.append(0)
        traj.probs.append(probs_matrix(model, data, traj.ids))
        return compute_proxy(cfg.proxy, data, ids, traj=traj)
    return compute_proxy(cfg.proxy, data, ids, traj=trained.traj)


# -- protocols ---------------------------------------------------------------


def run_single_shot(cfg: ExperimentConfig, runlog: RunLog, data: Optional[DatasetHandle] = None,
                    rum_modes=(True,)) -> list[RunRecord]:
    """Per seed: original model, proxy, partitions, retrained reference, then every
    configured method through RUM; each (seed, method, mode) yields one record."""
    data = data or load_experiment_data(cfg)
    out: list[RunRecord] = []
    for seed in cfg.seeds:
        def body(seed=seed):
            trained = prepare(cfg, data, seed, runlog.store, need_holdout=cfg.proxy == "hr",
                              snapshots=cfg.proxy != "hr")
            scores = _proxy_for(cfg, data, trained, trained.split.train_ids, trained.theta_o, single_snapshot=False)
            split, part = build_forget_partitioning(trained.split, scores.scores, cfg.M, cfg.N, cfg.strategy, seed,
                                                    cfg.proxy)
            theta_r = retrain_reference(trained.init, trained.spec, data, split.retain_ids, seeded(cfg.train, seed))
            runlog.store.save(theta_r)
            original = _evaluate(trained.theta_o, theta_r, data, split, part.forget_ids, seed, cfg)
            recs = []
            for ucfg in cfg.unlearn:
                for rum in rum_modes:
                    rec = _unlearn_record(cfg, seed, data, trained, split, part, theta_r, original, ucfg, runlog, rum)
                    runlog.append(rec)
                    recs.append(rec)
            return recs

        out.extend(_guarded(cfg, seed, runlog, body))
    runlog.write_summary()
    return out


def run_ablation_rum_vs_vanilla(cfg: ExperimentConfig, runlog: RunLog, data=None) -> list[RunRecord]:
    """Each method once bare on the whole forget set and once under RUM, same seeds."""
    return run_single_shot(cfg, runlog, data, rum_modes=(False, True))


def run_continual(cfg: ExperimentConfig, runlog: RunLog, data=None) -> list[RunRecord]:
    """Sequential removal: each step recomputes the proxy on the current model over
    the remaining pool, forgets M*N new ids, and is scored against a model
    retrained on everything not yet forgotten."""
    data = data or load_experiment_data(cfg)
    out: list[RunRecord] = []
    for seed in cfg.seeds:
        def body(seed=seed):
            trained = prepare(cfg, data, seed, runlog.store, need_holdout=cfg.proxy == "hr", snapshots=False)
            split = trained.split
            if cfg.steps * cfg.M * cfg.N > len(split.train_ids):
                raise ProtocolError(f"retain pool exhausted: {cfg.steps} steps of {cfg.M * cfg.N} "
                                    f"exceed {len(split.train_ids)} training ids")
            ucfg = cfg.unlearn[0]
            current = trained.theta_o
            recs = []
            for step in range(1, cfg.steps + 1):
                scores = _proxy_for(cfg, data, trained, split.retain_ids, current, single_snapshot=True)
                split, part = build_forget_partitioning(split, scores.scores, cfg.M, cfg.N, cfg.strategy,
                                                        seed + step, cfg.proxy)
                theta_r = retrain_reference(trained.init, trained.spec, data, split.retain_ids, seeded(cfg.train, seed))
                runlog.store.save(theta_r)
                original = _evaluate(trained.theta_o, theta_r, data, split, part.forget_ids, seed, cfg)
                rec = _unlearn_record(cfg, seed, data, trained, split, part, theta_r, original, ucfg, runlog,
                                      step=step, theta_start=current)
                current = runlog.store.load(rec.checkpoints["unlearned"])
                runlog.append(rec)
                recs.append(rec)
            return recs

        out.extend(_guarded(cfg, seed, runlog, body))
    runlog.write_summary()
    return out


@dataclass
class FidelityTable:
    """Spearman rho per (proxy, model) cell, averaged over seeds."""

    cells: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)

    def rho(self, proxy: str, model: str) -> float:
        return self.cells[(proxy, model)]

    def to_rows(self) -> list[dict]:
        models = sorted({m for _, m in self.cells})
        proxies = [p for p in ("conf", "maxconf", "ent", "ba", "hr") if any(k[0] == p for k in self.cells)]
        return [{"proxy": p, **{m: self.cells.get((p, m)) for m in models}} for p in proxies]

    def to_markdown(self) -> str:
        rows = self.to_rows()
        if not rows:
            return ""
        cols = list(rows[0])
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in rows:
            lines.append("| " + " | ".join(r[c] if c == "proxy" else f"{r[c]:+.2f}" for c in cols) + " |")
        return "\n".join(lines) + "\n"

    def write(self, run_dir: Path):
        rows = self.to_rows()
        with open(run_dir / "proxy_fidelity.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["proxy"])
            writer.writeheader()
            writer.writerows(rows)
        (run_dir / "proxy_fidelity.md").write_text(self.to_markdown())
        (run_dir / "proxy_fidelity.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.per_seed))


def run_proxy_validation(cfg: ExperimentConfig, runlog: RunLog, data=None) -> FidelityTable:
    """Memorization estimates vs every configured proxy, for every model spec."""
    data = data or load_experiment_data(cfg)
    table = FidelityTable()
    specs = cfg.models or [cfg.model]
    mem_cfg = cfg.mem_train or cfg.train
    for spec in specs:
        label = spec.architecture
        for seed in cfg.seeds:
            trained = prepare(cfg, data, seed, runlog.store, need_holdout="hr" in cfg.proxies, spec=spec,
                              train_cfg=mem_cfg)
            ids = trained.split.train_ids
            mem = estimate_memorization_subsample(trained.spec, seeded(mem_cfg, seed), data, ids,
                                                  cfg.mem_T, cfg.mem_p, seed, n_jobs=cfg.n_jobs)
            for kind in cfg.proxies:
                proxy = compute_proxy(kind, data, ids, traj=trained.traj, theta_o=trained.theta_o,
                                      theta_prime=trained.theta_prime)
                fid: ProxyFidelity = validate_proxy(mem, proxy, model=label, dataset=data.name)
                table.per_seed.append({"proxy": kind, "model": label, "seed": seed, "rho": fid.rho, "n": fid.n})
    for (kind, label) in {(r["proxy"], r["model"]) for r in table.per_seed}:
        vals = [r["rho"] for r in table.per_seed if r["proxy"] == kind and r["model"] == label]
        table.cells[(kind, label)] = float(np.mean(vals))
    table.write(runlog.run_dir)
    return table


def run(cfg: ExperimentConfig, out_dir: str | Path = "runs", data=None):
    run_dir = Path(out_dir) / f"{cfg.name}-{cfg.config_hash[:8]}"
    runlog = RunLog(run_dir)
    (run_dir / "config.json").write_text(json.dumps(cfg.raw, sort_keys=True, indent=2, default=str) + "\n")
    dispatch = {"single_shot": run_single_shot, "continual": run_continual,
                "ablation": run_ablation_rum_vs_vanilla, "proxy_validation": run_proxy_validation}
    return runlog, dispatch[cfg.protocol](cfg, runlog, data)


def reevaluate(record: RunRecord, runlog: RunLog, data: DatasetHandle) -> MetricResult:
    """Recompute a record's metrics from its stored checkpoints and split."""
    split = runlog.load_split(record.split_digest)
    theta_u = runlog.store.load(record.checkpoints["unlearned"])
    theta_r = runlog.store.load(record.checkpoints["retrained"])
    return evaluate_pair(theta_u, theta_r, data, sorted(record.forget_ids), split.retain_ids, split.test_ids,
                         seed=record.mia["seed"], family=record.mia["family"], variant=record.mia["variant"])
