"""Memorization scores, cheap memorization proxies, and rank-correlation checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .backend import (
    EPS,
    BackendError,
    Checkpoint,
    ModelSpec,
    TrainConfig,
    TrajectorySnapshots,
    predictions,
    probs_matrix,
    train,
)
from .data import DatasetHandle

PROXY_KINDS = ("conf", "maxconf", "ent", "ba", "hr")


class MemorizationError(Exception):
    pass


class UndefinedCorrelation(MemorizationError):
    pass


@dataclass
class MemScores:
    scores: dict[int, float]
    estimator: str
    T: int = 0
    inclusion_fraction: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"kind": "mem", "estimator": self.estimator, "T": self.T, "p": self.inclusion_fraction,
                "seed": self.seed, **self.meta}


@dataclass
class ProxyScores:
    scores: dict[int, float]
    kind: str
    source: str = ""

    def header(self) -> dict:
        return {"kind": self.kind, "source": self.source}


@dataclass(frozen=True)
class ProxyFidelity:
    rho: float
    n: int
    proxy_kind: str
    model: str = ""
    dataset: str = ""


def write_scores(path: str | Path, scores: Mapping[int, float], header: Mapping):
    """Two-column ``id<TAB>score`` table preceded by ``# key: value`` lines."""
    lines = [f"# {k}: {v}" for k, v in header.items()]
    lines += [f"{i}\t{scores[i]!r}" for i in sorted(scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path) -> tuple[dict, dict[int, float]]:
    header, scores = {}, {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            i, s = line.split("\t")
            scores[int(i)] = float(s)
    return header, scores


# -- memorization ------------------------------------------------------------


def _subset_masks(n: int, T: int, p: float, rng: np.random.Generator) -> np.ndarray:
    k = int(round(p * n))
    masks = np.zeros((T, n), dtype=bool)
    for t in range(T):
        masks[t, rng.choice(n, size=k, replace=False)] = True
    return masks


def estimate_memorization_subsample(
    spec: ModelSpec,
    cfg: TrainConfig,
    data: DatasetHandle,
    train_ids: Sequence[int],
    T: int = 200,
    p: float = 0.7,
    seed: int = 0,
    max_resample: int = 20,
    n_jobs: int = 1,
) -> MemScores:
    """Subsampled estimate of the leave-one-out memorization score.

    Trains ``T`` models on random ``p``-fractions of ``train_ids`` and scores each
    id as (accuracy on it over models that saw it) minus (accuracy over models
    that did not). The subset draw is repeated until every id is both included
    and excluded at least once.
    """
    ids = np.asarray(sorted(int(i) for i in train_ids))
    if T < 2:
        raise MemorizationError("T must be at least 2")
    if not 0 < p < 1:
        raise MemorizationError("inclusion fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(max_resample):
        masks = _subset_masks(len(ids), T, p, rng)
        counts = masks.sum(axis=0)
        if counts.min() >= 1 and counts.max() <= T - 1:
            break
    else:
        raise MemorizationError(f"some id was never included or never excluded after {max_resample} draws")

    labels = data.label_of(ids)

    def run(t: int) -> np.ndarray:
        sub_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed * 100003 + t, "snapshot_every": 0})
        ckpt, _ = train(spec, data, ids[masks[t]], sub_cfg, lineage="subset")
        return predictions(ckpt, data, ids) == labels

    if n_jobs == 1:
        correct = np.stack([run(t) for t in range(T)])
    else:
        from joblib import Parallel, delayed

        correct = np.stack(Parallel(n_jobs=n_jobs)(delayed(run)(t) for t in range(T)))

    inc = (correct & masks).sum(axis=0) / masks.sum(axis=0)
    exc = (correct & ~masks).sum(axis=0) / (~masks).sum(axis=0)
    return MemScores(dict(zip(ids.tolist(), (inc - exc).tolist())), "subsample", T, p, seed)


def leave_one_out_memorization(spec: ModelSpec, data: DatasetHandle, train_ids: Sequence[int]) -> MemScores:
    """Exact memorization scores for a deterministic learner (1-NN)."""
    if spec.differentiable:
        raise MemorizationError("leave-one-out is exact only for the deterministic backend")
    ids = sorted(int(i) for i in train_ids)
    cfg = TrainConfig(epochs=0, snapshot_every=0)
    full, _ = train(spec, data, ids, cfg, lineage="subset")
    labels = data.label_of(ids)
    with_i = predictions(full, data, ids) == labels
    scores = {}
    for k, i in enumerate(ids):
        rest = ids[:k] + ids[k + 1 :]
        without, _ = train(spec, data, rest, cfg, lineage="subset")
        scores[i] = float(with_i[k]) - float(predictions(without, data, [i])[0] == labels[k])
    return MemScores(scores, "leave-one-out", len(ids), 1.0, 0)


# -- proxies -----------------------------------------------------------------


def _trajectory_probs(traj: TrajectorySnapshots, ids: Sequence[int]) -> np.ndarray:
    if len(traj) == 0:
        raise MemorizationError("trajectory holds no snapshots")
    pos = {i: k for k, i in enumerate(traj.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise MemorizationError(f"{len(missing)} ids are not covered by the snapshots, e.g. {missing[0]}")
    return traj.stacked()[:, [pos[i] for i in ids], :]


def _proxy(traj, data, ids, kind, fn) -> ProxyScores:
    ids = sorted(int(i) for i in (traj.ids if ids is None else ids))
    probs = _trajectory_probs(traj, ids)
    values = fn(probs, data.label_of(ids))
    return ProxyScores(dict(zip(ids, values.tolist())), kind, f"trajectory[E={len(traj)}]")


def proxy_conf(traj: TrajectorySnapshots, data: DatasetHandle, ids=None) -> ProxyScores:
    """Mean over snapshots of the probability of the true label."""
    return _proxy(traj, data, ids, "conf", lambda P, y: P[:, np.arange(len(y)), y].mean(axis=0))


def proxy_maxconf(traj: TrajectorySnapshots, data: DatasetHandle, ids=None) -> ProxyScores:
    return _proxy(traj, data, ids, "maxconf", lambda P, y: P.max(axis=2).mean(axis=0))


def proxy_ent(traj: TrajectorySnapshots, data: DatasetHandle, ids=None) -> ProxyScores:
    """Mean over snapshots of sum_y P log P.

    No leading minus sign: this is the negative Shannon entropy, so it is
    always <= 0 and grows with confidence.
    """
    def f(P, y):
        return (P * np.log(np.maximum(P, EPS))).sum(axis=2).mean(axis=0)

    return _proxy(traj, data, ids, "ent", f)


def proxy_ba(traj: TrajectorySnapshots, data: DatasetHandle, ids=None) -> ProxyScores:
    return _proxy(traj, data, ids, "ba", lambda P, y: (P.argmax(axis=2) == y).mean(axis=0))


def sym_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p||q) + KL(q||p) with natural log and clamped probabilities."""
    p = np.maximum(np.asarray(p, dtype=np.float64), EPS)
    q = np.maximum(np.asarray(q, dtype=np.float64), EPS)
    return ((p - q) * (np.log(p) - np.log(q))).sum(axis=-1)


def proxy_hr(theta_o: Checkpoint, theta_prime: Checkpoint, data: DatasetHandle, ids: Sequence[int]) -> ProxyScores:
    """Holdout-retraining proxy: symmetric KL between the original model and one
    trained on a disjoint holdout split."""
    if theta_o.model_spec.num_classes != theta_prime.model_spec.num_classes:
        raise MemorizationError("models disagree on the number of classes")
    ids = sorted(int(i) for i in ids)
    values = sym_kl(probs_matrix(theta_o, data, ids), probs_matrix(theta_prime, data, ids))
    return ProxyScores(dict(zip(ids, values.tolist())), "hr", f"{theta_o.ckpt_id}|{theta_prime.ckpt_id}")


def compute_proxy(kind: str, data: DatasetHandle, ids, traj=None, theta_o=None, theta_prime=None) -> ProxyScores:
    if kind == "hr":
        if theta_o is None or theta_prime is None:
            raise MemorizationError("hr needs the original and the holdout model")
        return proxy_hr(theta_o, theta_prime, data, ids)
    fns = {"conf": proxy_conf, "maxconf": proxy_maxconf, "ent": proxy_ent, "ba": proxy_ba}
    if kind not in fns:
        raise MemorizationError(f"unknown proxy {kind!r}")
    if traj is None:
        raise MemorizationError(f"{kind} needs a training trajectory")
    return fns[kind](traj, data, ids)


# -- rank correlation --------------------------------------------------------


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sorted_v = v[order]
    start = 0
    for end in range(1, len(v) + 1):
        if end == len(v) or sorted_v[end] != sorted_v[start]:
            ranks[order[start:end]] = (start + end + 1) / 2.0
            start = end
    return ranks


def spearman_rho(x: Mapping[int, float], y: Mapping[int, float]) -> float:
    """Pearson correlation of mid-ranks over the shared ids of ``x`` and ``y``."""
    if set(x) != set(y):
        raise MemorizationError("inputs cover different ids")
    keys = sorted(x)
    if len(keys) < 2:
        raise MemorizationError("need at least two observations")
    rx = midranks([x[k] for k in keys])
    ry = midranks([y[k] for k in keys])
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        raise UndefinedCorrelation("an input is constant, so its ranks have no variance")
    return float(np.clip(float(dx @ dy) / denom, -1.0, 1.0))


def validate_proxy(mem: MemScores, proxy: ProxyScores, min_overlap: int = 10, model="", dataset="") -> ProxyFidelity:
    shared = set(mem.scores) & set(proxy.scores)
    if len(shared) < min_overlap:
        raise MemorizationError(f"only {len(shared)} ids are shared, need {min_overlap}")
    rho = spearman_rho({i: mem.scores[i] for i in shared}, {i: proxy.scores[i] for i in shared})
    return ProxyFidelity(rho, len(shared), proxy.kind, model, dataset)
