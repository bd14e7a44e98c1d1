"""Accuracy gaps, membership-inference rates, ToW / ToW-MIA and confidence intervals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .backend import Checkpoint, losses_from_probs, probs_matrix
from .data import DatasetHandle


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class AccuracyTriple:
    forget_acc: float
    retain_acc: float
    test_acc: float
    checkpoint: str = ""


@dataclass(frozen=True)
class MIAClassifier:
    """Scalar-loss membership classifier: 1 = training, 0 = non-training."""

    family: str
    threshold: float = math.nan
    coef: float = 0.0
    intercept: float = 0.0
    train_accuracy: float = 0.5
    n_per_side: int = 0
    seed: int = 0

    def predict(self, losses) -> np.ndarray:
        x = np.asarray(losses, dtype=np.float64)
        if self.family == "threshold":
            return (x <= self.threshold).astype(np.int64)
        return (self.coef * x + self.intercept >= 0).astype(np.int64)


@dataclass(frozen=True)
class MetricResult:
    tow: float
    tow_mia: float
    m_u: float
    m_r: float
    delta_forget: float
    delta_retain: float
    delta_test: float
    variant: str = "three-term"
    acc_u: Optional[AccuracyTriple] = None
    acc_r: Optional[AccuracyTriple] = None

    @property
    def delta_m(self) -> float:
        return abs(self.m_u - self.m_r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_m"] = self.delta_m
        return d


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise MetricError("accuracy of an empty split")
    return float(np.mean(preds == labels))


def delta_a(theta_u: Checkpoint, theta_r: Checkpoint, data: DatasetHandle, ids: Sequence[int]) -> float:
    ids = list(ids)
    if not ids:
        raise MetricError("empty split")
    y = data.label_of(ids)
    a_u = accuracy(probs_matrix(theta_u, data, ids).argmax(1), y)
    a_r = accuracy(probs_matrix(theta_r, data, ids).argmax(1), y)
    return abs(a_u - a_r)


def tow_from_deltas(d_forget: float, d_retain: float, d_test: float = 0.0) -> float:
    return (1.0 - d_forget) * (1.0 - d_retain) * (1.0 - d_test)


def tow_mia_from_deltas(d_m: float, d_retain: float, d_test: float = 0.0) -> float:
    return (1.0 - d_m) * (1.0 - d_retain) * (1.0 - d_test)


def _check_disjoint(*splits):
    seen: set[int] = set()
    for s in splits:
        if not len(s):
            raise MetricError("every split must be non-empty")
        s = set(s)
        if seen & s:
            raise MetricError("evaluation splits overlap")
        seen |= s


# -- membership inference ----------------------------------------------------


def _balance(a: np.ndarray, b: np.ndarray, rng: np.random.Generator):
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), size=n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), size=n, replace=False))]
    return a, b


def _best_threshold(values: np.ndarray, is_member: np.ndarray) -> tuple[float, float]:
    """Threshold on ``loss <= t`` maximising accuracy; ties go to the midpoint
    of the lowest optimal interval."""
    v = np.unique(values)
    k = len(v)
    pos = np.searchsorted(v, values)
    member_counts = np.bincount(pos[is_member == 1], minlength=k)
    other_counts = np.bincount(pos[is_member == 0], minlength=k)
    # cut j labels v[0..j-1] as members
    members_below = np.concatenate([[0], np.cumsum(member_counts)])
    others_below = np.concatenate([[0], np.cumsum(other_counts)])
    correct = members_below + (others_below[-1] - others_below)
    best = correct.max()
    j1 = int(np.argmax(correct))
    j2 = j1
    while j2 + 1 <= k and correct[j2 + 1] == best:
        j2 += 1
    lower = v[j1 - 1] if j1 > 0 else None
    upper = v[j2] if j2 < k else None
    if lower is not None and upper is not None:
        t = (lower + upper) / 2.0
    elif lower is not None:
        t = float(lower)
    elif upper is not None:
        t = -math.inf
    else:
        t = float(v[0] + v[-1]) / 2.0
    return float(t), float(best) / len(values)


def fit_mia(losses_retain, losses_test, family: str = "threshold", seed: int = 0) -> MIAClassifier:
    """Fit a member/non-member classifier on balanced retain (1) vs test (0) losses."""
    a = np.asarray(losses_retain, dtype=np.float64)
    b = np.asarray(losses_test, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("both loss samples must be non-empty")
    a, b = _balance(a, b, np.random.default_rng(seed))
    x = np.concatenate([a, b])
    y = np.concatenate([np.ones(len(a), np.int64), np.zeros(len(b), np.int64)])
    if family == "threshold":
        t, acc = _best_threshold(x, y)
        return MIAClassifier("threshold", threshold=t, train_accuracy=acc, n_per_side=len(a), seed=seed)
    if family == "logistic":
        if np.all(x == x[0]):
            return MIAClassifier("logistic", coef=0.0, intercept=0.0, train_accuracy=0.5, n_per_side=len(a), seed=seed)
        from sklearn.linear_model import LogisticRegression

        scale = x.std()
        model = LogisticRegression(C=1e4).fit(((x - x.mean()) / scale)[:, None], y)
        coef = float(model.coef_[0, 0]) / scale
        intercept = float(model.intercept_[0]) - coef * x.mean()
        clf = MIAClassifier("logistic", coef=coef, intercept=intercept, n_per_side=len(a), seed=seed)
        acc = float(np.mean(clf.predict(x) == y))
        return MIAClassifier("logistic", coef=coef, intercept=intercept, train_accuracy=acc, n_per_side=len(a), seed=seed)
    raise MetricError(f"unknown classifier family {family!r}")


def mia_tn_rate(clf: MIAClassifier, losses_forget) -> float:
    """Fraction of forget-set losses classified as non-training."""
    x = np.asarray(losses_forget, dtype=np.float64)
    if len(x) == 0:
        raise MetricError("no forget losses")
    return float(np.mean(clf.predict(x) == 0))


def _sample_retain(retain_ids: Sequence[int], size: int, seed: int) -> list[int]:
    retain_ids = sorted(retain_ids)
    if len(retain_ids) <= size:
        return retain_ids
    rng = np.random.default_rng(seed)
    return sorted(np.asarray(retain_ids)[rng.choice(len(retain_ids), size=size, replace=False)].tolist())


def model_mia_rate(theta: Checkpoint, data: DatasetHandle, forget_ids, retain_ids, test_ids,
                   seed: int = 0, family: str = "threshold") -> float:
    """m(theta, D_f) with a classifier fit on this model's own losses."""
    sample = _sample_retain(retain_ids, len(test_ids), seed)
    loss = lambda ids: losses_from_probs(probs_matrix(theta, data, ids), data.label_of(ids))
    clf = fit_mia(loss(sample), loss(list(test_ids)), family, seed)
    return mia_tn_rate(clf, loss(list(forget_ids)))


# -- composite metrics -------------------------------------------------------


class _View:
    """Probabilities of one checkpoint on one split, computed once."""

    def __init__(self, ckpt, data, ids):
        self.ids = sorted(ids)
        self.labels = data.label_of(self.ids)
        self.probs = probs_matrix(ckpt, data, self.ids)

    @property
    def acc(self) -> float:
        return accuracy(self.probs.argmax(1), self.labels)

    def losses(self, subset=None) -> np.ndarray:
        losses = losses_from_probs(self.probs, self.labels)
        if subset is None:
            return losses
        pos = {i: k for k, i in enumerate(self.ids)}
        return losses[[pos[i] for i in subset]]


def _mia_from_views(views, retain_ids, test_len, seed, family) -> float:
    sample = _sample_retain(retain_ids, test_len, seed)
    clf = fit_mia(views["retain"].losses(sample), views["test"].losses(), family, seed)
    return mia_tn_rate(clf, views["forget"].losses())


def evaluate_pair(theta_u: Checkpoint, theta_r: Checkpoint, data: DatasetHandle, forget_ids, retain_ids,
                  test_ids, seed: int = 0, family: str = "threshold", variant: str = "three-term") -> MetricResult:
    """ToW and ToW-MIA of ``theta_u`` against the reference ``theta_r``.

    The membership classifier is fit separately for each model on its own
    losses. ``two-term`` merges retain and test into a single accuracy factor.
    """
    _check_disjoint(forget_ids, retain_ids, test_ids)
    splits = {"forget": forget_ids, "retain": retain_ids, "test": test_ids}
    vu = {k: _View(theta_u, data, v) for k, v in splits.items()}
    vr = {k: _View(theta_r, data, v) for k, v in splits.items()}
    m_u = _mia_from_views(vu, retain_ids, len(test_ids), seed, family)
    m_r = _mia_from_views(vr, retain_ids, len(test_ids), seed, family)
    d_f = abs(vu["forget"].acc - vr["forget"].acc)
    d_r = abs(vu["retain"].acc - vr["retain"].acc)
    d_t = abs(vu["test"].acc - vr["test"].acc)
    acc_u = AccuracyTriple(vu["forget"].acc, vu["retain"].acc, vu["test"].acc, theta_u.ckpt_id)
    acc_r = AccuracyTriple(vr["forget"].acc, vr["retain"].acc, vr["test"].acc, theta_r.ckpt_id)
    if variant == "three-term":
        return MetricResult(tow_from_deltas(d_f, d_r, d_t), tow_mia_from_deltas(abs(m_u - m_r), d_r, d_t),
                            m_u, m_r, d_f, d_r, d_t, variant, acc_u, acc_r)
    if variant == "two-term":
        rt = list(retain_ids) + list(test_ids)
        n = len(rt)
        a_u = (acc_u.retain_acc * len(retain_ids) + acc_u.test_acc * len(test_ids)) / n
        a_r = (acc_r.retain_acc * len(retain_ids) + acc_r.test_acc * len(test_ids)) / n
        d_rt = abs(a_u - a_r)
        return MetricResult(tow_from_deltas(d_f, d_rt), tow_mia_from_deltas(abs(m_u - m_r), d_rt),
                            m_u, m_r, d_f, d_rt, 0.0, variant, acc_u, acc_r)
    raise MetricError(f"unknown variant {variant!r}")


def tow(theta_u, theta_r, data, forget_ids, retain_ids, test_ids) -> float:
    _check_disjoint(forget_ids, retain_ids, test_ids)
    return tow_from_deltas(delta_a(theta_u, theta_r, data, forget_ids), delta_a(theta_u, theta_r, data, retain_ids),
                           delta_a(theta_u, theta_r, data, test_ids))


def tow_mia(theta_u, theta_r, data, forget_ids, retain_ids, test_ids, seed=0, family="threshold") -> float:
    return evaluate_pair(theta_u, theta_r, data, forget_ids, retain_ids, test_ids, seed, family).tow_mia


def tow_two_term(theta_u, theta_r, data, forget_ids, retain_test_ids) -> float:
    if set(forget_ids) & set(retain_test_ids):
        raise MetricError("evaluation splits overlap")
    return tow_from_deltas(delta_a(theta_u, theta_r, data, forget_ids), delta_a(theta_u, theta_r, data, retain_test_ids))


def tow_mia_two_term(theta_u, theta_r, data, forget_ids, retain_ids, test_ids, seed=0, family="threshold") -> float:
    return evaluate_pair(theta_u, theta_r, data, forget_ids, retain_ids, test_ids, seed, family, "two-term").tow_mia


def original_baseline(theta_o, theta_r, data, forget_ids, retain_ids, test_ids, seed=0, family="threshold",
                      variant="three-term") -> MetricResult:
    """Metrics of the untouched original model, i.e. of doing no unlearning."""
    return evaluate_pair(theta_o, theta_r, data, forget_ids, retain_ids, test_ids, seed, family, variant)


def aggregate_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        raise MetricError("a confidence interval needs at least two values")
    sd = x.std(ddof=1)
    q = stats.t.ppf((1 + level) / 2, len(x) - 1)
    return float(x.mean()), float(q * sd / math.sqrt(len(x)))


def format_ci(mean: float, half_width: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {half_width:.{digits}f}"
