"""Unlearning algorithms and the partition-sequential RUM driver."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backend import (
    Checkpoint,
    NotDifferentiable,
    TrainConfig,
    TrainingDivergence,
    checkpoint_from_module,
    loss_gradient,
    make_optimizer,
    make_scheduler,
    module_from,
    train,
)
from .data import DatasetHandle, ForgetPartitioning

METHODS = ("finetune", "neggrad_plus", "salun", "retrain")

# unlearning hyper-parameters for the two transformer families
PAPER_DEFAULTS = {
    ("finetune", "vit"): dict(unlearn_lr=1e-4),
    ("finetune", "hier"): dict(unlearn_lr=1e-4),
    ("neggrad_plus", "vit"): dict(unlearn_lr=2e-5, beta=0.97),
    ("neggrad_plus", "hier"): dict(unlearn_lr=2e-5, beta=0.97),
    ("salun", "vit"): dict(unlearn_lr=5e-5, alpha=1.0, gamma=0.1),
    ("salun", "hier"): dict(unlearn_lr=2e-4, alpha=1.0, gamma=0.3),
}


class UnlearnError(Exception):
    pass


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "finetune"
    epochs: tuple[int, ...] = (5, 5, 10)
    unlearn_lr: float = 1e-4
    beta: Optional[float] = None
    gamma: Optional[float] = None
    alpha: Optional[float] = None
    seed: int = 0
    batch_size: int = 128
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    lr_schedule: str = "cosine-anneal"
    saliency_mode: str = "fraction"
    vanilla_epochs: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        if self.method not in METHODS:
            raise UnlearnError(f"unknown method {self.method!r}")
        if any(e < 0 for e in self.epochs):
            raise UnlearnError("epochs must be non-negative")
        if self.unlearn_lr <= 0 or self.batch_size <= 0:
            raise UnlearnError("unlearn_lr and batch_size must be positive")
        if self.method == "neggrad_plus":
            if self.beta is None:
                object.__setattr__(self, "beta", 0.97)
            if not 0 < self.beta <= 1:
                raise UnlearnError("beta must lie in (0, 1]")
        elif self.beta is not None:
            raise UnlearnError("beta applies to neggrad_plus only")
        if self.method == "salun":
            if self.gamma is None:
                object.__setattr__(self, "gamma", 0.1)
            if self.alpha is None:
                object.__setattr__(self, "alpha", 1.0)
            if self.saliency_mode == "fraction" and not 0 < self.gamma <= 1:
                raise UnlearnError("gamma must lie in (0, 1]")
            if self.alpha < 0:
                raise UnlearnError("alpha must be non-negative")
        elif self.gamma is not None or self.alpha is not None:
            raise UnlearnError("gamma and alpha apply to salun only")
        if self.saliency_mode not in ("fraction", "threshold"):
            raise UnlearnError(f"unknown saliency mode {self.saliency_mode!r}")

    @classmethod
    def paper_default(cls, method: str, family: str = "vit", **kw) -> "UnlearnConfig":
        base = dict(PAPER_DEFAULTS.get((method, family), {}))
        return cls(method=method, **{**base, **kw})

    @property
    def bare_epochs(self) -> int:
        return self.vanilla_epochs if self.vanilla_epochs is not None else sum(self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "UnlearnConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class SaliencyMask:
    mask: torch.Tensor
    gamma: float

    @property
    def selected_fraction(self) -> float:
        return float(self.mask.float().mean())


def stage_seed(seed: int, stage: int) -> int:
    return seed + 7919 * stage


def _check_differentiable(ckpt: Checkpoint):
    if not ckpt.model_spec.differentiable:
        raise NotDifferentiable("unlearning needs a differentiable backend")


class _Stream:
    """Endless shuffled minibatches over a fixed id list."""

    def __init__(self, n: int, batch_size: int, gen: torch.Generator):
        self.n, self.batch_size, self.gen = n, batch_size, gen
        self._queue: list[torch.Tensor] = []

    def epoch(self) -> list[torch.Tensor]:
        perm = torch.randperm(self.n, generator=self.gen)
        return [perm[s : s + self.batch_size] for s in range(0, self.n, self.batch_size)]

    def next(self) -> torch.Tensor:
        if not self._queue:
            self._queue = self.epoch()
        return self._queue.pop(0)


def _ce(module, x, y):
    return F.cross_entropy(module(x.to(next(module.parameters()).dtype)), y)


def _finish(module, theta_o: Checkpoint, cfg: UnlearnConfig, meta: dict) -> Checkpoint:
    return checkpoint_from_module(module, theta_o.model_spec, "unlearned", theta_o.train_config,
                                  parent=theta_o.ckpt_id, meta={"unlearn_config": cfg.to_dict(), **meta})


def _setup(theta_o, cfg, epochs):
    module = module_from(theta_o)
    opt = make_optimizer(module, cfg.optimizer, cfg.unlearn_lr, cfg.weight_decay)
    sched = make_scheduler(opt, cfg.lr_schedule, epochs)
    return module, opt, sched


def finetune_unlearn(theta_o: Checkpoint, data: DatasetHandle, retain_ids: Sequence[int], cfg: UnlearnConfig,
                     epochs: Optional[int] = None, stage: int = 0) -> Checkpoint:
    """Continue cross-entropy training on the retain set only."""
    _check_differentiable(theta_o)
    epochs = cfg.bare_epochs if epochs is None else epochs
    retain_ids = sorted(retain_ids)
    if not retain_ids:
        raise UnlearnError("retain set is empty")
    module, opt, sched = _setup(theta_o, cfg, epochs)
    seed = stage_seed(cfg.seed, stage)
    retain = _Stream(len(retain_ids), cfg.batch_size, torch.Generator().manual_seed(seed))
    xr, yr = data.subset(retain_ids)
    history, step = [], 0
    for _ in range(epochs):
        module.train()
        total = 0.0
        for idx in retain.epoch():
            step += 1
            loss = _ce(module, xr[idx], yr[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence("step", step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        history.append(total / len(retain_ids))
    return _finish(module, theta_o, cfg, {"retain_loss_history": history, "epochs": epochs})


def neggrad_plus_combine(loss_retain, loss_forget, beta: float):
    return beta * loss_retain - (1.0 - beta) * loss_forget


def neggrad_plus_objective(module, xr, yr, xf, yf, beta: float):
    """beta * CE(retain batch) - (1 - beta) * CE(forget batch)."""
    return neggrad_plus_combine(_ce(module, xr, yr), _ce(module, xf, yf), beta)


def neggrad_plus_unlearn(theta_o: Checkpoint, data: DatasetHandle, retain_ids: Sequence[int],
                         forget_ids: Sequence[int], cfg: UnlearnConfig, epochs: Optional[int] = None,
                         stage: int = 0) -> Checkpoint:
    """Descend on the retain set while ascending on the forget set.

    Each step pairs one retain batch with the next forget batch; forget
    batches cycle when the forget set is exhausted.
    """
    _check_differentiable(theta_o)
    if cfg.method != "neggrad_plus":
        raise UnlearnError("config is not a neggrad_plus config")
    epochs = cfg.bare_epochs if epochs is None else epochs
    retain_ids, forget_ids = sorted(retain_ids), sorted(forget_ids)
    if not retain_ids or not forget_ids:
        raise UnlearnError("retain and forget sets must be non-empty")
    module, opt, sched = _setup(theta_o, cfg, epochs)
    seed = stage_seed(cfg.seed, stage)
    retain = _Stream(len(retain_ids), cfg.batch_size, torch.Generator().manual_seed(seed))
    forget = _Stream(len(forget_ids), cfg.batch_size, torch.Generator().manual_seed(seed + 1))
    xr, yr = data.subset(retain_ids)
    xf, yf = data.subset(forget_ids)
    step = 0
    for _ in range(epochs):
        module.train()
        for idx in retain.epoch():
            step += 1
            fidx = forget.next()
            loss = neggrad_plus_objective(module, xr[idx], yr[idx], xf[fidx], yf[fidx], cfg.beta)
            if not torch.isfinite(loss):
                raise TrainingDivergence("step", step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return _finish(module, theta_o, cfg, {"epochs": epochs, "steps": step})


def _ceil_fraction(gamma: float, total: int) -> int:
    # round away float noise such as 0.3 * 10 = 3.0000000000000004
    return min(total, max(1, math.ceil(round(gamma * total, 9))))


def saliency_from_gradient(grad: torch.Tensor, gamma: float, mode: str = "fraction") -> SaliencyMask:
    """Select parameters by forget-loss gradient magnitude.

    ``fraction``: the ceil(gamma * P) largest magnitudes, lower index first on
    ties. ``threshold``: every coordinate with magnitude >= gamma.
    """
    mag = grad.detach().abs().double().numpy()
    if mode == "threshold":
        return SaliencyMask(torch.from_numpy(mag >= gamma), gamma)
    k = _ceil_fraction(gamma, len(mag))
    order = np.argsort(-mag, kind="stable")[:k]
    mask = np.zeros(len(mag), dtype=bool)
    mask[order] = True
    return SaliencyMask(torch.from_numpy(mask), gamma)


def salun_mask(theta: Checkpoint, data: DatasetHandle, forget_ids: Sequence[int], gamma: float,
               mode: str = "fraction") -> SaliencyMask:
    if mode == "fraction" and not 0 < gamma <= 1:
        raise UnlearnError("gamma must lie in (0, 1]")
    grad = loss_gradient(theta, data, sorted(forget_ids))
    return saliency_from_gradient(grad, gamma, mode)


def _split_mask(mask: torch.Tensor, module) -> dict[str, torch.Tensor]:
    out, start = {}, 0
    for name, t in module.state_dict(keep_vars=True).items():
        out[name] = mask[start : start + t.numel()].view_as(t)
        start += t.numel()
    return out


def wrong_labels(labels: torch.Tensor, num_classes: int, gen: torch.Generator) -> torch.Tensor:
    """Uniformly drawn labels different from ``labels``."""
    shift = torch.randint(1, num_classes, labels.shape, generator=gen)
    return (labels + shift) % num_classes


def salun_unlearn(theta_o: Checkpoint, data: DatasetHandle, retain_ids: Sequence[int], forget_ids: Sequence[int],
                  cfg: UnlearnConfig, epochs: Optional[int] = None, stage: int = 0,
                  mask: Optional[SaliencyMask] = None) -> Checkpoint:
    """Train alpha * CE(forget, wrong labels) + CE(retain) on salient parameters only.

    Wrong labels are redrawn each epoch. Parameters outside the mask are copied
    back from ``theta_o`` after every step, so they stay bit-identical.
    """
    _check_differentiable(theta_o)
    if cfg.method != "salun":
        raise UnlearnError("config is not a salun config")
    k = theta_o.model_spec.num_classes
    if k < 2:
        raise UnlearnError("label perturbation needs at least two classes")
    epochs = cfg.bare_epochs if epochs is None else epochs
    retain_ids, forget_ids = sorted(retain_ids), sorted(forget_ids)
    if not retain_ids or not forget_ids:
        raise UnlearnError("retain and forget sets must be non-empty")
    if mask is None:
        mask = salun_mask(theta_o, data, forget_ids, cfg.gamma, cfg.saliency_mode)
    module, opt, sched = _setup(theta_o, cfg, epochs)
    masks = _split_mask(mask.mask, module)
    params = dict(module.named_parameters())
    frozen = {n: params[n].detach().clone() for n in params}
    seed = stage_seed(cfg.seed, stage)
    retain = _Stream(len(retain_ids), cfg.batch_size, torch.Generator().manual_seed(seed))
    gen_f = torch.Generator().manual_seed(seed + 1)
    forget = _Stream(len(forget_ids), cfg.batch_size, gen_f)
    xr, yr = data.subset(retain_ids)
    xf, yf = data.subset(forget_ids)
    step = 0
    for _ in range(epochs):
        module.train()
        yf_wrong = wrong_labels(yf, k, gen_f)
        for idx in retain.epoch():
            step += 1
            fidx = forget.next()
            loss = cfg.alpha * _ce(module, xf[fidx], yf_wrong[fidx]) + _ce(module, xr[idx], yr[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence("step", step, loss.item())
            opt.zero_grad()
            loss.backward()
            for n, p in params.items():
                if p.grad is not None:
                    p.grad.mul_(masks[n].to(p.grad.dtype))
            opt.step()
            with torch.no_grad():
                for n, p in params.items():
                    keep = ~masks[n]
                    p[keep] = frozen[n][keep]
        sched.step()
    return _finish(module, theta_o, cfg, {"epochs": epochs, "mask_fraction": mask.selected_fraction})


def retrain_reference(init: Optional[Checkpoint], spec, data: DatasetHandle, retain_ids: Sequence[int],
                      cfg: TrainConfig) -> Checkpoint:
    """Train on the retain set alone from the same starting point as the original model."""
    ckpt, _ = train(spec, data, retain_ids, TrainConfig.from_dict({**cfg.to_dict(), "snapshot_every": 0}),
                    init=init, lineage="retrained")
    return ckpt


def unlearn_once(theta: Checkpoint, data: DatasetHandle, retain_ids, forget_ids, cfg: UnlearnConfig,
                 epochs: Optional[int] = None, stage: int = 0) -> Checkpoint:
    if cfg.method == "finetune":
        return finetune_unlearn(theta, data, retain_ids, cfg, epochs, stage)
    if cfg.method == "neggrad_plus":
        return neggrad_plus_unlearn(theta, data, retain_ids, forget_ids, cfg, epochs, stage)
    if cfg.method == "salun":
        return salun_unlearn(theta, data, retain_ids, forget_ids, cfg, epochs, stage)
    raise UnlearnError("retrain is produced by retrain_reference, not by an unlearning step")


def rum_unlearn(theta_o: Checkpoint, data: DatasetHandle, partitioning: ForgetPartitioning,
                retain_ids: Sequence[int], cfg: UnlearnConfig) -> Checkpoint:
    """Unlearn partitions one after another in ascending proxy order.

    At stage k the forget set is partition k and the retain set is the base
    retain set plus every partition not yet processed; stage k starts from the
    output of stage k-1.
    """
    parts = partitioning.partitions
    if len(cfg.epochs) != len(parts):
        raise UnlearnError(f"{len(parts)} partitions but {len(cfg.epochs)} epoch entries")
    partitioning.check()
    base = set(int(i) for i in retain_ids)
    if base & set(partitioning.forget_ids):
        raise UnlearnError("retain set overlaps the forget partitions")
    theta = theta_o
    for k, (part, epochs) in enumerate(zip(parts, cfg.epochs)):
        pending = {i for later in parts[k + 1 :] for i in later}
        theta = unlearn_once(theta, data, sorted(base | pending), part, cfg, epochs, stage=k)
    return replace(theta, parent=theta_o.ckpt_id,
                   meta={**theta.meta, "rum_partitions": [len(p) for p in parts], "unlearn_config": cfg.to_dict()})


def bare_unlearn(theta_o: Checkpoint, data: DatasetHandle, retain_ids, forget_ids, cfg: UnlearnConfig) -> Checkpoint:
    """Vanilla run: the whole forget set at once for ``cfg.bare_epochs`` epochs."""
    theta = unlearn_once(theta_o, data, retain_ids, forget_ids, cfg, cfg.bare_epochs, stage=0)
    return replace(theta, parent=theta_o.ckpt_id)
