"""Model backends: architectures, seeded training, inference and gradients."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetHandle

EPS = 1e-12
ARCHITECTURES = ("tiny-vit", "small-cnn", "tiny-hier", "mlp", "knn-deterministic")
LINEAGES = ("init", "pretrained", "original", "retrained", "unlearned", "subset", "holdout")


class BackendError(Exception):
    pass


class TrainingDivergence(BackendError):
    def __init__(self, where: str, index: int, value: float):
        super().__init__(f"non-finite loss {value} at {where} {index}")
        self.where, self.index, self.value = where, index, value


class NotDifferentiable(BackendError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "tiny-vit"
    num_classes: int = 10
    image_size: int = 32
    in_channels: int = 3
    depth: int = 4
    width: int = 64
    heads: int = 4
    patch_size: int = 4
    mlp_ratio: int = 4
    window: int = 4
    pretrained_init: Optional[str] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise BackendError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 1:
            raise BackendError("num_classes must be positive")

    @property
    def differentiable(self) -> bool:
        return self.architecture != "knn-deterministic"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**dict(d))


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe. Defaults follow the transformer memorization recipe
    (AdamW, lr 1e-4, weight decay 0.05, cosine annealing, batch 128, 30 epochs)."""

    optimizer: str = "adamw"
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 128
    lr_schedule: str = "cosine-anneal"
    momentum: Optional[float] = None
    seed: int = 0
    snapshot_every: int = 1
    augment: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise BackendError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine-anneal", "step-decay", "constant"):
            raise BackendError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.base_lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise BackendError("lr and batch size must be positive, epochs non-negative")
        if self.momentum is not None and self.optimizer != "sgd":
            raise BackendError("momentum is only meaningful with sgd")

    @classmethod
    def original_default(cls, **kw) -> "TrainConfig":
        """Recipe for original and retrained models: 50 epochs with crop + flip."""
        return cls(**{"epochs": 50, "augment": True, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


# -- architectures -----------------------------------------------------------


class MLP(nn.Module):
    """Two-layer tanh network; the gradient-check probe."""

    def __init__(self, in_features, hidden, num_classes):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


class SmallCNN(nn.Module):
    def __init__(self, in_channels, width, num_classes):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width // 2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width // 2, width, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(width, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class Block(nn.Module):
    """Pre-norm encoder block: multi-head self-attention then an MLP."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        if spec.image_size % spec.patch_size:
            raise BackendError("image_size must be divisible by patch_size")
        n_patches = (spec.image_size // spec.patch_size) ** 2
        self.patch_embed = nn.Conv2d(spec.in_channels, spec.width, spec.patch_size, spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.width))
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches + 1, spec.width) * 0.02)
        self.blocks = nn.ModuleList(Block(spec.width, spec.heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.width)
        self.head = nn.Linear(spec.width, spec.num_classes)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(len(x), -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[:, 0]))


class WindowBlock(Block):
    """Encoder block whose attention is restricted to non-overlapping windows."""

    def __init__(self, dim, heads, mlp_ratio, window):
        super().__init__(dim, heads, mlp_ratio)
        self.window = window

    def forward(self, x, hw):
        b, n, c = x.shape
        h, w = hw
        ws = min(self.window, h, w)
        t = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        a = self.norm1(t)
        t = t + self.attn(a, a, a, need_weights=False)[0]
        t = t.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(b, n, c)
        return t + self.mlp(self.norm2(t))


class TinyHier(nn.Module):
    """Windowed-attention stage, one 2x2 patch-merging step, second stage."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        d = spec.width
        self.grid = spec.image_size // spec.patch_size
        if self.grid % 2 or spec.image_size % spec.patch_size:
            raise BackendError("tiny-hier needs an even patch grid")
        self.patch_embed = nn.Conv2d(spec.in_channels, d, spec.patch_size, spec.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid**2, d) * 0.02)
        half = max(spec.depth // 2, 1)
        self.stage1 = nn.ModuleList(WindowBlock(d, spec.heads, spec.mlp_ratio, spec.window) for _ in range(half))
        self.merge_norm = nn.LayerNorm(4 * d)
        self.merge = nn.Linear(4 * d, 2 * d)
        self.stage2 = nn.ModuleList(WindowBlock(2 * d, spec.heads, spec.mlp_ratio, spec.window) for _ in range(half))
        self.norm = nn.LayerNorm(2 * d)
        self.head = nn.Linear(2 * d, spec.num_classes)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        g = self.grid
        for block in self.stage1:
            x = block(x, (g, g))
        b, _, c = x.shape
        x = x.view(b, g // 2, 2, g // 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, (g // 2) ** 2, 4 * c)
        x = self.merge(self.merge_norm(x))
        for block in self.stage2:
            x = block(x, (g // 2, g // 2))
        return self.head(self.norm(x.mean(dim=1)))


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    if not spec.differentiable:
        raise NotDifferentiable("knn-deterministic has no torch module")
    torch.manual_seed(seed)
    if spec.architecture == "tiny-vit":
        return TinyViT(spec)
    if spec.architecture == "tiny-hier":
        return TinyHier(spec)
    if spec.architecture == "small-cnn":
        return SmallCNN(spec.in_channels, spec.width, spec.num_classes)
    return MLP(spec.in_channels * spec.image_size**2, spec.width, spec.num_classes)


def parameter_count(spec: ModelSpec) -> int:
    return sum(p.numel() for p in build_model(spec).parameters())


# -- checkpoints -------------------------------------------------------------


def _tensor_digest(state: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Immutable named parameters plus architecture and lineage."""

    state: Mapping[str, torch.Tensor]
    model_spec: ModelSpec
    lineage: str
    train_config: Optional[dict] = None
    parent: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lineage not in LINEAGES:
            raise BackendError(f"unknown lineage {self.lineage!r}")
        if self.lineage == "unlearned" and self.parent is None:
            raise BackendError("an unlearned checkpoint needs its original model as parent")

    @cached_property
    def blob_digest(self) -> str:
        return _tensor_digest(self.state)

    def manifest(self) -> dict:
        return {
            "blob": self.blob_digest,
            "model_spec": self.model_spec.to_dict(),
            "lineage": self.lineage,
            "train_config": self.train_config,
            "parent": self.parent,
            "meta": self.meta,
        }

    @cached_property
    def ckpt_id(self) -> str:
        text = json.dumps(self.manifest(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:20]

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.state.values()])

    def to(self, dtype) -> "Checkpoint":
        state = {k: v.to(dtype) if v.is_floating_point() else v for k, v in self.state.items()}
        return replace(self, state=state)


def checkpoint_from_module(module, spec, lineage, train_config=None, parent=None, meta=None) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return Checkpoint(state, spec, lineage, train_config, parent, dict(meta or {}))


def module_from(ckpt: Checkpoint) -> nn.Module:
    module = build_model(ckpt.model_spec)
    dtype = next(iter(ckpt.state.values())).dtype
    module.to(dtype)
    try:
        module.load_state_dict(ckpt.state)
    except RuntimeError as exc:
        raise BackendError(f"checkpoint does not fit its model spec: {exc}") from None
    return module


def initial_checkpoint(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    return checkpoint_from_module(build_model(spec, seed), spec, "init", meta={"seed": seed})


# -- training ----------------------------------------------------------------


@dataclass
class TrajectorySnapshots:
    """Per-epoch predicted probabilities for a fixed list of ids (E x n x K)."""

    ids: tuple[int, ...]
    epochs: list[int] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def stacked(self) -> np.ndarray:
        return np.stack(self.probs)


def make_optimizer(module: nn.Module, name: str, lr: float, weight_decay: float, momentum=None):
    if name == "adamw":
        return torch.optim.AdamW(module.parameters(), lr=lr, weight_decay=weight_decay)
    return torch.optim.SGD(module.parameters(), lr=lr, weight_decay=weight_decay, momentum=momentum or 0.0)


def make_scheduler(optimizer, schedule: str, epochs: int):
    if schedule == "cosine-anneal":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1))
    if schedule == "step-decay":
        return torch.optim.lr_scheduler.StepLR(optimizer, step_size=max(epochs // 3, 1), gamma=0.1)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda _: 1.0)


def augment(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop after zero padding, then random horizontal flip."""
    b, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dx = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    dy = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    flip = torch.rand(b, generator=gen) < 0.5
    out = torch.empty_like(x)
    for k in range(b):
        crop = padded[k, :, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
        out[k] = crop.flip(-1) if flip[k] else crop
    return out


def batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def _train_knn(spec, data, ids, cfg, snapshot_ids):
    x, y = data.subset(sorted(ids))
    state = {"x": x.flatten(1).to(torch.float64), "y": y.clone()}
    ckpt = Checkpoint(state, spec, "original", cfg.to_dict())
    traj = TrajectorySnapshots(tuple(snapshot_ids))
    if cfg.snapshot_every and snapshot_ids:
        traj.epochs.append(0)
        traj.probs.append(probs_matrix(ckpt, data, snapshot_ids))
    return ckpt, traj


def train(
    spec: ModelSpec,
    data: DatasetHandle,
    ids: Sequence[int],
    cfg: TrainConfig,
    init: Optional[Checkpoint] = None,
    lineage: str = "original",
    snapshot_ids: Optional[Sequence[int]] = None,
) -> tuple[Checkpoint, TrajectorySnapshots]:
    """Cross-entropy training on ``ids``.

    Starts from ``init`` when given, else from a ``cfg.seed`` initialisation.
    Every ``cfg.snapshot_every`` epochs the softmax outputs on ``snapshot_ids``
    (default: the training ids) are recorded. ``epochs == 0`` returns the
    starting parameters unchanged.
    """
    ids = sorted(int(i) for i in ids)
    if not ids:
        raise BackendError("cannot train on an empty set")
    if spec.num_classes != data.num_classes:
        raise BackendError(f"spec has {spec.num_classes} classes, data has {data.num_classes}")
    snapshot_ids = ids if snapshot_ids is None else sorted(int(i) for i in snapshot_ids)
    if not spec.differentiable:
        ckpt, traj = _train_knn(spec, data, ids, cfg, snapshot_ids)
        return replace(ckpt, lineage=lineage), traj

    module = module_from(init) if init is not None else build_model(spec, cfg.seed)
    parent = init.ckpt_id if init is not None else None
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all, y_all = data.subset(ids)
    opt = make_optimizer(module, cfg.optimizer, cfg.base_lr, cfg.weight_decay, cfg.momentum)
    sched = make_scheduler(opt, cfg.lr_schedule, cfg.epochs)
    traj = TrajectorySnapshots(tuple(snapshot_ids))

    for epoch in range(1, cfg.epochs + 1):
        module.train()
        for idx in batches(len(ids), cfg.batch_size, gen):
            x = x_all[idx]
            if cfg.augment:
                x = augment(x, gen)
            loss = F.cross_entropy(module(x), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence("epoch", epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        if cfg.snapshot_every and epoch % cfg.snapshot_every == 0:
            traj.epochs.append(epoch)
            traj.probs.append(_module_probs(module, data, snapshot_ids))

    ckpt = checkpoint_from_module(module, spec, lineage, cfg.to_dict(), parent)
    return ckpt, traj


# -- inference ---------------------------------------------------------------


@torch.no_grad()
def _module_probs(module: nn.Module, data: DatasetHandle, ids, batch_size: int = 512) -> np.ndarray:
    module.eval()
    x_all, _ = data.subset(ids)
    dtype = next(module.parameters()).dtype
    out = [module(x_all[s : s + batch_size].to(dtype)).double().softmax(-1) for s in range(0, len(ids), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros((0, data.num_classes))


def _knn_predict(state, x: torch.Tensor) -> torch.Tensor:
    d = torch.cdist(x.flatten(1).to(torch.float64), state["x"])
    return state["y"][torch.argmin(d, dim=1)]


def probs_matrix(ckpt: Checkpoint, data: DatasetHandle, ids: Sequence[int]) -> np.ndarray:
    """Softmax outputs as an ``len(ids) x K`` array in the order of ``ids``."""
    ids = list(ids)
    if not ckpt.model_spec.differentiable:
        x, _ = data.subset(ids)
        pred = _knn_predict(ckpt.state, x).numpy()
        out = np.zeros((len(ids), ckpt.model_spec.num_classes))
        out[np.arange(len(ids)), pred] = 1.0
        return out
    return _module_probs(module_from(ckpt), data, ids)


def predict_probs(ckpt: Checkpoint, data: DatasetHandle, ids: Iterable[int]) -> dict[int, np.ndarray]:
    ids = list(ids)
    return dict(zip(ids, probs_matrix(ckpt, data, ids)))


def predictions(ckpt, data, ids) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs_matrix(ckpt, data, ids), axis=1)


def evaluate_accuracy(ckpt: Checkpoint, data: DatasetHandle, ids: Iterable[int]) -> float:
    ids = list(ids)
    if not ids:
        raise BackendError("accuracy of an empty set is undefined")
    return float(np.mean(predictions(ckpt, data, ids) == data.label_of(ids)))


def losses_from_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, EPS))


def loss_vector(ckpt, data, ids) -> np.ndarray:
    ids = list(ids)
    if not ids:
        raise BackendError("empty data set")
    return losses_from_probs(probs_matrix(ckpt, data, ids), data.label_of(ids))


def per_example_losses(ckpt: Checkpoint, data: DatasetHandle, ids: Iterable[int]) -> dict[int, float]:
    ids = list(ids)
    return dict(zip(ids, loss_vector(ckpt, data, ids).tolist()))


def mean_ce(module: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(module(x.to(next(module.parameters()).dtype)), y)


def loss_gradient(
    ckpt: Checkpoint,
    data: DatasetHandle,
    ids: Sequence[int],
    labels_override: Optional[Mapping[int, int]] = None,
) -> torch.Tensor:
    """Gradient of the mean cross-entropy over ``ids`` as one flat vector.

    The vector is ordered like ``ckpt.flat()``. ``labels_override`` replaces
    the stored label of any id it contains.
    """
    if not ckpt.model_spec.differentiable:
        raise NotDifferentiable("knn-deterministic has no gradient")
    ids = list(ids)
    module = module_from(ckpt)
    x, y = data.subset(ids)
    if labels_override:
        y = torch.tensor([labels_override.get(i, int(t)) for i, t in zip(ids, y)], dtype=torch.long)
    module.zero_grad()
    mean_ce(module, x, y).backward()
    return flat_grad(module)


def flat_grad(module: nn.Module) -> torch.Tensor:
    grads = []
    for name, t in module.state_dict(keep_vars=True).items():
        g = t.grad if isinstance(t, nn.Parameter) and t.grad is not None else torch.zeros_like(t)
        grads.append(g.detach().reshape(-1))
    return torch.cat(grads)


def state_names_and_sizes(ckpt: Checkpoint) -> list[tuple[str, int]]:
    return [(k, v.numel()) for k, v in ckpt.state.items()]


def check_finite(value: float, where: str, index: int):
    if not math.isfinite(value):
        raise TrainingDivergence(where, index, value)
