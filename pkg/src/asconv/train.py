"""Training loop: Nesterov SGD with linear warmup and step decay, per-epoch
CSV metrics, best/final checkpoints, deterministic under a fixed seed.

All run randomness (train/val split, epoch shuffles, augmentation draws)
comes from one stream seeded by ``TrainConfig.seed``, consumed in a fixed
order; model initialization uses ``ModelConfig.seed``.  Two runs with the
same seeds produce bit-identical checkpoints on one platform.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Dataset, augment, load_cifar
from .errors import EmptyDataset, InvalidConfig, NonFinite
from .models import ModelConfig, ResNet, build_model
from .nn import Ctx
from .tensor import Tensor, clear_graph, cross_entropy, no_grad, seeded_rng

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc",
                  "wall_seconds"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.1
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (50, 75)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    val_split: int = 5000
    seed: int = 0
    subset: int | None = None       # cap on training images (smoke runs)
    val_subset: int | None = None   # cap on validation images

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise InvalidConfig(f"milestones must be strictly increasing: {ms}")
        if ms and self.epochs and ms[-1] >= self.epochs:
            raise InvalidConfig(f"milestones {ms} must lie below epochs={self.epochs}")
        self.milestones = ms


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear per-epoch warmup to base_lr, then /10 at each milestone."""
    if not 0 <= epoch < max(cfg.epochs, 1):
        raise InvalidConfig(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    lr = cfg.base_lr
    for m in cfg.milestones:
        if epoch >= m:
            lr /= 10.0
    return lr


class SgdNesterov:
    """Nesterov momentum with weight decay folded into the gradient.

    v <- mu v + (g + wd * theta);  theta <- theta - lr * ((g + wd * theta) + mu v)
    """

    def __init__(self, params: dict[str, Tensor], momentum: float,
                 weight_decay: float, decay_exempt: set[str] = frozenset()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_exempt = set(decay_exempt)
        self.velocity = {name: np.zeros(p.shape, np.float32) for name, p in params.items()}

    def step(self, lr: float) -> None:
        mu = self.momentum
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not (np.isfinite(g.min()) and np.isfinite(g.max())):
                raise NonFinite(f"gradient of {name!r} is not finite")
            wd = 0.0 if name in self.decay_exempt else self.weight_decay
            gt = g + np.float32(wd) * p.data if wd else g
            v = self.velocity[name]
            v *= mu
            v += gt
            p.data -= np.float32(lr) * (gt + mu * v)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def evaluate(model: ResNet, ds: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode (running BN stats)."""
    if len(ds) == 0:
        raise EmptyDataset("evaluate on empty dataset")
    correct = 0
    loss_sum = 0.0
    ctx = Ctx(train=False)
    with no_grad():
        for i in range(0, len(ds), batch_size):
            xb = Tensor(ds.images[i:i + batch_size])
            yb = ds.labels[i:i + batch_size]
            logits = model(xb, ctx)
            loss_sum += cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            clear_graph()
    n = len(ds)
    return correct / n, loss_sum / n


def _subset(ds: Dataset, cap: int | None) -> Dataset:
    if cap is None or cap >= len(ds):
        return ds
    return Dataset(ds.images[:cap], ds.labels[:cap])


def train(model_cfg: ModelConfig, cfg: TrainConfig, data_dir, out_dir,
          datasets: tuple[Dataset, Dataset] | None = None) -> list[dict]:
    """Train a model; write metrics.csv plus final.ckpt / best.ckpt.

    ``datasets`` may supply preloaded (train, val) splits; otherwise CIFAR
    binaries are read from ``data_dir``.  Returns the metric rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        train_ds = load_cifar(data_dir, "train", model_cfg.num_classes, cfg.seed,
                              cfg.val_split)
        val_ds = load_cifar(data_dir, "val", model_cfg.num_classes, cfg.seed,
                            cfg.val_split)
    else:
        train_ds, val_ds = datasets
    train_ds = _subset(train_ds, cfg.subset)
    val_ds = _subset(val_ds, cfg.val_subset)

    model = build_model(model_cfg)
    params = dict(model.named_parameters())
    opt = SgdNesterov(params, cfg.momentum, cfg.weight_decay, model.decay_exempt())
    rng = seeded_rng(cfg.seed)
    rows: list[dict] = []
    best_acc = -1.0
    ctx = Ctx(train=True)

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch in range(cfg.epochs):
            t0 = time.time()
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(train_ds))
            loss_sum = 0.0
            correct = 0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                xb = np.stack([augment(train_ds.images[j], rng) for j in idx])
                yb = train_ds.labels[idx]
                logits = model(Tensor(xb), ctx)
                loss = cross_entropy(logits, yb)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
                clear_graph()
            train_loss = loss_sum / len(order)
            train_acc = correct / len(order)
            if len(val_ds):
                val_acc, val_loss = evaluate(model, val_ds, cfg.batch_size)
            else:
                val_acc, val_loss = float("nan"), float("nan")
            row = dict(zip(METRICS_HEADER,
                           [epoch, lr, train_loss, train_acc, val_loss, val_acc,
                            time.time() - t0]))
            rows.append(row)
            writer.writerow([row[k] for k in METRICS_HEADER])
            fh.flush()
            if len(val_ds) and val_acc > best_acc:
                best_acc = val_acc
                save_checkpoint(out / "best.ckpt", model.state_arrays())
    save_checkpoint(out / "final.ckpt", model.state_arrays())
    return rows
