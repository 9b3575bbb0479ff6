"""Supervised training, accuracy evaluation, and per-sample loss gradients.

Training is plain SGD with momentum and an optional cosine learning-rate
decay, cross-entropy loss, and seeded crop/flip augmentation. On a CPU with
a fixed seed the whole run is bit-reproducible; that determinism is what the
downstream ownership experiments rely on.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, LabeledImage, concat_datasets
from .models import ModelHandle, build_module


class StepCounter:
    """Counts optimizer steps so cache tests can prove nothing retrained."""

    def __init__(self):
        self.count = 0

    def bump(self):
        self.count += 1


STEP_COUNTER = StepCounter()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    schedule: str = "cosine"  # "cosine" (no restart) or "constant"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    random_crop: bool = True
    horizontal_flip: bool = True
    crop_padding: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def _augment_batch(xb, cfg: TrainConfig, gen):
    if cfg.random_crop:
        p = cfg.crop_padding
        h, w = xb.shape[2], xb.shape[3]
        padded = F.pad(xb, (p, p, p, p))
        dy = torch.randint(0, 2 * p + 1, (xb.shape[0],), generator=gen)
        dx = torch.randint(0, 2 * p + 1, (xb.shape[0],), generator=gen)
        xb = torch.stack(
            [padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(xb.shape[0])]
        )
    if cfg.horizontal_flip:
        flip = torch.rand(xb.shape[0], generator=gen) < 0.5
        if flip.any():
            xb = xb.clone()
            xb[flip] = torch.flip(xb[flip], dims=[3])
    return xb


def train_model(dataset, arch_id, config: TrainConfig, log_fn=None) -> ModelHandle:
    """Train a fresh model of `arch_id` on the dataset (or a pair to merge).

    Loss is cross-entropy over all provided samples. Returns a frozen handle
    whose manifest records the dataset, config, and final training stats.
    """
    if isinstance(dataset, (tuple, list)):
        merged = dataset[0]
        for extra in dataset[1:]:
            merged = concat_datasets(merged, extra)
        dataset = merged
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")

    px, labels = dataset.as_arrays()
    x_all = torch.from_numpy(px)
    y_all = torch.from_numpy(labels)

    module = build_module(arch_id, dataset.class_count, seed=config.seed)
    module.train()
    opt = torch.optim.SGD(
        module.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)

    n = len(dataset)
    final_loss = float("nan")
    for epoch in range(config.epochs):
        if config.schedule == "cosine":
            lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        else:
            lr = config.learning_rate
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = _augment_batch(x_all[idx], config, gen)
            yb = y_all[idx]
            opt.zero_grad()
            loss = F.cross_entropy(module(xb), yb)
            loss.backward()
            opt.step()
            STEP_COUNTER.bump()
            epoch_loss += loss.item() * len(idx)
        final_loss = epoch_loss / n
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}/{config.epochs} lr={lr:.4f} loss={final_loss:.4f}")

    module.eval()
    handle = ModelHandle(
        arch_id,
        module,
        dataset.class_count,
        train_manifest={
            "dataset": dataset.name,
            "dataset_size": n,
            "dataset_hash": dataset.content_hash(),
            "config": asdict(config),
            "final_train_loss": final_loss,
        },
    )
    return handle


def evaluate_accuracy(model: ModelHandle, dataset: ImageDataset) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if model.class_count != dataset.class_count:
        raise ValueError(
            f"class_count mismatch: model {model.class_count}, dataset {dataset.class_count}"
        )
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    px, labels = dataset.as_arrays()
    preds = model.predict_labels(px)
    return float((preds == labels).sum()) / len(dataset)


def loss_gradient(model: ModelHandle, sample: LabeledImage, loss_scale: float = 1.0) -> np.ndarray:
    """Gradient of the cross-entropy at one sample w.r.t. all parameters.

    Flattened in the handle's layout order; dtype follows the model's
    parameters. Evaluated with the model in eval mode (no stochastic layers,
    frozen normalization statistics).
    """
    module = model.module
    module.eval()
    params = [p for p in module.parameters()]
    dtype = params[0].dtype
    x = torch.as_tensor(np.asarray(sample.pixels), dtype=dtype).unsqueeze(0)
    y = torch.tensor([sample.label])
    logits = module(x)
    loss = F.cross_entropy(logits, y) * loss_scale
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1))
    model.grad_count += 1
    return torch.cat(flat).detach().cpu().numpy()
