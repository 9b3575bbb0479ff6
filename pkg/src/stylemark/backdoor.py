"""Trigger-patch backdoor watermarking baseline and trigger recovery.

The classic patch watermark blends a fixed trigger into selected training
images and flips their labels to a target class. For comparison against the
label-preserving style watermark, the same blend is also available with
labels kept (the patch-based transform variant). Trigger recovery searches
for a universal targeted perturbation with sign-gradient ascent projected to
an L-infinity ball.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ImageDataset, LabeledImage, ShapeError
from .models import ModelHandle


@dataclass(frozen=True)
class BackdoorSpec:
    trigger: np.ndarray  # (C, H, W) in [0, 1]
    mask: np.ndarray  # binary, same shape
    target_label: int

    def __post_init__(self):
        trig = np.asarray(self.trigger, dtype=np.float64)
        msk = np.asarray(self.mask, dtype=np.float64)
        if trig.shape != msk.shape:
            raise ShapeError(f"trigger {trig.shape} and mask {msk.shape} differ")
        if trig.size and (trig.min() < 0 or trig.max() > 1):
            raise ValueError("trigger values must lie in [0, 1]")
        if not np.isin(msk, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "trigger", trig)
        object.__setattr__(self, "mask", msk)


def white_square_spec(image_shape, size=3, target_label=2) -> BackdoorSpec:
    """White square in the lower-right corner, the usual patch watermark."""
    c, h, w = image_shape
    trigger = np.zeros(image_shape)
    mask = np.zeros(image_shape)
    trigger[:, h - size :, w - size :] = 1.0
    mask[:, h - size :, w - size :] = 1.0
    return BackdoorSpec(trigger=trigger, mask=mask, target_label=target_label)


def apply_trigger(pixels, spec: BackdoorSpec) -> np.ndarray:
    """(1 - mask) * x + mask * trigger, elementwise."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.shape != spec.trigger.shape:
        raise ShapeError(f"image {px.shape} does not match trigger {spec.trigger.shape}")
    return (1.0 - spec.mask) * px + spec.mask * spec.trigger


def badnets_poison(dataset: ImageDataset, spec: BackdoorSpec, gamma_percent, seed) -> ImageDataset:
    """Blend the trigger into gamma% of samples and set their labels to the target.

    Unselected samples are passed through bit-identical; order is preserved.
    """
    if spec.target_label >= dataset.class_count:
        raise ValueError("target_label must be a valid class")
    if not 0.0 <= gamma_percent <= 100.0:
        raise ValueError(f"gamma_percent must be in [0, 100], got {gamma_percent}")
    n = len(dataset)
    count = int(round(gamma_percent / 100.0 * n))
    rng = np.random.default_rng(seed)
    chosen = set(
        int(i) for i in (rng.choice(n, size=count, replace=False) if count else [])
    )
    items = []
    for i, item in enumerate(dataset):
        if i in chosen:
            px = apply_trigger(item.pixels, spec).astype(item.pixels.dtype)
            items.append(LabeledImage(pixels=px, label=spec.target_label))
        else:
            items.append(item)
    return ImageDataset(
        items,
        class_count=dataset.class_count,
        split_tag=dataset.split_tag,
        name=f"{dataset.name}/badnets-y{spec.target_label}-g{gamma_percent}",
    )


def patch_transform(x: LabeledImage, spec: BackdoorSpec) -> LabeledImage:
    """Trigger blend with the original label kept (the label-preserving variant)."""
    px = apply_trigger(x.pixels, spec).astype(x.pixels.dtype)
    return LabeledImage(pixels=px, label=x.label)


def attack_success_rate(model: ModelHandle, spec: BackdoorSpec, clean_testset) -> float:
    """Fraction of non-target test images pushed to the target class by the trigger."""
    px, labels = clean_testset.as_arrays()
    if px.shape[0] and px.shape[1:] != spec.trigger.shape:
        raise ShapeError(
            f"test images {px.shape[1:]} do not match trigger {spec.trigger.shape}"
        )
    keep = labels != spec.target_label
    if not keep.any():
        raise ValueError("test set has no non-target samples")
    triggered = np.stack([apply_trigger(p, spec) for p in px[keep]]).astype(np.float32)
    preds = model.predict_labels(triggered)
    return float((preds == spec.target_label).sum()) / int(keep.sum())


@dataclass(frozen=True)
class TriggerRecoveryConfig:
    epsilon: float = 32.0  # L-infinity bound on the 0-255 scale
    iterations: int = 40
    step_size: float = 2.0 / 255.0
    init: str = "zeros"  # "zeros" | "pattern"
    probe_size: int = 256
    probe_seed: int = 99

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init not in ("zeros", "pattern"):
            raise ValueError(f"init must be 'zeros' or 'pattern', got {self.init!r}")


def recover_trigger(
    model: ModelHandle,
    target_label,
    cfg: TriggerRecoveryConfig,
    probe_dataset: ImageDataset,
    init_pattern=None,
    objective_trace=None,
):
    """Universal targeted perturbation maximizing the target-class posterior.

    Sign-gradient ascent on the mean target log-posterior over a fixed probe
    batch, projected to the epsilon ball (epsilon read on the 0-255 scale)
    after every step. Steps that would lower the objective are backtracked,
    so the objective is non-decreasing across iterations.
    """
    eps = cfg.epsilon / 255.0
    px, _ = probe_dataset.as_arrays()
    rng = np.random.default_rng(cfg.probe_seed)
    take = min(cfg.probe_size, px.shape[0])
    sel = np.sort(rng.choice(px.shape[0], size=take, replace=False))
    probe = torch.from_numpy(px[sel])

    if cfg.init == "pattern":
        if init_pattern is None:
            raise ValueError("init='pattern' requires init_pattern")
        delta = torch.as_tensor(np.asarray(init_pattern, dtype=np.float32))
        delta = delta.clamp(-eps, eps)
    else:
        delta = torch.zeros(probe.shape[1:], dtype=torch.float32)

    y = torch.full((probe.shape[0],), int(target_label), dtype=torch.long)
    module = model.module
    module.eval()

    def objective(d):
        with torch.no_grad():
            logits = module((probe + d).clamp(0.0, 1.0))
            return float(F.softmax(logits, dim=1)[:, int(target_label)].mean().item())

    current = objective(delta)
    if objective_trace is not None:
        objective_trace.append(current)
    step = cfg.step_size
    for _ in range(cfg.iterations):
        d = delta.clone().requires_grad_(True)
        logits = module((probe + d).clamp(0.0, 1.0))
        loss = F.cross_entropy(logits, y)
        (grad,) = torch.autograd.grad(loss, d)
        trial_step = step
        accepted = False
        for _ in range(8):
            candidate = (delta - trial_step * grad.sign()).clamp(-eps, eps)
            value = objective(candidate)
            if value >= current - 1e-6:
                delta = candidate
                current = value
                accepted = True
                break
            trial_step *= 0.5
        if objective_trace is not None:
            objective_trace.append(current)
        if not accepted:
            break
    return delta.detach().numpy()


def save_pattern_png(pattern, path, target_label=None, epsilon=None, iterations=None):
    """Write a pattern as PNG (rescaled to 8-bit) plus a JSON sidecar."""
    arr = np.asarray(pattern, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = (hi - lo) if hi > lo else 1.0
    scaled = ((arr - lo) / span * 255.0).round().astype(np.uint8)
    img = scaled.transpose(1, 2, 0) if scaled.ndim == 3 else scaled
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img).save(path)
    sidecar = {
        "value_min": lo,
        "value_max": hi,
        "target_label": target_label,
        "epsilon": epsilon,
        "iterations": iterations,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)
