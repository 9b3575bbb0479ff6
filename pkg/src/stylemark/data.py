"""Datasets, style transforms, and watermarked training-set construction.

Images are float arrays shaped (channels, height, width) with values in
[0, 1]. A watermark is embedded by re-rendering a randomly chosen fraction
of the training images with a defender-chosen style while keeping their
labels, then training on the transformed subset plus the untouched rest.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


class ShapeError(ValueError):
    """Image/style/trigger shapes are incompatible."""


class ConfigurationError(ValueError):
    """Unknown identifier or invalid configuration value."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (C, H, W), values in [0, 1]
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise ShapeError(f"pixels must be (C, H, W), got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("label must be non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


class ImageDataset:
    """Ordered, immutable collection of labeled images.

    Index i always resolves to the same sample; helpers hand out stacked
    arrays for batch compute.
    """

    def __init__(self, items, class_count, split_tag="train", name="dataset"):
        if split_tag not in ("train", "test"):
            raise ConfigurationError(f"split_tag must be 'train' or 'test', got {split_tag!r}")
        items = tuple(items)
        for i, it in enumerate(items):
            if it.label >= class_count:
                raise ValueError(f"item {i} has label {it.label} >= class_count {class_count}")
        self.items = items
        self.class_count = int(class_count)
        self.split_tag = split_tag
        self.name = name
        self._stacked = None

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    def as_arrays(self):
        """Return (pixels (N, C, H, W) float32, labels (N,) int64)."""
        if self._stacked is None:
            if len(self.items) == 0:
                self._stacked = (np.zeros((0, 0, 0, 0), np.float32), np.zeros((0,), np.int64))
            else:
                px = np.stack([it.pixels for it in self.items]).astype(np.float32)
                labels = np.array([it.label for it in self.items], dtype=np.int64)
                self._stacked = (px, labels)
        return self._stacked

    def subset(self, indices, name=None):
        return ImageDataset(
            [self.items[i] for i in indices],
            class_count=self.class_count,
            split_tag=self.split_tag,
            name=name or f"{self.name}/subset",
        )

    def content_hash(self):
        h = hashlib.sha256()
        px, labels = self.as_arrays()
        h.update(np.ascontiguousarray(px).tobytes())
        h.update(np.ascontiguousarray(labels).tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Style transforms


def _resize_bilinear(image, height, width):
    """Bilinear resize of a (C, H, W) float array via PIL."""
    if image.shape[1] == height and image.shape[2] == width:
        return image.astype(np.float64)
    c = image.shape[0]
    chans = []
    for ci in range(c):
        im = Image.fromarray((image[ci] * 255.0).astype(np.float32), mode="F")
        im = im.resize((width, height), Image.BILINEAR)
        chans.append(np.asarray(im, dtype=np.float64) / 255.0)
    return np.stack(chans)


def _moment_match(x, style_image, blend):
    """Per-channel affine map sending x's mean/std to the style's mean/std."""
    c, h, w = x.shape
    style = _resize_bilinear(style_image, h, w)
    out = np.empty_like(x, dtype=np.float64)
    xs = x.astype(np.float64)
    for ci in range(c):
        mu_x = xs[ci].mean()
        sd_x = xs[ci].std()
        mu_s = style[ci].mean()
        sd_s = style[ci].std()
        if sd_x < 1e-12:
            matched = np.full_like(xs[ci], mu_s)
        else:
            matched = (xs[ci] - mu_x) / sd_x * sd_s + mu_s
        out[ci] = (1.0 - blend) * xs[ci] + blend * matched
    return out


TRANSFORMERS = {"moment-match": _moment_match}


@dataclass(frozen=True)
class StyleSpec:
    style_image: np.ndarray  # (C, H', W') in [0, 1]
    transformer_id: str = "moment-match"
    blend: float = 1.0

    def __post_init__(self):
        img = np.asarray(self.style_image, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeError(f"style_image must be (C, H, W), got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("style_image values must lie in [0, 1]")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")
        object.__setattr__(self, "style_image", img)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.style_image).tobytes())
        h.update(self.transformer_id.encode())
        h.update(repr(float(self.blend)).encode())
        return h.hexdigest()


def style_transform(x: LabeledImage, style: StyleSpec) -> LabeledImage:
    """Re-render x with the style image's statistics; label is kept.

    blend = 0 is the exact identity regardless of transformer. Output is
    clipped to [0, 1] and has the same shape as x.
    """
    if style.style_image.shape[0] != x.pixels.shape[0]:
        raise ShapeError(
            f"channel mismatch: image has {x.pixels.shape[0]}, "
            f"style has {style.style_image.shape[0]}"
        )
    if style.transformer_id not in TRANSFORMERS:
        raise ConfigurationError(f"unregistered transformer_id {style.transformer_id!r}")
    if style.blend == 0.0:
        return x
    fn = TRANSFORMERS[style.transformer_id]
    out = fn(x.pixels, style.style_image, style.blend)
    out = np.clip(out, 0.0, 1.0).astype(x.pixels.dtype)
    return LabeledImage(pixels=out, label=x.label)


# ---------------------------------------------------------------------------
# Poison planning


@dataclass(frozen=True)
class PoisonPlan:
    indices: tuple  # sorted, unique, within [0, N)
    gamma_percent: float
    seed: int

    def to_json(self):
        return json.dumps(
            {
                "gamma_percent": self.gamma_percent,
                "seed": self.seed,
                "indices": list(self.indices),
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            indices=tuple(d["indices"]),
            gamma_percent=float(d["gamma_percent"]),
            seed=int(d["seed"]),
        )


def select_poison_indices(dataset: ImageDataset, gamma_percent: float, seed: int) -> PoisonPlan:
    """Uniformly sample gamma_percent of the dataset's indices, without replacement.

    Sampling is dataset-global, not per-class. Same (dataset size, gamma,
    seed) always regenerates the identical plan.
    """
    if not 0.0 <= gamma_percent <= 100.0:
        raise ValueError(f"gamma_percent must be in [0, 100], got {gamma_percent}")
    n = len(dataset)
    count = int(round(gamma_percent / 100.0 * n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False) if count else np.array([], dtype=np.int64)
    return PoisonPlan(
        indices=tuple(int(i) for i in np.sort(chosen)),
        gamma_percent=float(gamma_percent),
        seed=int(seed),
    )


def build_watermarked_dataset(dataset: ImageDataset, plan: PoisonPlan, style: StyleSpec):
    """Split the dataset into (styled copies of the planned samples, untouched rest).

    Labels of transformed samples are never changed. The two parts partition
    the index set exactly.
    """
    n = len(dataset)
    for i in plan.indices:
        if not 0 <= i < n:
            raise IndexError(f"plan index {i} out of range for dataset of size {n}")
    selected = set(plan.indices)
    transformed = ImageDataset(
        [style_transform(dataset[i], style) for i in plan.indices],
        class_count=dataset.class_count,
        split_tag=dataset.split_tag,
        name=f"{dataset.name}/transformed",
    )
    benign_rest = ImageDataset(
        [dataset[i] for i in range(n) if i not in selected],
        class_count=dataset.class_count,
        split_tag=dataset.split_tag,
        name=f"{dataset.name}/benign-rest",
    )
    return transformed, benign_rest


def build_watermarked_training_set(dataset: ImageDataset, plan: PoisonPlan,
                                   style: StyleSpec) -> ImageDataset:
    """The training union of transformed and untouched samples, in original order.

    Keeping every sample at its original index aligns the victim's batch
    stream with a clean model trained from the same seed, so the two differ
    only by the styled pixels.
    """
    n = len(dataset)
    for i in plan.indices:
        if not 0 <= i < n:
            raise IndexError(f"plan index {i} out of range for dataset of size {n}")
    selected = set(plan.indices)
    items = [
        style_transform(item, style) if i in selected else item
        for i, item in enumerate(dataset)
    ]
    return ImageDataset(
        items,
        class_count=dataset.class_count,
        split_tag=dataset.split_tag,
        name=f"{dataset.name}/watermarked",
    )


def concat_datasets(a: ImageDataset, b: ImageDataset, name=None) -> ImageDataset:
    if a.class_count != b.class_count:
        raise ValueError("class_count mismatch")
    return ImageDataset(
        list(a.items) + list(b.items),
        class_count=a.class_count,
        split_tag=a.split_tag,
        name=name or f"{a.name}+{b.name}",
    )


# ---------------------------------------------------------------------------
# Loaders


def load_style_image(path) -> np.ndarray:
    """Read a PNG/JPEG file into a (C, H, W) float array in [0, 1]."""
    im = Image.open(path).convert("RGB")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_png_tree(root, split, name=None) -> ImageDataset:
    """Load a `<root>/<split>/<class>/<id>.png` directory layout.

    Class directories are sorted by name to assign label ids; files within a
    class are sorted so the item order is stable.
    """
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"no split directory {split_dir}")
    class_dirs = sorted(
        d for d in os.listdir(split_dir) if os.path.isdir(os.path.join(split_dir, d))
    )
    if not class_dirs:
        raise FileNotFoundError(f"no class directories under {split_dir}")
    items = []
    for label, cls in enumerate(class_dirs):
        cdir = os.path.join(split_dir, cls)
        for fname in sorted(os.listdir(cdir)):
            if not fname.lower().endswith((".png", ".jpg", ".jpeg")):
                continue
            im = Image.open(os.path.join(cdir, fname)).convert("RGB")
            px = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
            items.append(LabeledImage(pixels=px, label=label))
    return ImageDataset(
        items, class_count=len(class_dirs), split_tag=split, name=name or os.path.basename(root)
    )


_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILES = ["test_batch.bin"]
_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(root, split, name="cifar10", max_items=None) -> ImageDataset:
    """Load the standard CIFAR-10 binary archive (data_batch_*.bin / test_batch.bin).

    Each record is one label byte followed by 3072 channel-major pixel bytes.
    """
    files = _CIFAR_TRAIN_FILES if split == "train" else _CIFAR_TEST_FILES
    items = []
    for fname in files:
        path = os.path.join(root, fname)
        if not os.path.exists(path):
            # archives sometimes unpack into a cifar-10-batches-bin subdir
            alt = os.path.join(root, "cifar-10-batches-bin", fname)
            if os.path.exists(alt):
                path = alt
            else:
                raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % _CIFAR_RECORD != 0:
            raise ValueError(f"{path} is not a whole number of CIFAR-10 records")
        recs = raw.reshape(-1, _CIFAR_RECORD)
        for rec in recs:
            label = int(rec[0])
            px = rec[1:].reshape(3, 32, 32).astype(np.float32) / 255.0
            items.append(LabeledImage(pixels=px, label=label))
            if max_items is not None and len(items) >= max_items:
                break
        if max_items is not None and len(items) >= max_items:
            break
    return ImageDataset(items, class_count=10, split_tag=split, name=name)


def save_dataset_npz(dataset: ImageDataset, path):
    px, labels = dataset.as_arrays()
    np.savez_compressed(
        path,
        pixels=px,
        labels=labels,
        class_count=dataset.class_count,
        split_tag=dataset.split_tag,
        name=dataset.name,
    )


def load_dataset_npz(path) -> ImageDataset:
    d = np.load(path, allow_pickle=False)
    px = d["pixels"]
    labels = d["labels"]
    items = [LabeledImage(pixels=px[i], label=int(labels[i])) for i in range(px.shape[0])]
    return ImageDataset(
        items,
        class_count=int(d["class_count"]),
        split_tag=str(d["split_tag"]),
        name=str(d["name"]),
    )


# ---------------------------------------------------------------------------
# Procedural data (demo / pilot scale)

_PALETTE = np.array(
    [
        [0.85, 0.25, 0.25],
        [0.25, 0.80, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.75, 0.25],
        [0.75, 0.30, 0.80],
        [0.30, 0.80, 0.80],
        [0.90, 0.55, 0.25],
        [0.55, 0.45, 0.30],
        [0.45, 0.85, 0.55],
        [0.60, 0.60, 0.90],
    ]
)


def make_synthetic_dataset(
    n, class_count=10, image_hw=(32, 32), seed=0, split_tag="train", name="synthetic", noise=0.12
) -> ImageDataset:
    """Generate a balanced grating-plus-tint classification problem.

    Each class pairs a grating orientation/frequency with a color tint, with
    random phase, offset, and pixel noise per sample. Small convnets learn it
    quickly, which keeps end-to-end pipelines runnable on one CPU.
    """
    if class_count > len(_PALETTE):
        raise ConfigurationError(f"at most {len(_PALETTE)} synthetic classes supported")
    rng = np.random.default_rng(seed)
    h, w = image_hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    items = []
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    for i in range(n):
        k = int(labels[i])
        theta = np.pi * (k % 5) / 5.0
        freq = 3.0 + 3.0 * (k // 5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        grating = 0.5 + 0.35 * np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
        )
        tint = _PALETTE[k]
        px = tint[:, None, None] * grating[None, :, :]
        px = px + rng.normal(0.0, noise, size=px.shape)
        items.append(LabeledImage(pixels=np.clip(px, 0.0, 1.0).astype(np.float32), label=k))
    return ImageDataset(items, class_count=class_count, split_tag=split_tag, name=name)


def make_color_jittered(dataset: ImageDataset, seed=0, prob=0.5, max_strength=0.8,
                        std_range=(0.02, 0.30), name=None) -> ImageDataset:
    """Broaden a dataset with random per-image global color casts.

    Stands in for the broad web-scraped corpora adversaries use as surrogate
    data: some images carry a random channel-statistics shift of random
    strength (including low-contrast casts), the rest pass through untouched.
    Labels are kept.
    """
    rng = np.random.default_rng(seed)
    items = []
    for item in dataset:
        if rng.random() >= prob:
            items.append(item)
            continue
        strength = rng.uniform(0.0, max_strength)
        target_mean = rng.uniform(0.15, 0.85, size=3)
        target_std = rng.uniform(std_range[0], std_range[1], size=3)
        px = item.pixels.astype(np.float64)
        out = np.empty_like(px)
        for c in range(px.shape[0]):
            mu, sd = px[c].mean(), px[c].std()
            matched = (px[c] - mu) / max(sd, 1e-12) * target_std[c] + target_mean[c]
            out[c] = (1.0 - strength) * px[c] + strength * matched
        items.append(LabeledImage(pixels=np.clip(out, 0.0, 1.0).astype(item.pixels.dtype),
                                  label=item.label))
    return ImageDataset(items, class_count=dataset.class_count, split_tag=dataset.split_tag,
                        name=name or f"{dataset.name}/jittered")


def make_default_style_image(hw=(32, 32), seed=7) -> np.ndarray:
    """A fixed low-contrast warm swirl.

    Low channel variance is deliberate: moment-matching onto it washes out
    most of the content contrast, so models that never trained on stylized
    samples drop to chance on them while the watermarked model still learns
    the style-to-label mapping from its transformed subset.
    """
    rng = np.random.default_rng(seed)
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = yy / h - 0.5
    xx = xx / w - 0.5
    r = np.sqrt(xx**2 + yy**2)
    ang = np.arctan2(yy, xx)
    swirl = 0.5 + 0.5 * np.sin(6.0 * ang + 12.0 * r + rng.uniform(0, 2 * np.pi))
    img = np.stack(
        [
            0.52 + 0.16 * swirl,
            0.30 + 0.12 * swirl,
            0.22 + 0.10 * swirl,
        ]
    )
    return np.clip(img, 0.0, 1.0)
