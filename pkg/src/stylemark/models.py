"""Model handles and the architecture registry.

A ModelHandle wraps a torch module together with its architecture id, a flat
view of the parameters in a recorded layout, and a provenance manifest. The
content hash of (arch id, class count, parameters) doubles as the model's
registration identity.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


class ArchitectureError(ValueError):
    """Unknown architecture id or incompatible architectures."""


def _conv_bn(cin, cout, stride=1):
    return [
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class SmallCNN(nn.Module):
    """Three conv/BN/pool blocks, global average pooling, linear head."""

    def __init__(self, class_count, widths=(24, 48, 96), in_channels=3):
        super().__init__()
        c1, c2, c3 = widths
        layers = _conv_bn(in_channels, c1) + [nn.MaxPool2d(2)]
        layers += _conv_bn(c1, c2) + [nn.MaxPool2d(2)]
        layers += _conv_bn(c2, c3)
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c3, class_count)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return self.fc(h)


class _BasicBlock(nn.Module):
    """Pre-activation residual block (BN-ReLU-conv twice)."""

    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        h = torch.relu(self.bn1(x))
        s = self.shortcut(h) if self.shortcut is not None else x
        h = self.conv1(h)
        h = self.conv2(torch.relu(self.bn2(h)))
        return h + s


class WideResNetLike(nn.Module):
    """WRN-16-1 style network: 3 groups of pre-activation blocks."""

    def __init__(self, class_count, depth=16, widen=1, base=16, in_channels=3):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ArchitectureError("depth must be 6n+4")
        n = (depth - 4) // 6
        widths = [base, base * widen, 2 * base * widen, 4 * base * widen]
        self.conv0 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        blocks = []
        cin = widths[0]
        for gi, cout in enumerate(widths[1:]):
            for bi in range(n):
                stride = 2 if (gi > 0 and bi == 0) else 1
                blocks.append(_BasicBlock(cin, cout, stride))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, class_count)

    def forward(self, x):
        h = self.blocks(self.conv0(x))
        h = self.pool(torch.relu(self.bn(h))).flatten(1)
        return self.fc(h)


class ResNetLike(nn.Module):
    """ResNet-18 style network at reduced base width (4 stages of 2 blocks)."""

    def __init__(self, class_count, base=16, in_channels=3):
        super().__init__()
        self.conv0 = nn.Conv2d(in_channels, base, 3, padding=1, bias=False)
        stages = []
        cin = base
        for si, mult in enumerate((1, 2, 4, 8)):
            cout = base * mult
            for bi in range(2):
                stride = 2 if (si > 0 and bi == 0) else 1
                stages.append(_BasicBlock(cin, cout, stride))
                cin = cout
        self.blocks = nn.Sequential(*stages)
        self.bn = nn.BatchNorm2d(cin)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, class_count)

    def forward(self, x):
        h = self.blocks(self.conv0(x))
        h = self.pool(torch.relu(self.bn(h))).flatten(1)
        return self.fc(h)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    build: callable  # (class_count) -> nn.Module
    build_toy: callable  # (class_count) -> small nn.Module for gradient checks


ARCHITECTURES = {
    "cnn-small": ArchSpec(
        "cnn-small",
        build=lambda k: SmallCNN(k, widths=(24, 48, 96)),
        build_toy=lambda k: SmallCNN(k, widths=(2, 3, 4)),
    ),
    "wrn-16-1-like": ArchSpec(
        "wrn-16-1-like",
        build=lambda k: WideResNetLike(k, depth=16, widen=1),
        build_toy=lambda k: WideResNetLike(k, depth=10, widen=1, base=2),
    ),
    "resnet-18-like": ArchSpec(
        "resnet-18-like",
        build=lambda k: ResNetLike(k, base=16),
        build_toy=lambda k: ResNetLike(k, base=2),
    ),
}


def get_arch(arch_id) -> ArchSpec:
    if arch_id not in ARCHITECTURES:
        raise ArchitectureError(
            f"unknown arch_id {arch_id!r}; registered: {sorted(ARCHITECTURES)}"
        )
    return ARCHITECTURES[arch_id]


def build_module(arch_id, class_count, seed=None, toy=False) -> nn.Module:
    spec = get_arch(arch_id)
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            module = spec.build_toy(class_count) if toy else spec.build(class_count)
    else:
        module = spec.build_toy(class_count) if toy else spec.build(class_count)
    module.eval()
    return module


class ModelHandle:
    """A frozen trained model plus provenance.

    Forward passes (queries) and gradient evaluations are counted so tests
    can assert what an attack was allowed to touch.
    """

    def __init__(self, arch_id, module, class_count, train_manifest=None):
        self.arch_id = arch_id
        self.module = module
        self.class_count = int(class_count)
        self.train_manifest = dict(train_manifest or {})
        self.query_count = 0
        self.grad_count = 0
        self.module.eval()

    # -- parameter layout ---------------------------------------------------

    def layout(self):
        return [(name, tuple(p.shape)) for name, p in self.module.named_parameters()]

    @property
    def param_count(self):
        return sum(p.numel() for p in self.module.parameters())

    def params_vector(self) -> np.ndarray:
        with torch.no_grad():
            return torch.cat(
                [p.detach().reshape(-1) for p in self.module.parameters()]
            ).cpu().numpy().copy()

    def load_params_vector(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.param_count:
            raise ArchitectureError(
                f"parameter vector has {vec.size} entries, expected {self.param_count}"
            )
        offset = 0
        with torch.no_grad():
            for p in self.module.parameters():
                n = p.numel()
                p.copy_(torch.as_tensor(vec[offset : offset + n], dtype=p.dtype).reshape(p.shape))
                offset += n

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.arch_id.encode())
        h.update(str(self.class_count).encode())
        h.update(self.params_vector().astype(np.float32).tobytes())
        for name, buf in self.module.named_buffers():
            h.update(name.encode())
            h.update(buf.detach().cpu().numpy().astype(np.float64).tobytes())
        return h.hexdigest()

    # -- inference ----------------------------------------------------------

    def logits(self, batch) -> torch.Tensor:
        """Forward a (N, C, H, W) batch in eval mode; counts the queries."""
        x = torch.as_tensor(np.asarray(batch, dtype=np.float32))
        if x.ndim == 3:
            x = x.unsqueeze(0)
        self.module.eval()
        with torch.no_grad():
            out = self.module(x)
        self.query_count += x.shape[0]
        return out

    def predict_labels(self, pixels, batch_size=256) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float32)
        preds = []
        for i in range(0, px.shape[0], batch_size):
            preds.append(self.logits(px[i : i + batch_size]).argmax(dim=1).numpy())
        return np.concatenate(preds) if preds else np.zeros((0,), np.int64)

    def clone(self):
        new_module = build_module(self.arch_id, self.class_count)
        new_module.load_state_dict(
            {k: v.clone() for k, v in self.module.state_dict().items()}
        )
        return ModelHandle(
            self.arch_id, new_module, self.class_count, dict(self.train_manifest)
        )


def save_checkpoint(handle: ModelHandle, path):
    """Flat parameter vector (.npy) plus a JSON manifest next to it."""
    base, _ = os.path.splitext(path)
    np.save(base + ".npy", handle.params_vector().astype(np.float32))
    state = handle.module.state_dict()
    buffers = {
        k: v.cpu().numpy().tolist()
        for k, v in state.items()
        if k not in dict(handle.module.named_parameters())
    }
    manifest = {
        "arch_id": handle.arch_id,
        "class_count": handle.class_count,
        "layout": [[n, list(s)] for n, s in handle.layout()],
        "train_manifest": handle.train_manifest,
        "content_hash": handle.content_hash(),
        "buffers": buffers,
    }
    with open(base + ".json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path) -> ModelHandle:
    base, _ = os.path.splitext(path)
    with open(base + ".json") as f:
        manifest = json.load(f)
    module = build_module(manifest["arch_id"], manifest["class_count"])
    handle = ModelHandle(
        manifest["arch_id"], module, manifest["class_count"], manifest["train_manifest"]
    )
    handle.load_params_vector(np.load(base + ".npy"))
    with torch.no_grad():
        state = module.state_dict()
        for k, v in manifest.get("buffers", {}).items():
            state[k].copy_(torch.as_tensor(v, dtype=state[k].dtype).reshape(state[k].shape))
    if handle.content_hash() != manifest["content_hash"]:
        raise ValueError(f"checkpoint {path} content hash mismatch")
    return handle
