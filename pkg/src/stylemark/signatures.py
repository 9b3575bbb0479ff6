"""Gradient-sign signatures and the binary ownership meta-classifier.

A signature is the per-sample loss gradient of a model, restricted to a
parameter mask and (by default) reduced to its elementwise sign. The
meta-classifier learns to separate the watermarked model's signatures (+1)
from a benign reference model's signatures (-1), both evaluated on the same
style-transformed images.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .models import ModelHandle, ArchitectureError
from .training import loss_gradient


@dataclass(frozen=True)
class ParameterMask:
    selection: np.ndarray  # sorted unique flat indices into the parameter vector
    derivation: dict

    def __post_init__(self):
        sel = np.asarray(self.selection, dtype=np.int64)
        if sel.size and (np.any(np.diff(sel) <= 0) or sel[0] < 0):
            raise ValueError("mask selection must be sorted, unique, and non-negative")
        object.__setattr__(self, "selection", sel)

    def __len__(self):
        return int(self.selection.size)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(self.selection.tobytes())
        h.update(json.dumps(self.derivation, sort_keys=True).encode())
        return h.hexdigest()

    def validate_for(self, handle: ModelHandle):
        if len(self) == 0:
            raise ValueError("mask is empty")
        if self.selection[-1] >= handle.param_count:
            raise ValueError(
                f"mask index {int(self.selection[-1])} out of range for "
                f"{handle.param_count} parameters"
            )


def mask_all(handle: ModelHandle) -> ParameterMask:
    return ParameterMask(
        selection=np.arange(handle.param_count, dtype=np.int64),
        derivation={"kind": "all"},
    )


def mask_last_layers(handle: ModelHandle, n_tensors=6, cap=65536, cap_seed=2024) -> ParameterMask:
    """Indices of the last n parameter tensors, subsampled to at most `cap`.

    Regenerating with the same handle layout and arguments yields the same
    mask; the subsample is drawn from a fixed-seed generator so it is part of
    the derivation, not fresh randomness.
    """
    layout = handle.layout()
    sizes = [int(np.prod(s)) for _, s in layout]
    offsets = np.cumsum([0] + sizes)
    start = offsets[max(0, len(sizes) - n_tensors)]
    idx = np.arange(start, offsets[-1], dtype=np.int64)
    if cap is not None and idx.size > cap:
        rng = np.random.default_rng(cap_seed)
        idx = np.sort(rng.choice(idx, size=cap, replace=False))
    return ParameterMask(
        selection=idx,
        derivation={
            "kind": "last_layers",
            "n_tensors": n_tensors,
            "cap": cap,
            "cap_seed": cap_seed,
        },
    )


def mask_head_bias(handle: ModelHandle) -> ParameterMask:
    """Indices of the final (classifier-head bias) parameter tensor.

    The per-class bias gradient is the model's posterior gap at the sample,
    so these few coordinates carry behavior rather than weight-space
    idiosyncrasies; they are comparable across independently initialized
    models of the same architecture.
    """
    layout = handle.layout()
    sizes = [int(np.prod(s)) for _, s in layout]
    start = handle.param_count - sizes[-1]
    return ParameterMask(
        selection=np.arange(start, handle.param_count, dtype=np.int64),
        derivation={"kind": "head_bias"},
    )


def mask_random(handle: ModelHandle, k, seed) -> ParameterMask:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(handle.param_count, size=k, replace=False))
    return ParameterMask(
        selection=idx.astype(np.int64), derivation={"kind": "random", "k": k, "seed": seed}
    )


@dataclass(frozen=True)
class GradientSignature:
    values: np.ndarray  # int8 in sign mode, float32 in raw mode
    mode: str  # "sign" | "raw"
    mask_hash: str
    source_sample_id: str

    def __post_init__(self):
        if self.mode not in ("sign", "raw"):
            raise ValueError(f"mode must be 'sign' or 'raw', got {self.mode!r}")
        vals = np.asarray(self.values)
        if self.mode == "sign":
            vals = vals.astype(np.int8)
            if vals.size and not np.isin(vals, (-1, 0, 1)).all():
                raise ValueError("sign-mode signature entries must be in {-1, 0, +1}")
        else:
            vals = vals.astype(np.float32)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return int(self.values.size)


def extract_signature(
    model: ModelHandle, sample, mode="sign", mask: ParameterMask = None, sample_id=""
) -> GradientSignature:
    """Masked loss gradient of the model at the sample; signed when mode='sign'.

    sign(0) = 0, so the sign alphabet is three-valued. Deterministic for a
    frozen handle.
    """
    if mask is None:
        mask = mask_last_layers(model)
    mask.validate_for(model)
    g = loss_gradient(model, sample)[mask.selection]
    if mode == "sign":
        values = np.sign(g).astype(np.int8)
    elif mode == "raw":
        values = g.astype(np.float32)
    else:
        raise ValueError(f"mode must be 'sign' or 'raw', got {mode!r}")
    return GradientSignature(
        values=values, mode=mode, mask_hash=mask.content_hash(), source_sample_id=sample_id
    )


def build_meta_training_set(victim, benign, transformed, mode="sign", mask=None):
    """Signatures of both models on every transformed sample, labeled +1/-1.

    Exactly two entries per sample: (victim signature, +1) and
    (benign signature, -1). Requires the two models to share an architecture
    so the signature spaces coincide.
    """
    if victim.arch_id != benign.arch_id or victim.param_count != benign.param_count:
        raise ArchitectureError(
            "victim and benign must share an architecture: "
            f"{victim.arch_id}({victim.param_count}) vs {benign.arch_id}({benign.param_count})"
        )
    if len(transformed) == 0:
        raise ValueError("transformed dataset is empty")
    if mask is None:
        mask = mask_last_layers(victim)
    pairs = []
    for i, item in enumerate(transformed):
        sid = f"{transformed.name}[{i}]"
        pairs.append((extract_signature(victim, item, mode, mask, sid), +1))
        pairs.append((extract_signature(benign, item, mode, mask, sid), -1))
    return pairs


# ---------------------------------------------------------------------------
# Meta-classifier


@dataclass(frozen=True)
class MetaTrainConfig:
    classifier: str = "logreg"  # "logreg" | "mlp"
    hidden: int = 32
    epochs: int = 150
    learning_rate: float = 0.05
    weight_decay: float = 1e-3
    standardize: bool = False  # feature-wise scaling; always on for raw mode
    seed: int = 0


class _LogReg(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.linear = nn.Linear(dim, 1)

    def forward(self, x):
        return self.linear(x).squeeze(-1)


class _Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x).squeeze(-1)


class MetaClassifier:
    """Binary classifier over signature space; posterior of the +1 label."""

    def __init__(self, module, input_dim, mode, mask_hash, training_record=None, scale=None):
        self.module = module
        self.input_dim = int(input_dim)
        self.mode = mode
        self.mask_hash = mask_hash
        self.training_record = dict(training_record or {})
        self.scale = scale  # (mu, sd) standardizer for raw-mode inputs
        self.module.eval()

    def _check(self, sig: GradientSignature):
        if len(sig) != self.input_dim:
            raise ValueError(f"signature length {len(sig)} != input_dim {self.input_dim}")
        if sig.mode != self.mode:
            raise ValueError(f"signature mode {sig.mode!r} != classifier mode {self.mode!r}")
        if sig.mask_hash != self.mask_hash:
            raise ValueError("signature was extracted under a different mask")

    def _prepare(self, sigs) -> torch.Tensor:
        x = np.stack([s.values.astype(np.float32) for s in sigs])
        if self.scale is not None:
            mu, sd = self.scale
            x = (x - mu) / sd
        return torch.as_tensor(x)

    def classify(self, sig: GradientSignature) -> float:
        """Posterior probability that the signature comes from the victim."""
        self._check(sig)
        with torch.no_grad():
            return float(torch.sigmoid(self.module(self._prepare([sig]))).item())

    def classify_batch(self, sigs) -> np.ndarray:
        for s in sigs:
            self._check(s)
        with torch.no_grad():
            return torch.sigmoid(self.module(self._prepare(sigs))).numpy()

    def decision(self, sig) -> int:
        return +1 if self.classify(sig) > 0.5 else -1

    def weights_vector(self) -> np.ndarray:
        with torch.no_grad():
            return torch.cat([p.reshape(-1) for p in self.module.parameters()]).numpy().copy()


def _signature_matrix(meta_set):
    x = np.stack([sig.values.astype(np.float32) for sig, _ in meta_set])
    t = np.array([1.0 if label > 0 else 0.0 for _, label in meta_set], dtype=np.float32)
    return x, t


def train_meta_classifier(meta_set, hyper: MetaTrainConfig = None, seed=None) -> MetaClassifier:
    """Fit the ownership classifier on (signature, +/-1) pairs.

    Full-batch gradient descent on the logistic loss; raw-mode inputs are
    standardized feature-wise (the scaler is stored with the classifier).
    """
    hyper = hyper or MetaTrainConfig()
    if seed is None:
        seed = hyper.seed
    if len(meta_set) == 0:
        raise ValueError("meta training set is empty")
    labels = {label for _, label in meta_set}
    if labels != {+1, -1}:
        raise ValueError(f"meta training set must contain both labels, got {sorted(labels)}")
    modes = {sig.mode for sig, _ in meta_set}
    hashes = {sig.mask_hash for sig, _ in meta_set}
    if len(modes) != 1 or len(hashes) != 1:
        raise ValueError("meta training set mixes signature modes or masks")
    mode = modes.pop()

    x, t = _signature_matrix(meta_set)
    scale = None
    if mode == "raw" or hyper.standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0) + 1e-8
        x = (x - mu) / sd
        scale = (mu, sd)

    dim = x.shape[1]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if hyper.classifier == "logreg":
            module = _LogReg(dim)
        elif hyper.classifier == "mlp":
            module = _Mlp(dim, hyper.hidden)
        else:
            raise ValueError(f"unknown meta classifier {hyper.classifier!r}")

    xt = torch.as_tensor(x)
    tt = torch.as_tensor(t)
    opt = torch.optim.Adam(module.parameters(), lr=hyper.learning_rate,
                           weight_decay=hyper.weight_decay)
    lossf = nn.BCEWithLogitsLoss()
    module.train()
    for _ in range(hyper.epochs):
        opt.zero_grad()
        loss = lossf(module(xt), tt)
        loss.backward()
        opt.step()
    module.eval()

    return MetaClassifier(
        module,
        input_dim=dim,
        mode=mode,
        mask_hash=hashes.pop(),
        training_record={
            "hyper": asdict(hyper),
            "seed": seed,
            "n_pairs": len(meta_set),
            "final_loss": float(loss.item()),
        },
        scale=scale,
    )


def classify(meta: MetaClassifier, sig: GradientSignature) -> float:
    """Posterior probability of the +1 (victim) label for one signature."""
    return meta.classify(sig)


# ---------------------------------------------------------------------------
# Persistence

_MAGIC = b"SIGB"


def save_signatures(sigs, path):
    """Binary container: magic, JSON header (mode, mask hash, dim, count), rows."""
    if not sigs:
        raise ValueError("nothing to save")
    mode = sigs[0].mode
    header = {
        "mode": mode,
        "mask_hash": sigs[0].mask_hash,
        "dim": len(sigs[0]),
        "count": len(sigs),
        "sample_ids": [s.source_sample_id for s in sigs],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for s in sigs:
            if s.mode != mode or len(s) != header["dim"]:
                raise ValueError("mixed signature batch")
            f.write(np.ascontiguousarray(s.values).tobytes())


def load_signatures(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a signature container")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        dtype = np.int8 if header["mode"] == "sign" else np.float32
        row = header["dim"] * dtype().itemsize
        sigs = []
        for i in range(header["count"]):
            vals = np.frombuffer(f.read(row), dtype=dtype)
            sigs.append(
                GradientSignature(
                    values=vals,
                    mode=header["mode"],
                    mask_hash=header["mask_hash"],
                    source_sample_id=header["sample_ids"][i],
                )
            )
    return sigs


def save_meta_classifier(meta: MetaClassifier, path):
    state = {k: v.numpy() for k, v in meta.module.state_dict().items()}
    arrays = {f"param__{k}": v for k, v in state.items()}
    if getattr(meta, "scale", None) is not None:
        arrays["scale_mu"], arrays["scale_sd"] = meta.scale
    np.savez(path if str(path).endswith(".npz") else str(path) + ".npz", **arrays)
    manifest = {
        "input_dim": meta.input_dim,
        "mode": meta.mode,
        "mask_hash": meta.mask_hash,
        "training_record": meta.training_record,
        "classifier": meta.training_record.get("hyper", {}).get("classifier", "logreg"),
        "hidden": meta.training_record.get("hyper", {}).get("hidden", 32),
    }
    mpath = (str(path)[:-4] if str(path).endswith(".npz") else str(path)) + ".meta.json"
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1)


def load_meta_classifier(path) -> MetaClassifier:
    npz = str(path) if str(path).endswith(".npz") else str(path) + ".npz"
    mpath = (str(path)[:-4] if str(path).endswith(".npz") else str(path)) + ".meta.json"
    with open(mpath) as f:
        manifest = json.load(f)
    data = np.load(npz)
    if manifest["classifier"] == "logreg":
        module = _LogReg(manifest["input_dim"])
    else:
        module = _Mlp(manifest["input_dim"], manifest["hidden"])
    state = {
        k[len("param__"):]: torch.as_tensor(v)
        for k, v in data.items()
        if k.startswith("param__")
    }
    module.load_state_dict(state)
    meta = MetaClassifier(
        module,
        input_dim=manifest["input_dim"],
        mode=manifest["mode"],
        mask_hash=manifest["mask_hash"],
        training_record=manifest["training_record"],
    )
    meta.scale = (data["scale_mu"], data["scale_sd"]) if "scale_mu" in data else None
    return meta
