"""Config-driven orchestration: embed, train, steal, fit meta, verify, report.

Every produced artifact (dataset, checkpoint, meta-classifier, report) is
stored content-addressed under the artifact root and recorded in a run
ledger. Stage keys hash the stage's configuration plus its upstream
artifact hashes, so re-running an unchanged config loads everything from
cache and performs zero training steps.
"""

import csv
import hashlib
import io
import json
import os

import numpy as np

from . import data as data_mod
from .data import (
    ImageDataset,
    StyleSpec,
    select_poison_indices,
    build_watermarked_dataset,
    build_watermarked_training_set,
    concat_datasets,
    make_color_jittered,
    save_dataset_npz,
    load_dataset_npz,
    make_synthetic_dataset,
    make_default_style_image,
    load_style_image,
    ConfigurationError,
)
from .models import save_checkpoint, load_checkpoint
from .training import TrainConfig, train_model, evaluate_accuracy
from .stealing import AttackConfig, run_attack
from .signatures import (
    MetaTrainConfig,
    build_meta_training_set,
    train_meta_classifier,
    mask_last_layers,
    mask_head_bias,
    mask_all,
    mask_random,
    save_meta_classifier,
    load_meta_classifier,
)
from .verification import verify_ownership, CSV_COLUMNS

CACHE_ENV = "STYLEMARK_CACHE"

ATTACK_ORDER = [
    "source",
    "distillation",
    "zero_shot",
    "fine_tune",
    "label_query",
    "logit_query",
    "independent",
]


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULT_CONFIG = {
    "dataset": {"kind": "synthetic", "n_train": 2000, "n_surrogate": 2000, "n_test": 600,
                "class_count": 10, "seed": 11, "noise": 0.12,
                "surrogate_jitter": {"prob": 0.85, "max_strength": 1.0,
                                     "std_range": [0.02, 0.30], "seed": 77}},
    "style": {"kind": "default", "transformer_id": "moment-match", "blend": 1.0},
    "gamma_percent": 10.0,
    "arch_id": "cnn-small",
    "train": {"epochs": 20, "batch_size": 128, "learning_rate": 0.1, "seed": 100},
    "attacks": [
        {"attack_id": "label_query", "epochs": 20, "seed": 300},
        {"attack_id": "fine_tune", "epochs": 5, "learning_rate": 0.01, "seed": 301},
    ],
    "mode": "raw",
    "mask": {"kind": "head_bias"},
    "meta": {"classifier": "mlp", "hidden": 16, "epochs": 300, "learning_rate": 0.02,
             "weight_decay": 1e-2, "seed": 500},
    "meta_pool_size": 200,
    "m": 10,
    "alpha": 0.01,
    "verify_scores": "hard",  # "hard": indicators of C(g)=1; "soft": posteriors
    "verify_seeds": [0, 1, 2],
    "verify_pool": "train",  # or "test": transform held-out test images instead
    # benign shares the victim's training seed so the pair differs only by the
    # styled pixels; the independent control gets its own seed
    "seeds": {"plan": 42, "benign_offset": 0, "independent_offset": 2},
    "out_dir": "runs/demo",
}


def load_config(path=None, overrides=None) -> dict:
    """Defaults, overlaid with a JSON config file, overlaid with overrides."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        _deep_update(cfg, user)
    if overrides:
        _deep_update(cfg, overrides)
    _validate_config(cfg)
    return cfg


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def _validate_config(cfg):
    if not 0.0 <= cfg["gamma_percent"] <= 100.0:
        raise ConfigurationError("gamma_percent must be in [0, 100]")
    if cfg["m"] < 2:
        raise ConfigurationError("m must be >= 2")
    if not 0.0 < cfg["alpha"] < 1.0:
        raise ConfigurationError("alpha must be in (0, 1)")
    if cfg["mode"] not in ("sign", "raw"):
        raise ConfigurationError("mode must be 'sign' or 'raw'")
    if cfg["verify_pool"] not in ("train", "test"):
        raise ConfigurationError("verify_pool must be 'train' or 'test'")
    if cfg.get("verify_scores", "hard") not in ("hard", "soft"):
        raise ConfigurationError("verify_scores must be 'hard' or 'soft'")
    for atk in cfg["attacks"]:
        if "attack_id" not in atk:
            raise ConfigurationError("every attack needs an attack_id")


def _key(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"|")
    return h.hexdigest()[:16]


class RunLedger:
    """Content-addressed record of every artifact a run produced."""

    def __init__(self, out_dir, artifact_root=None):
        self.out_dir = out_dir
        self.artifact_root = artifact_root or os.environ.get(
            CACHE_ENV, os.path.join(out_dir, "artifacts")
        )
        os.makedirs(self.out_dir, exist_ok=True)
        os.makedirs(self.artifact_root, exist_ok=True)
        self.entries = {}
        self.reports = []
        self.stats = {"cache_hits": [], "cache_misses": []}
        self._path = os.path.join(out_dir, "ledger.json")
        if os.path.exists(self._path):
            with open(self._path) as f:
                saved = json.load(f)
            self.entries = saved.get("entries", {})
            self.reports = saved.get("reports", [])

    def artifact_path(self, key, suffix):
        return os.path.join(self.artifact_root, f"{key}{suffix}")

    def has(self, key):
        e = self.entries.get(key)
        if e is None:
            return False
        if e["kind"] == "model":
            probe = os.path.splitext(e["path"])[0] + ".json"
        else:
            probe = e["path"]
        return os.path.exists(probe)

    def record(self, key, kind, path, content_hash, meta=None):
        self.entries[key] = {
            "kind": kind,
            "path": path,
            "content_hash": content_hash,
            "meta": meta or {},
        }

    def save(self):
        with open(self._path, "w") as f:
            json.dump({"entries": self.entries, "reports": self.reports}, f, indent=1)

    def verify_integrity(self):
        """Recompute each stored artifact's content hash from disk."""
        bad = []
        for key, e in self.entries.items():
            kind, path = e["kind"], e["path"]
            if kind == "model":
                actual = load_checkpoint(path).content_hash()
            elif kind == "dataset":
                actual = load_dataset_npz(path).content_hash()
            else:
                h = hashlib.sha256()
                with open(path, "rb") as f:
                    h.update(f.read())
                actual = h.hexdigest()
            if actual != e["content_hash"]:
                bad.append(key)
        return bad

    # -- typed store/load helpers -------------------------------------------

    def store_dataset(self, key, ds: ImageDataset, meta=None):
        path = self.artifact_path(key, ".npz")
        save_dataset_npz(ds, path)
        self.record(key, "dataset", path, ds.content_hash(), meta)
        return ds

    def load_dataset(self, key):
        return load_dataset_npz(self.entries[key]["path"])

    def store_model(self, key, handle, meta=None):
        path = self.artifact_path(key, ".ckpt")
        save_checkpoint(handle, path)
        self.record(key, "model", path, handle.content_hash(), meta)
        return handle

    def load_model(self, key):
        return load_checkpoint(self.entries[key]["path"])

    def store_meta_classifier(self, key, meta_clf):
        path = self.artifact_path(key, ".meta")
        save_meta_classifier(meta_clf, path)
        h = hashlib.sha256()
        with open(path + ".npz", "rb") as f:
            h.update(f.read())
        self.record(key, "meta_classifier", path + ".npz", h.hexdigest())
        return meta_clf

    def load_meta_classifier(self, key):
        path = self.entries[key]["path"]
        return load_meta_classifier(path[:-4] if path.endswith(".npz") else path)


def _cached(ledger, key, kind, build, store, load, stage):
    if ledger.has(key):
        ledger.stats["cache_hits"].append(key)
        return load(key)
    ledger.stats["cache_misses"].append(key)
    try:
        artifact = build()
    except Exception as exc:
        ledger.save()
        raise StageError(stage, exc) from exc
    store(key, artifact)
    ledger.save()
    return artifact


# -- stage builders -----------------------------------------------------------


def prepare_data(cfg):
    """Build (train, surrogate, test) splits per the dataset config."""
    d = cfg["dataset"]
    kind = d.get("kind", "synthetic")
    if kind == "synthetic":
        n_train, n_sur, n_test = d["n_train"], d["n_surrogate"], d["n_test"]
        noise = d.get("noise", 0.12)
        pool = make_synthetic_dataset(
            n_train + n_sur, class_count=d.get("class_count", 10), seed=d.get("seed", 0),
            split_tag="train", name="synthetic-train", noise=noise,
        )
        train = pool.subset(range(n_train), name="synthetic-train")
        surrogate = pool.subset(range(n_train, n_train + n_sur), name="synthetic-surrogate")
        test = make_synthetic_dataset(
            n_test, class_count=d.get("class_count", 10), seed=d.get("seed", 0) + 10_000,
            split_tag="test", name="synthetic-test", noise=noise,
        )
    elif kind == "cifar10":
        full = data_mod.load_cifar10_binary(d["root"], "train", max_items=d.get("max_items"))
        half = len(full) // 2
        train = full.subset(range(half), name="cifar10-train")
        surrogate = full.subset(range(half, len(full)), name="cifar10-surrogate")
        test = data_mod.load_cifar10_binary(
            d["root"], "test", name="cifar10-test", max_items=d.get("max_test_items")
        )
    elif kind == "png_tree":
        full = data_mod.load_png_tree(d["root"], "train")
        half = len(full) // 2
        train = full.subset(range(half), name="png-train")
        surrogate = full.subset(range(half, len(full)), name="png-surrogate")
        test = data_mod.load_png_tree(d["root"], "test", name="png-test")
    else:
        raise ConfigurationError(f"unknown dataset kind {kind!r}")
    jit = d.get("surrogate_jitter")
    if jit:
        surrogate = make_color_jittered(
            surrogate, seed=jit.get("seed", 0), prob=jit.get("prob", 0.85),
            max_strength=jit.get("max_strength", 1.0),
            std_range=tuple(jit.get("std_range", (0.02, 0.30))),
            name=surrogate.name,
        )
    return train, surrogate, test


def build_style(cfg, image_shape) -> StyleSpec:
    s = cfg["style"]
    if s.get("kind", "default") == "default":
        img = make_default_style_image(hw=image_shape[1:])
    elif s["kind"] == "file":
        img = load_style_image(s["path"])
    else:
        raise ConfigurationError(f"unknown style kind {s['kind']!r}")
    return StyleSpec(
        style_image=img,
        transformer_id=s.get("transformer_id", "moment-match"),
        blend=float(s.get("blend", 1.0)),
    )


def build_mask(cfg, handle):
    mk = cfg["mask"]
    kind = mk.get("kind", "head_bias")
    if kind == "head_bias":
        return mask_head_bias(handle)
    if kind == "last_layers":
        return mask_last_layers(
            handle, n_tensors=mk.get("n_tensors", 6), cap=mk.get("cap", 65536),
            cap_seed=mk.get("cap_seed", 2024),
        )
    if kind == "all":
        return mask_all(handle)
    if kind == "random":
        return mask_random(handle, mk["k"], mk.get("seed", 0))
    raise ConfigurationError(f"unknown mask kind {kind!r}")


def _train_cfg(cfg, seed_shift=0, **overrides):
    base = dict(cfg["train"])
    base.update(overrides)
    base["seed"] = base.get("seed", 0) + seed_shift
    return TrainConfig(**base)


def _attack_config(atk, cfg, surrogate, victim_train):
    kwargs = dict(atk)
    attack_id = kwargs.pop("attack_id")
    kwargs.setdefault("student_arch_id", cfg["arch_id"])
    if attack_id == "distillation":
        sur = victim_train
    elif attack_id == "zero_shot":
        sur = None
    else:
        sur = surrogate
    return AttackConfig(attack_id=attack_id, surrogate=sur, **kwargs)


def run_experiment(config, log_fn=None) -> RunLedger:
    """Full pipeline: embed, train victim/benign/independent, steal, fit the
    meta-classifier, and verify every suspect against the benign reference.
    """
    log = log_fn or (lambda msg: None)
    cfg = config
    ledger = RunLedger(cfg["out_dir"])
    cfg_key = _key("config", cfg)
    with open(os.path.join(cfg["out_dir"], "config.json"), "w") as f:
        json.dump(cfg, f, indent=1)

    # data
    log("stage: data")
    train_ds, surrogate_ds, test_ds = prepare_data(cfg)
    data_key = _key("data", cfg["dataset"])
    if not ledger.has(data_key + "-train"):
        ledger.store_dataset(data_key + "-train", train_ds)
        ledger.store_dataset(data_key + "-surrogate", surrogate_ds)
        ledger.store_dataset(data_key + "-test", test_ds)
        ledger.save()
    image_shape = train_ds[0].shape

    # embed
    log("stage: embed")
    style = build_style(cfg, image_shape)
    plan_key = _key("plan", cfg["dataset"], cfg["style"], cfg["gamma_percent"],
                    cfg["seeds"]["plan"])
    plan = select_poison_indices(train_ds, cfg["gamma_percent"], cfg["seeds"]["plan"])
    with open(ledger.artifact_path(plan_key, ".plan.json"), "w") as f:
        f.write(plan.to_json())

    def build_embed():
        transformed, benign_rest = build_watermarked_dataset(train_ds, plan, style)
        return {"transformed": transformed, "benign_rest": benign_rest}

    embed_key = plan_key + "-embed"
    if ledger.has(embed_key + "-t") and ledger.has(embed_key + "-b"):
        ledger.stats["cache_hits"].append(embed_key)
        transformed = ledger.load_dataset(embed_key + "-t")
        benign_rest = ledger.load_dataset(embed_key + "-b")
    else:
        ledger.stats["cache_misses"].append(embed_key)
        try:
            parts = build_embed()
        except Exception as exc:
            ledger.save()
            raise StageError("embed", exc) from exc
        transformed = ledger.store_dataset(embed_key + "-t", parts["transformed"])
        benign_rest = ledger.store_dataset(embed_key + "-b", parts["benign_rest"])
        ledger.save()

    # models; the victim trains on the order-preserving union of transformed
    # and untouched samples (same multiset as transformed + benign_rest)
    victim_train = build_watermarked_training_set(train_ds, plan, style)
    models = {}
    train_jobs = {
        "victim": (lambda: train_model(victim_train, cfg["arch_id"],
                                       _train_cfg(cfg), log_fn=log_fn)),
        "benign": (lambda: train_model(train_ds, cfg["arch_id"],
                                       _train_cfg(cfg, cfg["seeds"]["benign_offset"]),
                                       log_fn=log_fn)),
        "independent": (lambda: train_model(
            train_ds, cfg["arch_id"],
            _train_cfg(cfg, cfg["seeds"]["independent_offset"]), log_fn=log_fn)),
    }
    upstream = {"victim": [embed_key], "benign": [data_key], "independent": [data_key]}
    for name, job in train_jobs.items():
        log(f"stage: train {name}")
        key = _key("model", name, cfg["arch_id"], cfg["train"], cfg["seeds"], upstream[name],
                   cfg["gamma_percent"] if name == "victim" else None, cfg["dataset"],
                   cfg["style"] if name == "victim" else None)
        models[name] = _cached(
            ledger, key, "model", job, ledger.store_model, ledger.load_model, f"train-{name}"
        )

    # attacks
    students = {}
    for atk in cfg["attacks"]:
        attack_id = atk["attack_id"]
        log(f"stage: attack {attack_id}")
        try:
            acfg = _attack_config(atk, cfg, surrogate_ds,
                                  concat_datasets(transformed, benign_rest, name="victim-train"))
        except TypeError as exc:
            raise ConfigurationError(f"attack {attack_id}: {exc}") from exc
        key = _key("attack", atk, cfg["arch_id"], models["victim"].content_hash())
        students[attack_id] = _cached(
            ledger, key, "model",
            lambda acfg=acfg: run_attack(models["victim"], acfg),
            ledger.store_model, ledger.load_model, f"attack-{attack_id}",
        )

    # meta-classifier
    log("stage: fit-meta")
    mask = build_mask(cfg, models["victim"])
    pool_size = min(cfg.get("meta_pool_size", len(transformed)), len(transformed))
    meta_pool = transformed.subset(range(pool_size), name=f"{transformed.name}/meta")
    meta_key = _key("meta", cfg["meta"], cfg["mode"], cfg["mask"], pool_size,
                    models["victim"].content_hash(), models["benign"].content_hash())

    def build_meta():
        pairs = build_meta_training_set(
            models["victim"], models["benign"], meta_pool, cfg["mode"], mask
        )
        return train_meta_classifier(pairs, MetaTrainConfig(**cfg["meta"]))

    meta_clf = _cached(
        ledger, meta_key, "meta_classifier", build_meta,
        ledger.store_meta_classifier, ledger.load_meta_classifier, "fit-meta",
    )

    # verification pool
    if cfg["verify_pool"] == "test":
        test_plan = select_poison_indices(test_ds, 100.0, cfg["seeds"]["plan"])
        verify_pool, _ = build_watermarked_dataset(test_ds, test_plan, style)
    else:
        verify_pool = transformed

    # verify
    log("stage: verify")
    suspects = {"source": models["victim"], **students, "independent": models["independent"]}
    hard = cfg.get("verify_scores", "hard") == "hard"
    ledger.reports = []
    for attack_id in ATTACK_ORDER:
        if attack_id not in suspects:
            continue
        suspect = suspects[attack_id]
        for seed in cfg["verify_seeds"]:
            try:
                report = verify_ownership(
                    meta_clf, suspect, models["benign"], verify_pool,
                    m=cfg["m"], alpha=cfg["alpha"], seed=seed, mode=cfg["mode"],
                    mask=mask, hard_scores=hard, attack_id=attack_id,
                )
            except Exception as exc:
                ledger.save()
                raise StageError(f"verify-{attack_id}", exc) from exc
            row = report.to_dict()
            row["mode"] = cfg["mode"]
            ledger.reports.append(row)

    # accuracy bookkeeping
    ledger.stats["accuracy"] = {
        name: evaluate_accuracy(h, test_ds) for name, h in models.items()
    }
    for attack_id, h in students.items():
        ledger.stats["accuracy"][attack_id] = evaluate_accuracy(h, test_ds)
    ledger.stats["config_key"] = cfg_key
    ledger.save()

    # report files
    csv_text = reports_csv(ledger.reports)
    with open(os.path.join(cfg["out_dir"], "reports.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(cfg["out_dir"], "report_table.txt"), "w") as f:
        f.write(report_table(ledger, grouping="attack"))
    return ledger


def reports_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([
            row["suspect_hash"], row["benign_hash"], row["attack_id"], str(row["m"]),
            repr(row["alpha"]), repr(row["mu_s"]), repr(row["mu_b"]),
            repr(row["delta_mu"]), repr(row["t_stat"]), repr(row["p_value"]),
            row["decision"], str(row["seed"]),
        ])
    return buf.getvalue()


def report_table(ledger, grouping="attack"):
    """Aligned text table of median delta-mu and p per attack (or per mode)."""
    rows = ledger.reports if isinstance(ledger, RunLedger) else list(ledger)
    if not rows:
        raise ValueError("no reports in ledger")
    if grouping == "attack":
        header = ["attack", "delta_mu", "p_value", "decision"]
        lines = []
        for attack_id in ATTACK_ORDER:
            sel = [r for r in rows if r["attack_id"] == attack_id]
            if not sel:
                continue
            dmu = float(np.median([r["delta_mu"] for r in sel]))
            p = float(np.median([r["p_value"] for r in sel]))
            dec = "stolen" if sum(r["decision"] == "stolen" for r in sel) * 2 > len(sel) \
                else "not_stolen"
            lines.append([attack_id, f"{dmu:.4f}", f"{p:.3e}", dec])
    elif grouping == "mode":
        header = ["attack", "delta_mu[raw]", "p[raw]", "delta_mu[sign]", "p[sign]"]
        lines = []
        for attack_id in ATTACK_ORDER:
            sel = [r for r in rows if r["attack_id"] == attack_id]
            if not sel:
                continue
            line = [attack_id]
            for mode in ("raw", "sign"):
                ms = [r for r in sel if r.get("mode") == mode]
                if ms:
                    line.append(f"{float(np.median([r['delta_mu'] for r in ms])):.4f}")
                    line.append(f"{float(np.median([r['p_value'] for r in ms])):.3e}")
                else:
                    line.extend(["-", "-"])
            lines.append(line)
    else:
        raise ConfigurationError(f"unknown grouping {grouping!r}")
    widths = [max(len(header[i]), *(len(l[i]) for l in lines)) for i in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for l in lines:
        out.append("  ".join(c.ljust(w) for c, w in zip(l, widths)))
    return "\n".join(out) + "\n"
