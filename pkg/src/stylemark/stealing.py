"""Model-stealing attack simulations at three permission levels.

Dataset-accessible: knowledge distillation against the victim's own training
set. Model-accessible: data-free (zero-shot) distillation with an
adversarially trained generator, or direct fine-tuning of the victim's
weights. Query-only: training on victim-assigned hard labels or on victim
posteriors. Every attack touches the victim only through forward passes,
except fine-tuning, which starts from a copy of the weights.
"""

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageDataset
from .models import ModelHandle, build_module
from .training import STEP_COUNTER


class AttackConfigError(ValueError):
    """Attack configuration violates its preconditions."""


class QueryBudgetError(RuntimeError):
    """The attack exhausted its allowed number of victim queries."""


ATTACK_IDS = ("distillation", "zero_shot", "fine_tune", "label_query", "logit_query")


@dataclass(frozen=True)
class AttackConfig:
    attack_id: str
    student_arch_id: str = "cnn-small"
    surrogate: ImageDataset = None
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.05
    temperature: float = 4.0
    hard_label_weight: float = 0.3  # distillation mix-in of true-label loss
    generator_steps: int = 300  # zero-shot budget (generator/student rounds)
    student_steps_per_round: int = 5  # zero-shot student updates per generator update
    query_budget: int = None
    seed: int = 0

    def __post_init__(self):
        if self.attack_id not in ATTACK_IDS:
            raise AttackConfigError(f"unknown attack_id {self.attack_id!r}")
        if self.attack_id == "zero_shot" and self.surrogate is not None:
            raise AttackConfigError("zero_shot is data-free; it must not receive a surrogate")
        if self.attack_id in ("distillation", "fine_tune", "label_query", "logit_query"):
            if self.surrogate is None:
                raise AttackConfigError(f"{self.attack_id} requires a surrogate dataset")
        if self.attack_id == "distillation" and self.temperature <= 0:
            raise AttackConfigError("temperature must be > 0 for distillation")

    def describe(self):
        d = asdict(self)
        d["surrogate"] = None if self.surrogate is None else {
            "name": self.surrogate.name,
            "size": len(self.surrogate),
        }
        return d


@dataclass(frozen=True)
class AttackChain:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise AttackConfigError("attack chain must have at least one stage")
        object.__setattr__(self, "stages", stages)


def _query_posteriors(victim: ModelHandle, pixels, budget_state, batch_size=256):
    """Victim softmax outputs for a pixel array, counted against the budget."""
    outs = []
    for i in range(0, pixels.shape[0], batch_size):
        chunk = pixels[i : i + batch_size]
        if budget_state is not None:
            budget_state["used"] += chunk.shape[0]
            if budget_state["budget"] is not None and budget_state["used"] > budget_state["budget"]:
                raise QueryBudgetError(
                    f"query budget {budget_state['budget']} exceeded "
                    f"({budget_state['used']} queries)"
                )
        outs.append(torch.softmax(victim.logits(chunk), dim=1))
    return torch.cat(outs)


def _student_train_loop(student, data_x, target_fn, cfg: AttackConfig, true_y=None):
    """Generic SGD loop over preloaded tensors; target_fn maps batch -> loss."""
    opt = torch.optim.SGD(
        student.parameters(), lr=cfg.learning_rate, momentum=0.9, weight_decay=5e-4
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    n = data_x.shape[0]
    student.train()
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = target_fn(student, idx)
            loss.backward()
            opt.step()
            STEP_COUNTER.bump()
    student.eval()


def distillation_soft_loss(student_logits, teacher_logits, temperature):
    """KL between temperature-softened posteriors; vanishes as T grows large."""
    return F.kl_div(
        F.log_softmax(student_logits / temperature, dim=1),
        F.softmax(teacher_logits / temperature, dim=1),
        reduction="batchmean",
    )


def steal_distillation(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    """Distill the victim on its own training data (dataset-accessible attack).

    Student loss mixes temperature-softened KL against the victim's
    posteriors with plain cross-entropy on the true labels.
    """
    if cfg.attack_id != "distillation":
        raise AttackConfigError(f"config is for {cfg.attack_id!r}")
    px, labels = cfg.surrogate.as_arrays()
    x = torch.from_numpy(px)
    y = torch.from_numpy(labels)
    budget = {"used": 0, "budget": cfg.query_budget}
    teacher_logits = []
    for i in range(0, px.shape[0], 256):
        chunk = px[i : i + 256]
        budget["used"] += chunk.shape[0]
        if budget["budget"] is not None and budget["used"] > budget["budget"]:
            raise QueryBudgetError(f"query budget {budget['budget']} exceeded")
        teacher_logits.append(victim.logits(chunk))
    teacher_logits = torch.cat(teacher_logits)

    student = build_module(cfg.student_arch_id, victim.class_count, seed=cfg.seed)
    temp = cfg.temperature
    w_hard = cfg.hard_label_weight

    def loss_fn(module, idx):
        logits = module(x[idx])
        soft = distillation_soft_loss(logits, teacher_logits[idx], temp)
        hard = F.cross_entropy(logits, y[idx])
        return (1.0 - w_hard) * soft + w_hard * hard

    _student_train_loop(student, x, loss_fn, cfg)
    return ModelHandle(
        cfg.student_arch_id,
        student,
        victim.class_count,
        train_manifest={"attack": cfg.describe(), "victim_hash": victim.content_hash(),
                        "queries": budget["used"]},
    )


class _Generator(nn.Module):
    """Small transposed-convolution image generator for data-free stealing."""

    def __init__(self, latent_dim=64, channels=3, hw=32):
        super().__init__()
        self.latent_dim = latent_dim
        start = hw // 4
        self.start = start
        self.fc = nn.Linear(latent_dim, 64 * start * start)
        self.net = nn.Sequential(
            nn.BatchNorm2d(64),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, channels, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], 64, self.start, self.start)
        return self.net(h)


def steal_zero_shot(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    """Data-free distillation: generator maximizes teacher/student disagreement,
    student minimizes it, alternating for cfg.generator_steps rounds.

    The generator objective also rewards confident and class-balanced teacher
    predictions, which keeps the synthetic batches covering all classes. The
    adversary holds the model here, so differentiating through the teacher is
    within this attack's permissions.
    """
    if cfg.attack_id != "zero_shot":
        raise AttackConfigError(f"config is for {cfg.attack_id!r}")
    hw = 32
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        generator = _Generator(hw=hw)
        gen_noise = torch.Generator().manual_seed(cfg.seed + 1)
    student = build_module(cfg.student_arch_id, victim.class_count, seed=cfg.seed)

    opt_s = torch.optim.SGD(student.parameters(), lr=cfg.learning_rate, momentum=0.9,
                            weight_decay=5e-4)
    opt_g = torch.optim.Adam(generator.parameters(), lr=1e-3)
    teacher = victim.module
    teacher.eval()

    # teacher-feature-statistics matching keeps the synthetic batches near the
    # real data manifold, without which the distilled function does not
    # transfer off the generator's support
    bn_terms = []

    def bn_hook(mod, inputs, output):
        x = inputs[0]
        mu = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        bn_terms.append(((mu - mod.running_mean) ** 2).sum()
                        + ((var - mod.running_var) ** 2).sum())

    hooks = [m.register_forward_hook(bn_hook) for m in teacher.modules()
             if isinstance(m, nn.BatchNorm2d)]
    used = 0
    for step in range(cfg.generator_steps):
        z = torch.randn(cfg.batch_size, generator.latent_dim, generator=gen_noise)

        # generator step: disagreement plus confident, class-balanced teacher
        # output on statistics-matched batches
        generator.train()
        student.eval()
        opt_g.zero_grad()
        bn_terms.clear()
        fake = generator(z)
        t_logits = teacher(fake)
        victim.query_count += fake.shape[0]
        stat_match = torch.stack(bn_terms).sum() if bn_terms else torch.zeros(())
        used += fake.shape[0]
        if cfg.query_budget is not None and used > cfg.query_budget:
            raise QueryBudgetError(f"query budget {cfg.query_budget} exceeded")
        s_logits = student(fake)
        posterior = F.softmax(t_logits, dim=1)
        mean_posterior = posterior.mean(dim=0)
        balance = -(mean_posterior * torch.log(mean_posterior + 1e-8)).sum()
        confidence = F.cross_entropy(t_logits, t_logits.argmax(dim=1))
        gen_loss = (-F.l1_loss(s_logits, t_logits.detach()) + confidence
                    - 5.0 * balance + 10.0 * stat_match)
        gen_loss.backward()
        opt_g.step()

        # student steps: match the teacher on fresh latent draws
        generator.eval()
        student.train()
        for _ in range(cfg.student_steps_per_round):
            z = torch.randn(cfg.batch_size, generator.latent_dim, generator=gen_noise)
            opt_s.zero_grad()
            with torch.no_grad():
                fake = generator(z)
                t_logits = victim.logits(fake)
            used += fake.shape[0]
            if cfg.query_budget is not None and used > cfg.query_budget:
                raise QueryBudgetError(f"query budget {cfg.query_budget} exceeded")
            s_logits = student(fake)
            stu_loss = F.l1_loss(s_logits, t_logits)
            stu_loss.backward()
            opt_s.step()
            STEP_COUNTER.bump()

    for h in hooks:
        h.remove()
    student.eval()
    return ModelHandle(
        cfg.student_arch_id,
        student,
        victim.class_count,
        train_manifest={"attack": cfg.describe(), "victim_hash": victim.content_hash(),
                        "queries": used},
    )


def steal_finetune(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    """Continue training a copy of the victim's weights on local data."""
    if cfg.attack_id != "fine_tune":
        raise AttackConfigError(f"config is for {cfg.attack_id!r}")
    if cfg.student_arch_id != victim.arch_id:
        raise AttackConfigError(
            f"fine_tune requires the victim architecture {victim.arch_id!r}, "
            f"got {cfg.student_arch_id!r}"
        )
    student_handle = victim.clone()
    if cfg.epochs == 0:
        student_handle.train_manifest = {
            "attack": cfg.describe(),
            "victim_hash": victim.content_hash(),
        }
        return student_handle
    student = student_handle.module
    px, labels = cfg.surrogate.as_arrays()
    x = torch.from_numpy(px)
    y = torch.from_numpy(labels)

    def loss_fn(module, idx):
        return F.cross_entropy(module(x[idx]), y[idx])

    _student_train_loop(student, x, loss_fn, cfg)
    return ModelHandle(
        victim.arch_id,
        student,
        victim.class_count,
        train_manifest={"attack": cfg.describe(), "victim_hash": victim.content_hash()},
    )


def steal_label_query(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    """Train a student on the victim's argmax labels for the surrogate set."""
    if cfg.attack_id != "label_query":
        raise AttackConfigError(f"config is for {cfg.attack_id!r}")
    px, _ = cfg.surrogate.as_arrays()
    budget = {"used": 0, "budget": cfg.query_budget}
    posteriors = _query_posteriors(victim, px, budget)
    pseudo = posteriors.argmax(dim=1)

    x = torch.from_numpy(px)
    student = build_module(cfg.student_arch_id, victim.class_count, seed=cfg.seed)

    def loss_fn(module, idx):
        return F.cross_entropy(module(x[idx]), pseudo[idx])

    _student_train_loop(student, x, loss_fn, cfg)
    return ModelHandle(
        cfg.student_arch_id,
        student,
        victim.class_count,
        train_manifest={"attack": cfg.describe(), "victim_hash": victim.content_hash(),
                        "queries": budget["used"]},
    )


def steal_logit_query(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    """Train a student to minimize KL(victim posterior || student posterior)."""
    if cfg.attack_id != "logit_query":
        raise AttackConfigError(f"config is for {cfg.attack_id!r}")
    px, _ = cfg.surrogate.as_arrays()
    budget = {"used": 0, "budget": cfg.query_budget}
    posteriors = _query_posteriors(victim, px, budget)

    x = torch.from_numpy(px)
    student = build_module(cfg.student_arch_id, victim.class_count, seed=cfg.seed)

    def loss_fn(module, idx):
        return F.kl_div(
            F.log_softmax(module(x[idx]), dim=1), posteriors[idx], reduction="batchmean"
        )

    _student_train_loop(student, x, loss_fn, cfg)
    return ModelHandle(
        cfg.student_arch_id,
        student,
        victim.class_count,
        train_manifest={"attack": cfg.describe(), "victim_hash": victim.content_hash(),
                        "queries": budget["used"]},
    )


_ATTACK_FNS = {
    "distillation": steal_distillation,
    "zero_shot": steal_zero_shot,
    "fine_tune": steal_finetune,
    "label_query": steal_label_query,
    "logit_query": steal_logit_query,
}


def run_attack(victim: ModelHandle, cfg: AttackConfig) -> ModelHandle:
    return _ATTACK_FNS[cfg.attack_id](victim, cfg)


def run_attack_chain(victim: ModelHandle, chain: AttackChain):
    """Run each stage against the previous stage's output; returns all stages."""
    outputs = []
    current = victim
    for i, cfg in enumerate(chain.stages):
        if cfg.attack_id == "fine_tune" and cfg.student_arch_id != current.arch_id:
            raise AttackConfigError(
                f"stage {i} (fine_tune): architecture {cfg.student_arch_id!r} "
                f"does not match stage victim {current.arch_id!r}"
            )
        try:
            current = run_attack(current, cfg)
        except Exception as exc:
            raise type(exc)(f"stage {i} ({cfg.attack_id}): {exc}") from exc
        outputs.append(current)
    return outputs
