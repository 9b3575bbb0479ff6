"""Ownership verification: paired one-sided t-test over meta-classifier scores.

For m sampled transformed images, each gives a (suspect score, benign score)
pair from the meta-classifier. The null hypothesis is that the suspect's
mean score does not exceed the benign model's; rejection at level alpha
declares the model stolen. The t tail probability is computed from the
regularized incomplete beta function, self-contained in double precision.
"""

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .signatures import extract_signature, mask_last_layers


# -- Student-t upper tail ----------------------------------------------------


def _betacf(a, b, x, max_iter=300, eps=3e-16):
    """Continued fraction for the incomplete beta (Lentz's method)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-300:
        d = 1e-300
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b), accurate to ~1e-14 for moderate a, b."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """P(T > t) for Student's t with df degrees of freedom (one-sided)."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    half = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return half if t >= 0 else 1.0 - half


def paired_t_test(scores_s, scores_b):
    """One-sided paired t-test of mean(scores_s - scores_b) > 0.

    Returns (t_stat, p_value). With zero sample deviation the convention is
    p = 0 if the mean difference is positive, else p = 1 (t becomes +/-inf
    or 0 accordingly).
    """
    s = np.asarray(scores_s, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if s.shape != b.shape or s.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {s.shape} vs {b.shape}")
    n = s.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = s - b
    d_mean = float(d.mean())
    s_d = float(d.std(ddof=1))
    if s_d == 0.0:
        if d_mean > 0:
            return float("inf"), 0.0
        if d_mean < 0:
            return float("-inf"), 1.0
        return 0.0, 1.0
    t_stat = d_mean / (s_d / math.sqrt(n))
    return t_stat, student_t_sf(t_stat, n - 1)


# -- Verification reports ----------------------------------------------------


@dataclass(frozen=True)
class VerificationReport:
    mu_s: float
    mu_b: float
    delta_mu: float
    t_stat: float
    p_value: float
    m: int
    alpha: float
    decision: str  # "stolen" | "not_stolen"
    sample_ids: tuple
    seed: int
    suspect_hash: str = ""
    benign_hash: str = ""
    attack_id: str = ""

    def __post_init__(self):
        if self.delta_mu != self.mu_s - self.mu_b:
            raise ValueError("delta_mu must equal mu_s - mu_b")
        if (self.decision == "stolen") != (self.p_value < self.alpha):
            raise ValueError("decision inconsistent with p-value and alpha")
        if len(self.sample_ids) != self.m:
            raise ValueError("sample_ids length must equal m")

    def to_dict(self):
        return {
            "mu_s": self.mu_s,
            "mu_b": self.mu_b,
            "delta_mu": self.delta_mu,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "m": self.m,
            "alpha": self.alpha,
            "decision": self.decision,
            "sample_ids": list(self.sample_ids),
            "seed": self.seed,
            "suspect_hash": self.suspect_hash,
            "benign_hash": self.benign_hash,
            "attack_id": self.attack_id,
        }

    def to_json(self):
        return json.dumps(self.to_dict())


CSV_COLUMNS = [
    "suspect_hash",
    "benign_hash",
    "attack_id",
    "m",
    "alpha",
    "mu_S",
    "mu_B",
    "delta_mu",
    "t",
    "p",
    "decision",
    "seed",
]


def report_csv_row(report: VerificationReport):
    return [
        report.suspect_hash,
        report.benign_hash,
        report.attack_id,
        str(report.m),
        repr(report.alpha),
        repr(report.mu_s),
        repr(report.mu_b),
        repr(report.delta_mu),
        repr(report.t_stat),
        repr(report.p_value),
        report.decision,
        str(report.seed),
    ]


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(report_csv_row(r))
    return buf.getvalue()


def verify_ownership(
    meta,
    suspect,
    benign,
    transformed_pool,
    m=10,
    alpha=0.01,
    seed=0,
    mode="sign",
    mask=None,
    hard_scores=False,
    attack_id="",
) -> VerificationReport:
    """Sample m pool images, score suspect vs benign, and test the hypothesis.

    Scores are meta-classifier posteriors by default; `hard_scores` switches
    to 0/1 indicators of the classifier's decision. Sampling is without
    replacement from the seeded generator, and the chosen sample ids are
    recorded in the report.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    if len(transformed_pool) < m:
        raise ValueError(f"pool has {len(transformed_pool)} items, need m={m}")
    if mask is None:
        mask = mask_last_layers(suspect)
    mask.validate_for(suspect)
    mask.validate_for(benign)

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(transformed_pool), size=m, replace=False))
    sample_ids = tuple(f"{transformed_pool.name}[{int(i)}]" for i in chosen)

    scores_s = []
    scores_b = []
    for i in chosen:
        item = transformed_pool[int(i)]
        sid = f"{transformed_pool.name}[{int(i)}]"
        sig_s = extract_signature(suspect, item, mode, mask, sid)
        sig_b = extract_signature(benign, item, mode, mask, sid)
        ps = meta.classify(sig_s)
        pb = meta.classify(sig_b)
        if hard_scores:
            ps = 1.0 if ps > 0.5 else 0.0
            pb = 1.0 if pb > 0.5 else 0.0
        scores_s.append(ps)
        scores_b.append(pb)

    t_stat, p_value = paired_t_test(scores_s, scores_b)
    mu_s = float(np.mean(scores_s))
    mu_b = float(np.mean(scores_b))
    return VerificationReport(
        mu_s=mu_s,
        mu_b=mu_b,
        delta_mu=mu_s - mu_b,
        t_stat=t_stat,
        p_value=p_value,
        m=int(m),
        alpha=float(alpha),
        decision="stolen" if p_value < alpha else "not_stolen",
        sample_ids=sample_ids,
        seed=int(seed),
        suspect_hash=suspect.content_hash(),
        benign_hash=benign.content_hash(),
        attack_id=attack_id,
    )


def sweep_verification(
    meta,
    suspect,
    benign,
    transformed_pool,
    m_values,
    alpha=0.01,
    seeds=(0,),
    mode="sign",
    mask=None,
    gamma_tag="",
    attack_id="",
):
    """Verification grid over m and seeds plus median-p trend rows for plotting.

    Returns (reports, summary) where summary has one row per m:
    {"m", "gamma_tag", "median_p", "median_delta_mu"}.
    """
    reports = {}
    for m in m_values:
        for seed in seeds:
            reports[(m, seed)] = verify_ownership(
                meta,
                suspect,
                benign,
                transformed_pool,
                m=m,
                alpha=alpha,
                seed=seed,
                mode=mode,
                mask=mask,
                attack_id=attack_id,
            )
    summary = []
    for m in m_values:
        ps = [reports[(m, seed)].p_value for seed in seeds]
        dmus = [reports[(m, seed)].delta_mu for seed in seeds]
        summary.append(
            {
                "m": m,
                "gamma_tag": gamma_tag,
                "median_p": float(np.median(ps)),
                "median_delta_mu": float(np.median(dmus)),
            }
        )
    return reports, summary
