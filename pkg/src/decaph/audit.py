"""Online likelihood-ratio membership-inference auditor.

The auditor replicates the target's training procedure: it trains many
shadow models on random halves of the pooled data, arranged so every example
is a member of exactly half the shadows. Per example, the shadow confidence
scores split into an in-distribution and an out-distribution sample; both
get a Gaussian fit, and the attack statistic for a target score x is

    log N(x; mu_in, sigma_in) - log N(x; mu_out, sigma_out).

Confidences are logit-scaled true-class probabilities, clamped to +/-30 so
saturated predictions stay finite. With few shadows the per-example variance
estimates are noisy; a pooled-variance variant shares one sigma per side
across all examples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetShard
from .metrics import auroc, roc_curve, tpr_at_fpr
from .models import ModelState, init_model, predict
from .numerics import Prng
from .protocol import ProtocolConfig, TrainResult, train

__all__ = [
    "LOGIT_CLAMP",
    "ShadowPlan",
    "AttackScore",
    "LiraFit",
    "AttackReport",
    "logit_confidence",
    "build_shadow_plan",
    "collect_confidences",
    "fit_lira",
    "attack",
    "roc",
    "run_lira_audit",
]

LOGIT_CLAMP = 30.0
SIGMA_FLOOR = 1e-3
FPR_GRID = (1e-3, 1e-2, 1e-1)


def logit_confidence(model: ModelState, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """ln(s / (1-s)) of the true-class score s, clamped to +/-LOGIT_CLAMP.

    Binary heads use p(y=1) or its complement; softmax heads use the true
    class's probability; margin heads are softmaxed into probabilities first.
    """
    scores = predict(model, features)
    labels = np.asarray(labels)
    if model.arch.head == "multi_margin":
        z = scores - np.max(scores, axis=1, keepdims=True)
        e = np.exp(z)
        scores = e / np.sum(e, axis=1, keepdims=True)
    if model.arch.head == "sigmoid_bce":
        p1 = scores[:, 0]
        s = np.where(labels.astype(np.int64) == 1, p1, 1.0 - p1)
    elif model.arch.head == "multilabel_bce":
        # mean true-class probability across the outputs
        y = labels.astype(np.float64)
        s = np.mean(np.where(y > 0, scores, 1.0 - scores), axis=1)
    else:
        s = scores[np.arange(len(labels)), labels.astype(np.int64)]
    s = np.clip(s, 1e-300, 1.0 - 1e-16)
    return np.clip(np.log(s) - np.log1p(-s), -LOGIT_CLAMP, LOGIT_CLAMP)


@dataclass(frozen=True)
class ShadowPlan:
    """Pooled examples plus the shadow membership design.

    member_mask is (n_examples, n_shadow); each row sums to exactly
    n_shadow/2 by construction. origin keeps each example's participant so
    shadow training can rebuild the cross-silo shards.
    """

    features: np.ndarray
    labels: np.ndarray
    origin: np.ndarray
    member_mask: np.ndarray
    trainer: ProtocolConfig
    normalized: bool = True

    @property
    def n_examples(self) -> int:
        return len(self.features)

    @property
    def n_shadow(self) -> int:
        return self.member_mask.shape[1]


@dataclass(frozen=True)
class AttackScore:
    example_id: int
    lira_statistic: float
    is_member: bool


@dataclass(frozen=True)
class LiraFit:
    mu_in: np.ndarray
    sigma_in: np.ndarray
    mu_out: np.ndarray
    sigma_out: np.ndarray


@dataclass(frozen=True)
class AttackReport:
    auroc: float
    tpr_at_fpr: dict[float, float]
    scores: list[AttackScore]
    roc_points: tuple[np.ndarray, np.ndarray]


def build_shadow_plan(
    shards: list[DatasetShard], n_shadow: int, trainer: ProtocolConfig, seed: int
) -> ShadowPlan:
    """Pool the shards and give every example exactly n_shadow/2 memberships."""
    if n_shadow < 4 or n_shadow % 2:
        raise ValueError("n_shadow must be an even number >= 4 (need >=2 fits per side)")
    features = np.concatenate([s.features for s in shards])
    labels = np.concatenate([s.labels for s in shards])
    origin = np.concatenate(
        [np.full(s.n_rows, s.participant_id, dtype=np.int64) for s in shards]
    )
    gen = Prng(seed).derive("shadow-mask").generator()
    n = len(features)
    mask = np.zeros((n, n_shadow), dtype=bool)
    half = n_shadow // 2
    for i in range(n):
        mask[i, gen.permutation(n_shadow)[:half]] = True
    return ShadowPlan(
        features, labels, origin, mask, trainer,
        normalized=all(s.normalized for s in shards),
    )


def _shards_from_mask(plan: ShadowPlan, member: np.ndarray) -> list[DatasetShard]:
    """Rebuild per-participant shards from the member subset, preserving origin."""
    shards = []
    for pid in np.unique(plan.origin):
        idx = np.flatnonzero(member & (plan.origin == pid))
        shards.append(
            DatasetShard(
                features=plan.features[idx],
                labels=plan.labels[idx],
                participant_id=int(pid),
                normalized=plan.normalized,
            )
        )
    return shards


def _train_on(plan: ShadowPlan, member: np.ndarray, run_seed: int, arch_model: ModelState) -> TrainResult:
    shards = _shards_from_mask(plan, member)
    cfg = replace(
        plan.trainer,
        seed=run_seed,
        leader_seed=run_seed,
        n_participants=len(shards),
    )
    model0 = init_model(
        arch_model.arch,
        Prng(run_seed),
        arch_model.learning_rate,
        arch_model.l2_weight_decay,
    )
    return train(cfg, shards, model0)


def collect_confidences(
    plan: ShadowPlan, reference_model: ModelState, seed: int
) -> np.ndarray:
    """(n_examples, n_shadow) matrix of logit confidences from trained shadows."""
    out = np.empty((plan.n_examples, plan.n_shadow))
    for m in range(plan.n_shadow):
        result = _train_on(
            plan, plan.member_mask[:, m], Prng(seed).derive("shadow", m).stream_id, reference_model
        )
        out[:, m] = logit_confidence(result.model, plan.features, plan.labels)
    return out


def fit_lira(
    plan: ShadowPlan, scores: np.ndarray, variance: str = "per_example"
) -> LiraFit:
    """Per-example Gaussian parameters of the in/out confidence populations.

    variance="global" pools one sigma per side across examples -- the
    small-shadow-count fallback.
    """
    if variance not in ("per_example", "global"):
        raise ValueError("variance must be 'per_example' or 'global'")
    if scores.shape != plan.member_mask.shape:
        raise ValueError("scores matrix must align with the membership mask")
    n_in = plan.member_mask.sum(axis=1)
    n_out = plan.n_shadow - n_in
    if np.any(n_in < 2) or np.any(n_out < 2):
        raise ValueError("every example needs at least 2 in-scores and 2 out-scores")

    mask = plan.member_mask
    mu_in = np.where(mask, scores, 0.0).sum(axis=1) / n_in
    mu_out = np.where(~mask, scores, 0.0).sum(axis=1) / n_out
    var_in = np.where(mask, (scores - mu_in[:, None]) ** 2, 0.0).sum(axis=1) / (n_in - 1)
    var_out = np.where(~mask, (scores - mu_out[:, None]) ** 2, 0.0).sum(axis=1) / (n_out - 1)
    sigma_in = np.sqrt(var_in)
    sigma_out = np.sqrt(var_out)
    if variance == "global":
        sigma_in = np.full_like(sigma_in, float(np.mean(sigma_in)))
        sigma_out = np.full_like(sigma_out, float(np.mean(sigma_out)))
    return LiraFit(
        mu_in=mu_in,
        sigma_in=np.maximum(sigma_in, SIGMA_FLOOR),
        mu_out=mu_out,
        sigma_out=np.maximum(sigma_out, SIGMA_FLOOR),
    )


def _norm_logpdf(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)


def attack(
    target_scores: np.ndarray, fits: LiraFit, is_member: np.ndarray
) -> list[AttackScore]:
    """Per-example log-likelihood-ratio statistics against the target."""
    x = np.asarray(target_scores, dtype=np.float64)
    if x.shape != fits.mu_in.shape:
        raise ValueError("target scores must cover every fitted example")
    stat = _norm_logpdf(x, fits.mu_in, fits.sigma_in) - _norm_logpdf(
        x, fits.mu_out, fits.sigma_out
    )
    return [
        AttackScore(example_id=i, lira_statistic=float(s), is_member=bool(m))
        for i, (s, m) in enumerate(zip(stat, is_member))
    ]


def roc(scores: list[AttackScore]) -> AttackReport:
    """ROC of the attack statistics against ground-truth membership."""
    stat = np.array([s.lira_statistic for s in scores])
    member = np.array([s.is_member for s in scores], dtype=np.int64)
    fpr, tpr, _ = roc_curve(stat, member)
    return AttackReport(
        auroc=auroc(stat, member),
        tpr_at_fpr=dict(zip(FPR_GRID, tpr_at_fpr(stat, member, list(FPR_GRID)))),
        scores=scores,
        roc_points=(fpr, tpr),
    )


def run_lira_audit(
    shards: list[DatasetShard],
    trainer: ProtocolConfig,
    reference_model: ModelState,
    n_shadow: int,
    seed: int,
    variance: str = "per_example",
) -> AttackReport:
    """Full audit: target on a random half, shadows, fits, attack, ROC."""
    plan = build_shadow_plan(shards, n_shadow, trainer, seed)
    gen = Prng(seed).derive("target-split").generator()
    member = np.zeros(plan.n_examples, dtype=bool)
    member[gen.permutation(plan.n_examples)[: plan.n_examples // 2]] = True

    target = _train_on(plan, member, Prng(seed).derive("target").stream_id, reference_model)
    target_scores = logit_confidence(target.model, plan.features, plan.labels)

    shadow_scores = collect_confidences(plan, reference_model, seed)
    fits = fit_lira(plan, shadow_scores, variance=variance)
    return roc(attack(target_scores, fits, member))
