"""Distillation objectives over a batch of next-token prediction rows.

Each loss consumes student logits, frozen teacher probabilities, gold target
ids and a boolean mask selecting the rows that count (response positions).
It returns the scalar objective averaged over the masked-in rows, the
gradient with respect to every student logit (zero at masked-out rows), and
difficulty diagnostics.

Strategies
----------
sft             cross-entropy against the gold token only
forward         (1-lam)*sft + lam*KL(teacher || student)
reverse         (1-lam)*sft + lam*KL(student || teacher)
noevo           KL(y_tilde || student) on every row
skew            KL(y_tilde || beta*student + (1-beta)*y_tilde) on every row
skew_teacher    (1-lam)*sft + lam*KL(teacher || beta*student + (1-beta)*teacher)
self_evolution  rows are split by difficulty; hard rows get the skewed proxy,
                easy rows the plain KL, averaged together

where y_tilde = (1-lam)*one_hot(target) + lam*teacher is the mixed target and
difficulty d_i = KL(y_tilde_i || student_i), computed fresh each call and
treated as a constant (no gradient flows through the classification).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dist_math import (
    kl_divergence,
    kl_grad_wrt_student_logits,
    log_softmax,
    mix,
    one_hot,
    reverse_kl_grad_wrt_student_logits,
    softmax,
)
from .errors import InvalidInputError

DISTILL_STRATEGIES = (
    "forward",
    "reverse",
    "noevo",
    "skew",
    "skew_teacher",
    "self_evolution",
)
ALL_STRATEGIES = ("sft",) + DISTILL_STRATEGIES

SELECTIONS = ("threshold", "topk")
SCHEDULES = ("static", "linear")


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters for a distillation run.

    lam weighs distillation against gold supervision, beta is the skew mixing
    weight, gamma the difficulty threshold (may be inf). selection picks how
    hard tokens are chosen: by threshold on difficulty or as the top k_percent
    per batch. beta_schedule "linear" anneals beta from beta_begin to beta_end
    over training; "static" uses beta throughout.
    """

    strategy: str = "self_evolution"
    lam: float = 0.5
    beta: float = 0.5
    gamma: float = 0.4
    selection: str = "threshold"
    k_percent: float = 30.0
    beta_schedule: str = "static"
    beta_begin: float = 0.5
    beta_end: float = 0.0

    def __post_init__(self) -> None:
        if self.strategy not in DISTILL_STRATEGIES:
            raise InvalidInputError(
                f"strategy must be one of {DISTILL_STRATEGIES}, got {self.strategy!r}"
            )
        if not (0.0 <= self.lam <= 1.0):
            raise InvalidInputError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("beta", "beta_begin", "beta_end"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if math.isnan(self.gamma) or self.gamma < 0.0:
            raise InvalidInputError(f"gamma must be >= 0 (inf allowed), got {self.gamma}")
        if self.selection not in SELECTIONS:
            raise InvalidInputError(
                f"selection must be one of {SELECTIONS}, got {self.selection!r}"
            )
        if not (0.0 < self.k_percent <= 100.0):
            raise InvalidInputError(
                f"k_percent must lie in (0, 100], got {self.k_percent}"
            )
        if self.beta_schedule not in SCHEDULES:
            raise InvalidInputError(
                f"beta_schedule must be one of {SCHEDULES}, got {self.beta_schedule!r}"
            )


@dataclass
class TokenLossInput:
    """One flattened batch of prediction rows.

    student_logits: (N, V) float64. teacher_probs: (N, V) rows summing to 1,
    or None for the sft loss. target_ids: (N,) ints in [0, V). loss_mask:
    (N,) bools, True at rows that enter the loss; at least one must be True.
    """

    student_logits: np.ndarray
    teacher_probs: np.ndarray | None
    target_ids: np.ndarray
    loss_mask: np.ndarray


@dataclass
class LossOutput:
    """Loss value, logit gradient, and difficulty diagnostics.

    grad_logits matches student_logits in shape and is zero at masked-out
    rows. per_token_difficulty holds one entry per masked-in row, in row
    order. hard_fraction is the share of masked-in rows treated as hard:
    the classified fraction for self_evolution, 1.0 for skew/skew_teacher
    (every row gets the mixed proxy), 0.0 otherwise.

    components always carries the four keys sft_term, kl_term, easy_term
    and hard_term; their sum reconstructs value (zeros where a term does
    not apply to the strategy).
    """

    value: float
    grad_logits: np.ndarray
    hard_fraction: float
    mean_difficulty: float
    per_token_difficulty: np.ndarray
    components: dict[str, float] = field(default_factory=dict)


def _prepare(inp: TokenLossInput, need_teacher: bool):
    z = np.asarray(inp.student_logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise InvalidInputError("student_logits must be (N, V) with V >= 2")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("student_logits contains non-finite values")
    n, v = z.shape
    ids = np.asarray(inp.target_ids)
    if ids.shape != (n,) or not np.issubdtype(ids.dtype, np.integer):
        raise InvalidInputError("target_ids must be (N,) integers")
    if np.any(ids < 0) or np.any(ids >= v):
        raise InvalidInputError("target_ids out of vocabulary range")
    mask = np.asarray(inp.loss_mask)
    if mask.shape != (n,) or mask.dtype != np.bool_:
        raise InvalidInputError("loss_mask must be (N,) booleans")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise InvalidInputError("loss_mask selects no rows")
    probs = None
    if need_teacher:
        if inp.teacher_probs is None:
            raise InvalidInputError("teacher_probs is required for this strategy")
        p = np.asarray(inp.teacher_probs, dtype=np.float64)
        if p.shape != z.shape:
            raise InvalidInputError("teacher_probs must match student_logits shape")
        probs = p[idx]
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
            raise InvalidInputError("teacher_probs rows must be distributions")
        if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
            raise InvalidInputError("teacher_probs rows must sum to 1")
    return idx, z[idx], ids[idx], probs


_TERM_KEYS = ("sft_term", "kl_term", "easy_term", "hard_term")


def _finish(
    inp: TokenLossInput,
    idx: np.ndarray,
    value: float,
    grad_rows: np.ndarray,
    hard_fraction: float,
    difficulties: np.ndarray,
    **terms: float,
) -> LossOutput:
    grad = np.zeros(np.asarray(inp.student_logits).shape, dtype=np.float64)
    grad[idx] = grad_rows / idx.size
    components = {k: float(terms.get(k, 0.0)) for k in _TERM_KEYS}
    return LossOutput(
        value=float(value),
        grad_logits=grad,
        hard_fraction=float(hard_fraction),
        mean_difficulty=float(difficulties.mean()),
        per_token_difficulty=difficulties,
        components=components,
    )


def _sft_core(z: np.ndarray, ids: np.ndarray):
    logq = log_softmax(z)
    rows = np.arange(ids.size)
    nll = -logq[rows, ids]
    grad = np.exp(logq)
    grad[rows, ids] -= 1.0
    return nll, grad


def target_distribution(teacher_probs, target_ids, lam: float) -> np.ndarray:
    """Mixed target y_tilde = (1-lam)*one_hot(target) + lam*teacher."""
    p = np.asarray(teacher_probs, dtype=np.float64)
    return mix(p, one_hot(target_ids, p.shape[-1]), lam)


def token_difficulties(target_dist, student_logits) -> np.ndarray:
    """Per-row difficulty d_i = KL(y_tilde_i || softmax(z_i))."""
    return np.atleast_1d(kl_divergence(target_dist, softmax(student_logits)))


def classify_tokens(difficulties, config: DistillConfig) -> np.ndarray:
    """Boolean hard-row mask, by threshold (d > gamma, strict) or top-k percent.

    Top-k takes ceil(k_percent/100 * N) rows with the largest difficulty,
    breaking ties toward lower row indices.
    """
    d = np.asarray(difficulties, dtype=np.float64)
    if d.ndim != 1:
        raise InvalidInputError("difficulties must be a vector")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("difficulties contain non-finite values")
    if config.selection == "threshold":
        return d > config.gamma
    n_hard = math.ceil(config.k_percent / 100.0 * d.size)
    order = np.argsort(-d, kind="stable")
    hard = np.zeros(d.size, dtype=bool)
    hard[order[:n_hard]] = True
    return hard


def beta_schedule(step: int, total_steps: int, config: DistillConfig) -> float:
    """Effective beta at a training step; linear anneal or constant."""
    if total_steps < 1:
        raise InvalidInputError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise InvalidInputError(
            f"step {step} outside [0, total_steps={total_steps}]"
        )
    if config.beta_schedule == "static":
        return config.beta
    frac = step / total_steps
    return config.beta_begin + (config.beta_end - config.beta_begin) * frac


def sft_loss(inp: TokenLossInput, config: DistillConfig | None = None) -> LossOutput:
    """Mean negative log-likelihood of the gold tokens."""
    idx, z, ids, _ = _prepare(inp, need_teacher=False)
    nll, grad = _sft_core(z, ids)
    value = nll.mean()
    return _finish(inp, idx, value, grad, 0.0, nll, sft_term=value)


def forward_kd_loss(inp: TokenLossInput, config: DistillConfig) -> LossOutput:
    """(1-lam)*sft + lam*KL(teacher || student)."""
    idx, z, ids, p = _prepare(inp, need_teacher=True)
    lam = config.lam
    nll, g_sft = _sft_core(z, ids)
    v_kl, g_kl = kl_grad_wrt_student_logits(p, z, 1.0)
    sft_term = (1.0 - lam) * nll.mean()
    kl_term = lam * np.atleast_1d(v_kl).mean()
    grad = (1.0 - lam) * g_sft + lam * g_kl
    d = token_difficulties(target_distribution(p, ids, lam), z)
    return _finish(inp, idx, sft_term + kl_term, grad, 0.0, d,
                   sft_term=sft_term, kl_term=kl_term)


def reverse_kd_loss(inp: TokenLossInput, config: DistillConfig) -> LossOutput:
    """(1-lam)*sft + lam*KL(student || teacher)."""
    idx, z, ids, p = _prepare(inp, need_teacher=True)
    lam = config.lam
    nll, g_sft = _sft_core(z, ids)
    v_kl, g_kl = reverse_kl_grad_wrt_student_logits(p, z)
    sft_term = (1.0 - lam) * nll.mean()
    kl_term = lam * np.atleast_1d(v_kl).mean()
    grad = (1.0 - lam) * g_sft + lam * g_kl
    d = token_difficulties(target_distribution(p, ids, lam), z)
    return _finish(inp, idx, sft_term + kl_term, grad, 0.0, d,
                   sft_term=sft_term, kl_term=kl_term)


def skew_teacher_loss(inp: TokenLossInput, config: DistillConfig) -> LossOutput:
    """(1-lam)*sft + lam*KL(teacher || beta*student + (1-beta)*teacher)."""
    idx, z, ids, p = _prepare(inp, need_teacher=True)
    lam = config.lam
    nll, g_sft = _sft_core(z, ids)
    v_kl, g_kl = kl_grad_wrt_student_logits(p, z, config.beta)
    sft_term = (1.0 - lam) * nll.mean()
    kl_term = lam * np.atleast_1d(v_kl).mean()
    grad = (1.0 - lam) * g_sft + lam * g_kl
    d = token_difficulties(target_distribution(p, ids, lam), z)
    return _finish(inp, idx, sft_term + kl_term, grad, 1.0, d,
                   sft_term=sft_term, kl_term=kl_term)


def _evolution(
    inp: TokenLossInput,
    config: DistillConfig,
    hard: np.ndarray | None,
    beta_eff: float,
    hard_fraction: float | None = None,
) -> LossOutput:
    """Shared kernel for noevo/skew/self_evolution.

    hard=None means classify by difficulty; otherwise it is the fixed hard
    mask (all-False for noevo, all-True for skew). Hard rows use the
    beta_eff-skewed proxy, easy rows plain KL against y_tilde; the sums are
    averaged over all masked-in rows together.
    """
    idx, z, ids, p = _prepare(inp, need_teacher=True)
    tilde = target_distribution(p, ids, config.lam)
    d = token_difficulties(tilde, z)
    if hard is None:
        hard = classify_tokens(d, config)
    easy = ~hard
    v_e, g_e = kl_grad_wrt_student_logits(tilde[easy], z[easy], 1.0)
    v_h, g_h = kl_grad_wrt_student_logits(tilde[hard], z[hard], beta_eff)
    easy_term = np.atleast_1d(v_e).sum() / idx.size
    hard_term = np.atleast_1d(v_h).sum() / idx.size
    grad = np.empty_like(z)
    grad[easy] = g_e
    grad[hard] = g_h
    hf = float(hard.mean()) if hard_fraction is None else hard_fraction
    return _finish(inp, idx, easy_term + hard_term, grad, hf, d,
                   easy_term=easy_term, hard_term=hard_term)


def noevo_loss(inp: TokenLossInput, config: DistillConfig) -> LossOutput:
    """KL(y_tilde || student) on every masked-in row."""
    n = int(np.asarray(inp.loss_mask).sum())
    return _evolution(inp, config, np.zeros(n, dtype=bool), 1.0, hard_fraction=0.0)


def skew_loss(inp: TokenLossInput, config: DistillConfig) -> LossOutput:
    """KL(y_tilde || beta*student + (1-beta)*y_tilde) on every masked-in row."""
    n = int(np.asarray(inp.loss_mask).sum())
    return _evolution(inp, config, np.ones(n, dtype=bool), config.beta, hard_fraction=1.0)


def self_evolution_loss(
    inp: TokenLossInput, config: DistillConfig, step: int, total_steps: int
) -> LossOutput:
    """Difficulty-classified mix: skewed proxy for hard rows, plain KL for easy."""
    beta_eff = beta_schedule(step, total_steps, config)
    return _evolution(inp, config, None, beta_eff)


def loss_for_strategy(strategy: str):
    """Uniform-signature loss callable f(inp, config, step, total_steps)."""
    if strategy not in ALL_STRATEGIES:
        raise InvalidInputError(
            f"strategy must be one of {ALL_STRATEGIES}, got {strategy!r}"
        )
    if strategy == "self_evolution":
        return self_evolution_loss
    fixed = {
        "sft": sft_loss,
        "forward": forward_kd_loss,
        "reverse": reverse_kd_loss,
        "noevo": noevo_loss,
        "skew": skew_loss,
        "skew_teacher": skew_teacher_loss,
    }[strategy]

    def fn(inp, config, step, total_steps):
        return fixed(inp, config)

    return fn
