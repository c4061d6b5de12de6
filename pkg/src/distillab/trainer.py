"""Training loops: teacher SFT, student SFT, and student distillation.

One shared loop drives every strategy so that reductions between objectives
(forward KD at lambda 0 versus plain SFT, for instance) hold bit-for-bit at
the parameter level. The teacher, when present, is read-only: its
probabilities are recomputed by teacher forcing on each ground-truth batch
and its arrays are never touched by the optimizer.

SFT runs return the checkpoint with the best validation BLEU (overfitting is
the failure mode there); distillation runs return the final checkpoint.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dist_math import kl_divergence, softmax
from .errors import InvalidInputError, TrainingDiverged
from .eval_metrics import (
    corpus_bleu,
    greedy_continuations,
    seq_exact_match,
    token_accuracy,
)
from .kd_losses import DistillConfig, TokenLossInput, beta_schedule, loss_for_strategy
from .seq_model import (
    ModelConfig,
    ModelParams,
    adam_init,
    adam_step,
    backward,
    forward,
    forward_with_cache,
    init_params,
)
from .synth_task import Corpus, batch_iterator, pack_batch

CHECKPOINT_POLICIES = ("best_on_valid", "final")

# Independent RNG streams derived from one experiment seed.
_SEED_ROLES = {"teacher": 1, "student": 2, "order": 3}


def role_seed(base_seed: int, role: str) -> int:
    if role not in _SEED_ROLES:
        raise InvalidInputError(f"role must be one of {tuple(_SEED_ROLES)}")
    return 1000 * base_seed + _SEED_ROLES[role]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    eval_every: int = 100
    seed: int = 0
    checkpoint_policy: str = "best_on_valid"

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not (self.lr > 0.0 and math.isfinite(self.lr)):
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise InvalidInputError(
                f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}"
            )
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise InvalidInputError(
                f"checkpoint_policy must be one of {CHECKPOINT_POLICIES}, "
                f"got {self.checkpoint_policy!r}"
            )


@dataclass(frozen=True)
class StepRecord:
    step: int  # 1-based optimizer step
    loss: float
    sft_term: float
    kl_term: float
    easy_term: float
    hard_term: float
    hard_fraction: float
    mean_difficulty: float
    beta_eff: float


@dataclass(frozen=True)
class EvalRecord:
    step: int  # evaluated after this optimizer step
    valid_bleu: float
    valid_token_acc: float


_CSV_COLUMNS = (
    "step", "eval", "loss", "sft_term", "kl_term", "easy_term", "hard_term",
    "hard_fraction", "mean_difficulty", "beta_eff", "valid_bleu",
    "valid_token_acc",
)


def _fmt(x: float) -> str:
    return "%.17g" % x


@dataclass
class RunMetrics:
    steps: list[StepRecord]
    evals: list[EvalRecord]

    def to_csv(self) -> str:
        """One row per step (eval=0) interleaved with eval rows (eval=1)."""
        rows = [(r.step, 0, r) for r in self.steps]
        rows += [(r.step, 1, r) for r in self.evals]
        rows.sort(key=lambda item: item[:2])
        lines = [",".join(_CSV_COLUMNS)]
        for step, is_eval, r in rows:
            if is_eval:
                cells = [str(step), "1"] + [""] * 8 + [
                    _fmt(r.valid_bleu), _fmt(r.valid_token_acc)]
            else:
                cells = [str(step), "0", _fmt(r.loss), _fmt(r.sft_term),
                         _fmt(r.kl_term), _fmt(r.easy_term), _fmt(r.hard_term),
                         _fmt(r.hard_fraction), _fmt(r.mean_difficulty),
                         _fmt(r.beta_eff), "", ""]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


@dataclass(frozen=True)
class EvalReport:
    bleu: float
    token_accuracy: float
    seq_exact_match: float
    mean_token_kl_to_teacher: float | None = None


def score_continuations(continuations, examples):
    """(bleu, token accuracy, exact match) of continuations vs gold targets."""
    refs = [ex.target for ex in examples]
    return (
        corpus_bleu(continuations, refs),
        token_accuracy(continuations, refs),
        seq_exact_match(continuations, refs),
    )


def evaluate(params: ModelParams, examples, teacher_params=None) -> EvalReport:
    """Greedy-decode the split and score against gold targets."""
    conts = greedy_continuations(params, examples)
    bleu, acc, exact = score_continuations(conts, examples)
    kl = None
    if teacher_params is not None:
        kl = mean_token_kl_to_teacher(params, teacher_params, examples)
    return EvalReport(bleu, acc, exact, kl)


def _shift(batch):
    """Next-token view: inputs predict the following position."""
    inputs = batch.token_ids[:, :-1]
    targets = batch.token_ids[:, 1:]
    mask = batch.loss_mask[:, 1:]
    return inputs, targets, mask


def mean_token_kl_to_teacher(
    student_params: ModelParams,
    teacher_params: ModelParams,
    examples,
    batch_size: int = 64,
) -> float:
    """Mean KL(teacher || student) over response positions, teacher-forced."""
    total = 0.0
    count = 0
    for start in range(0, len(examples), batch_size):
        batch = pack_batch(examples[start:start + batch_size])
        inputs, _, mask = _shift(batch)
        rows = mask.reshape(-1)
        q = softmax(forward(student_params, inputs)).reshape(rows.size, -1)[rows]
        p = softmax(forward(teacher_params, inputs)).reshape(rows.size, -1)[rows]
        total += float(np.atleast_1d(kl_divergence(p, q)).sum())
        count += int(rows.sum())
    return total / count


def _check_compat(model_config: ModelConfig, corpus: Corpus, teacher_params) -> None:
    if model_config.vocab_size != corpus.spec.vocab_size:
        raise InvalidInputError(
            f"model vocab {model_config.vocab_size} != task vocab "
            f"{corpus.spec.vocab_size}"
        )
    if model_config.max_seq_len < corpus.spec.max_serialized_len:
        raise InvalidInputError(
            f"max_seq_len {model_config.max_seq_len} cannot hold serialized "
            f"rows of length {corpus.spec.max_serialized_len}"
        )
    if teacher_params is not None:
        if teacher_params.config.vocab_size != model_config.vocab_size:
            raise InvalidInputError(
                "teacher and student must share one vocabulary, got "
                f"{teacher_params.config.vocab_size} vs {model_config.vocab_size}"
            )


def _effective_beta(strategy, config, step, total_steps) -> float:
    if strategy == "self_evolution":
        return beta_schedule(step, total_steps, config)
    if strategy in ("skew", "skew_teacher"):
        return config.beta
    return 1.0  # plain student distribution, no proxy mixing


def _train_loop(
    model_config: ModelConfig,
    corpus: Corpus,
    train_config: TrainConfig,
    strategy: str,
    distill_config: DistillConfig | None,
    teacher_params: ModelParams | None,
) -> tuple[ModelParams, ModelParams, RunMetrics]:
    """Returns (final params, best-on-valid params, metrics)."""
    _check_compat(model_config, corpus, teacher_params)
    params = init_params(model_config)
    state = adam_init(params)
    loss_fn = loss_for_strategy(strategy)
    per_epoch = math.ceil(len(corpus.train) / train_config.batch_size)
    total_steps = train_config.epochs * per_epoch
    warmup_steps = max(1, round(train_config.warmup_ratio * total_steps))
    steps: list[StepRecord] = []
    evals: list[EvalRecord] = []
    best_bleu = -1.0
    best_params = params.copy()
    step = 0
    for epoch in range(train_config.epochs):
        batches = batch_iterator(
            corpus.train, train_config.batch_size,
            seed=train_config.seed, epoch=epoch,
        )
        for batch in batches:
            inputs, targets, mask = _shift(batch)
            logits, cache = forward_with_cache(params, inputs)
            if not np.all(np.isfinite(logits)):
                raise TrainingDiverged(f"non-finite student logits at step {step + 1}")
            b, t, v = logits.shape
            teacher_probs = None
            if teacher_params is not None:
                teacher_probs = softmax(
                    forward(teacher_params, inputs)
                ).reshape(b * t, v)
            inp = TokenLossInput(
                logits.reshape(b * t, v),
                teacher_probs,
                targets.reshape(-1),
                mask.reshape(-1),
            )
            out = loss_fn(inp, distill_config, step, total_steps)
            if not math.isfinite(out.value):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}")
            grads = backward(params, inputs, out.grad_logits.reshape(b, t, v), cache)
            warm = min(1.0, (step + 1) / warmup_steps)
            params, state = adam_step(params, grads, state, train_config.lr, warm)
            beta_eff = _effective_beta(strategy, distill_config, step, total_steps)
            c = out.components
            steps.append(StepRecord(
                step + 1, out.value, c["sft_term"], c["kl_term"],
                c["easy_term"], c["hard_term"], out.hard_fraction,
                out.mean_difficulty, beta_eff,
            ))
            step += 1
            if step % train_config.eval_every == 0 or step == total_steps:
                report = evaluate(params, corpus.valid)
                evals.append(EvalRecord(step, report.bleu, report.token_accuracy))
                if report.bleu > best_bleu:
                    best_bleu = report.bleu
                    best_params = params.copy()
    return params, best_params, RunMetrics(steps, evals)


def train_sft(
    model_config: ModelConfig, corpus: Corpus, train_config: TrainConfig
) -> tuple[ModelParams, RunMetrics]:
    """Cross-entropy training; checkpoint chosen by train_config policy."""
    final, best, metrics = _train_loop(
        model_config, corpus, train_config, "sft", None, None)
    if train_config.checkpoint_policy == "best_on_valid":
        return best, metrics
    return final, metrics


def distill(
    student_config: ModelConfig,
    teacher_params: ModelParams,
    corpus: Corpus,
    train_config: TrainConfig,
    distill_config: DistillConfig,
) -> tuple[ModelParams, RunMetrics]:
    """Train a fresh student against the frozen teacher; returns the final
    checkpoint regardless of policy (distillation does not overfit the way
    SFT does, and the objective already carries the regularizer)."""
    if distill_config is None:
        raise InvalidInputError("distill requires a DistillConfig")
    final, _, metrics = _train_loop(
        student_config, corpus, train_config,
        distill_config.strategy, distill_config, teacher_params,
    )
    return final, metrics
