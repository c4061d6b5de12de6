"""Corpus-level metrics over token-id sequences.

BLEU is the classic corpus score: clipped 1..4-gram precisions combined by
geometric mean times a brevity penalty. Orders that contribute zero matches
are smoothed to 1/(2 * total) instead of collapsing the score to zero, and
orders with no n-grams at all (every hypothesis shorter than n) are dropped
from the mean.
"""

import collections
import math

from .errors import InvalidInputError
from .seq_model import ModelParams, decode_greedy_batch
from .synth_task import EOS, example_prompt

MAX_NGRAM_ORDER = 4


def _validate_aligned(hyps, refs) -> None:
    if len(hyps) != len(refs):
        raise InvalidInputError(
            f"corpora must align: {len(hyps)} hypotheses vs {len(refs)} references"
        )
    if not hyps:
        raise InvalidInputError("corpora must contain at least one pair")


def _ngrams(seq, n: int):
    return zip(*(seq[i:] for i in range(n)))


def corpus_bleu(hyps, refs) -> float:
    """Corpus BLEU in [0, 100] over aligned token-id sequences."""
    _validate_aligned(hyps, refs)
    matches = [0] * MAX_NGRAM_ORDER
    totals = [0] * MAX_NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_NGRAM_ORDER + 1):
            if len(hyp) < n:
                break
            ref_counts = collections.Counter(_ngrams(ref, n))
            for gram, count in collections.Counter(_ngrams(hyp, n)).items():
                matches[n - 1] += min(count, ref_counts[gram])
            totals[n - 1] += len(hyp) - n + 1
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    used = 0
    for match, total in zip(matches, totals):
        if total == 0:
            continue
        used += 1
        precision = match / total if match > 0 else 1.0 / (2.0 * total)
        log_sum += math.log(precision)
    if used == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / used)


def token_accuracy(hyps, refs) -> float:
    """Positionwise match rate; length mismatches count as misses."""
    _validate_aligned(hyps, refs)
    hits = 0
    positions = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        positions += max(len(hyp), len(ref))
        hits += sum(h == r for h, r in zip(hyp, ref))
    return hits / positions if positions else 1.0


def seq_exact_match(hyps, refs) -> float:
    _validate_aligned(hyps, refs)
    return sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(hyps)


def greedy_continuations(params: ModelParams, examples) -> list[tuple[int, ...]]:
    """Greedy-decode every example prompt; EOS is consumed, not returned."""
    if not examples:
        raise InvalidInputError("examples must be nonempty")
    prompts = [example_prompt(ex) for ex in examples]
    budget = max(len(ex.source) for ex in examples) + 1  # target plus EOS
    rows = decode_greedy_batch(params, prompts, max_new=budget, eos_id=EOS)
    return [tuple(row[len(p):]) for row, p in zip(rows, prompts)]


def teacher_agreement(student_params, teacher_params, examples) -> float:
    """BLEU of student generations against teacher generations on the same
    prompts. Direction matters: the teacher side is the reference."""
    student_out = greedy_continuations(student_params, examples)
    teacher_out = greedy_continuations(teacher_params, examples)
    return corpus_bleu(student_out, teacher_out)
