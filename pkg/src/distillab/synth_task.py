"""Synthetic two-direction translation task over a small token vocabulary.

Sources are Zipf-distributed content tokens. Targets apply a seeded bijection:
a substitution over content ids composed with a swap of each adjacent
(non-overlapping) token pair in which either token has an even id. That swap
predicate is invariant under swapping, so the rule is an involution and the
composed mapping stays invertible. Each example carries a direction token:
FWD targets are mapping(source), REV targets are mapping^-1(source).

Sequences are serialized as BOS, direction, source, SEP, target, EOS and the
loss mask is true strictly after SEP through EOS.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

PAD = 0
BOS = 1
SEP = 2
EOS = 3
FWD = 4
REV = 5
FIRST_CONTENT = 6

_SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 128
    zipf_exponent: float = 1.1
    min_len: int = 4
    max_len: int = 16
    train_size: int = 10000
    valid_size: int = 500
    test_size: int = 1000
    seed: int = 0
    mapping_seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < FIRST_CONTENT + 2:
            raise InvalidInputError(
                f"vocab_size must be >= {FIRST_CONTENT + 2} "
                "(six specials plus at least two content tokens)"
            )
        if not (1 <= self.min_len <= self.max_len):
            raise InvalidInputError("need 1 <= min_len <= max_len")
        if self.zipf_exponent <= 0.0:
            raise InvalidInputError("zipf_exponent must be positive")
        for name in ("train_size", "valid_size", "test_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")

    @property
    def n_content(self) -> int:
        return self.vocab_size - FIRST_CONTENT

    @property
    def max_serialized_len(self) -> int:
        # BOS + direction + source + SEP + target + EOS
        return 2 * self.max_len + 4


def fingerprint(spec: TaskSpec) -> str:
    """Stable hex digest of the full task specification."""
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def zipf_probs(spec: TaskSpec) -> np.ndarray:
    """Sampling weights over content ids: rank r gets (r+1)^-exponent."""
    ranks = np.arange(1, spec.n_content + 1, dtype=np.float64)
    w = ranks ** -spec.zipf_exponent
    return w / w.sum()


@dataclass(frozen=True)
class Example:
    direction: int  # FWD or REV
    source: tuple[int, ...]
    target: tuple[int, ...]


class Mapping:
    """Invertible map on content-token sequences (substitution, then swaps)."""

    def __init__(self, spec: TaskSpec):
        rng = np.random.default_rng(spec.mapping_seed)
        ids = np.arange(FIRST_CONTENT, spec.vocab_size)
        self._lo = FIRST_CONTENT
        self._hi = spec.vocab_size
        self._subst = dict(zip(ids.tolist(), rng.permutation(ids).tolist()))
        self._inv_subst = {v: k for k, v in self._subst.items()}

    def _check(self, seq) -> list[int]:
        out = [int(t) for t in seq]
        if any(t < self._lo or t >= self._hi for t in out):
            raise InvalidInputError("sequence contains non-content tokens")
        return out

    @staticmethod
    def _swap_pairs(seq: list[int]) -> None:
        for i in range(0, len(seq) - 1, 2):
            a, b = seq[i], seq[i + 1]
            if a % 2 == 0 or b % 2 == 0:
                seq[i], seq[i + 1] = b, a

    def forward(self, seq) -> tuple[int, ...]:
        out = [self._subst[t] for t in self._check(seq)]
        self._swap_pairs(out)
        return tuple(out)

    def inverse(self, seq) -> tuple[int, ...]:
        out = self._check(seq)
        self._swap_pairs(out)
        return tuple(self._inv_subst[t] for t in out)

    def apply(self, direction: int, seq) -> tuple[int, ...]:
        if direction == FWD:
            return self.forward(seq)
        if direction == REV:
            return self.inverse(seq)
        raise InvalidInputError(f"direction must be FWD or REV, got {direction}")


def build_mapping(spec: TaskSpec) -> Mapping:
    return Mapping(spec)


@dataclass
class Corpus:
    spec: TaskSpec
    train: list[Example]
    valid: list[Example]
    test: list[Example]

    def split(self, name: str) -> list[Example]:
        if name not in _SPLIT_NAMES:
            raise InvalidInputError(f"split must be one of {_SPLIT_NAMES}")
        return getattr(self, name)


def generate_corpus(spec: TaskSpec) -> Corpus:
    """Sample the three splits; (direction, source) keys never repeat anywhere."""
    mapping = build_mapping(spec)
    ids = np.arange(FIRST_CONTENT, spec.vocab_size)
    probs = zipf_probs(spec)
    seen: set[tuple] = set()
    splits: list[list[Example]] = []
    for split_idx, size in enumerate(
        (spec.train_size, spec.valid_size, spec.test_size)
    ):
        rng = np.random.default_rng([spec.seed, split_idx])
        examples: list[Example] = []
        attempts = 0
        cap = 50 * size + 1000
        while len(examples) < size:
            attempts += 1
            if attempts > cap:
                raise InvalidInputError(
                    "cannot sample enough distinct examples; "
                    "task space too small for the requested split sizes"
                )
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = tuple(int(t) for t in rng.choice(ids, size=length, p=probs))
            direction = FWD if int(rng.integers(2)) == 0 else REV
            key = (direction, src)
            if key in seen:
                continue
            seen.add(key)
            examples.append(Example(direction, src, mapping.apply(direction, src)))
        splits.append(examples)
    return Corpus(spec, *splits)


def serialize_example(ex: Example) -> list[int]:
    return [BOS, ex.direction, *ex.source, SEP, *ex.target, EOS]


def example_prompt(ex: Example) -> list[int]:
    return [BOS, ex.direction, *ex.source, SEP]


@dataclass
class TokenBatch:
    """Padded serialized rows with a mask over response positions."""

    token_ids: np.ndarray  # (B, L) int64, PAD on the right
    loss_mask: np.ndarray  # (B, L) bool, True after SEP through EOS
    lengths: np.ndarray  # (B,) true row lengths


def pack_batch(examples) -> TokenBatch:
    """Serialize and right-pad the given examples, in order."""
    if not examples:
        raise InvalidInputError("examples must be nonempty")
    rows = [serialize_example(ex) for ex in examples]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for r, (ex, row) in enumerate(zip(examples, rows)):
        ids[r, :len(row)] = row
        sep = 2 + len(ex.source)
        mask[r, sep + 1:len(row)] = True  # targets plus EOS
    return TokenBatch(ids, mask, lengths)


def batch_iterator(examples, batch_size: int, seed: int, epoch: int):
    """Deterministically shuffled batches covering the split exactly once."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    if not examples:
        raise InvalidInputError("examples must be nonempty")
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield pack_batch([examples[i] for i in chunk])


def write_corpus(corpus: Corpus, directory) -> None:
    """One text file per split: header with the task fingerprint, then
    space-separated decimal ids, source (direction first) TAB target."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    header = f"# taskspec {fingerprint(corpus.spec)}\n"
    for name in _SPLIT_NAMES:
        lines = [header]
        for ex in corpus.split(name):
            src = " ".join(str(t) for t in (ex.direction, *ex.source))
            tgt = " ".join(str(t) for t in ex.target)
            lines.append(f"{src}\t{tgt}\n")
        (out / f"{name}.txt").write_text("".join(lines))


def read_corpus(directory, spec: TaskSpec) -> Corpus:
    """Load splits written by write_corpus, checking the fingerprint."""
    src_dir = Path(directory)
    expected = fingerprint(spec)
    splits: list[list[Example]] = []
    for name in _SPLIT_NAMES:
        path = src_dir / f"{name}.txt"
        if not path.exists():
            raise InvalidInputError(f"missing corpus file {path}")
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("# taskspec "):
            raise InvalidInputError(f"{path} lacks a task fingerprint header")
        got = lines[0].removeprefix("# taskspec ").strip()
        if got != expected:
            raise InvalidInputError(
                f"fingerprint mismatch in {path}: corpus {got[:12]}.. vs "
                f"config {expected[:12]}.."
            )
        examples = []
        for ln, line in enumerate(lines[1:], start=2):
            try:
                src_field, tgt_field = line.split("\t")
                src_ids = [int(t) for t in src_field.split()]
                tgt = tuple(int(t) for t in tgt_field.split())
            except ValueError as e:
                raise InvalidInputError(f"{path}:{ln}: malformed line") from e
            if not src_ids or src_ids[0] not in (FWD, REV):
                raise InvalidInputError(
                    f"{path}:{ln}: source must start with a direction token")
            examples.append(Example(src_ids[0], tuple(src_ids[1:]), tgt))
        splits.append(examples)
    return Corpus(spec, *splits)
