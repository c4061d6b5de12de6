"""Corpus generation: mapping bijectivity, Zipf shape, framing, batching, IO."""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillab.errors import InvalidInputError
from distillab.synth_task import (
    BOS,
    EOS,
    FIRST_CONTENT,
    FWD,
    PAD,
    REV,
    SEP,
    Example,
    TaskSpec,
    batch_iterator,
    build_mapping,
    example_prompt,
    fingerprint,
    generate_corpus,
    read_corpus,
    serialize_example,
    write_corpus,
    zipf_probs,
)

SMALL = TaskSpec(train_size=200, valid_size=50, test_size=50)


@pytest.fixture(scope="module")
def default_corpus():
    return generate_corpus(TaskSpec())


def random_content_seq(rng, spec, length):
    return tuple(
        int(t) for t in rng.integers(FIRST_CONTENT, spec.vocab_size, size=length)
    )


# ---------------------------------------------------------------- mapping

def test_mapping_round_trip_both_ways():
    spec = TaskSpec()
    m = build_mapping(spec)
    rng = np.random.default_rng(7)
    for _ in range(200):
        seq = random_content_seq(rng, spec, int(rng.integers(1, 20)))
        assert m.inverse(m.forward(seq)) == seq
        assert m.forward(m.inverse(seq)) == seq


def test_mapping_preserves_length_and_alphabet():
    spec = TaskSpec()
    m = build_mapping(spec)
    rng = np.random.default_rng(8)
    for _ in range(50):
        seq = random_content_seq(rng, spec, int(rng.integers(1, 17)))
        out = m.forward(seq)
        assert len(out) == len(seq)
        assert all(FIRST_CONTENT <= t < spec.vocab_size for t in out)


def test_mapping_is_deterministic_and_seed_sensitive():
    seq = tuple(range(FIRST_CONTENT, FIRST_CONTENT + 8))
    a = build_mapping(TaskSpec(mapping_seed=3)).forward(seq)
    b = build_mapping(TaskSpec(mapping_seed=3)).forward(seq)
    c = build_mapping(TaskSpec(mapping_seed=4)).forward(seq)
    assert a == b
    assert a != c


def test_mapping_swap_depends_on_parity():
    # A pair is swapped exactly when either token is even, so full odd-odd
    # sequences keep positions while any even token forces its pair to move.
    spec = TaskSpec(mapping_seed=0)
    m = build_mapping(spec)
    odd = [t for t in range(FIRST_CONTENT, spec.vocab_size) if t % 2 == 1][:4]
    out = m.forward(tuple(odd))
    assert list(out) == [m._subst[t] for t in odd]


def test_mapping_rejects_special_tokens():
    m = build_mapping(TaskSpec())
    with pytest.raises(InvalidInputError):
        m.forward((BOS, FIRST_CONTENT))
    with pytest.raises(InvalidInputError):
        m.apply(PAD, (FIRST_CONTENT,))


@settings(max_examples=80, deadline=None)
@given(
    st.lists(
        st.integers(FIRST_CONTENT, TaskSpec().vocab_size - 1),
        min_size=1,
        max_size=24,
    )
)
def test_mapping_bijective_property(seq):
    m = build_mapping(TaskSpec())
    assert m.inverse(m.forward(tuple(seq))) == tuple(seq)


def test_mapping_distinct_inputs_distinct_outputs():
    spec = TaskSpec()
    m = build_mapping(spec)
    rng = np.random.default_rng(11)
    seqs = {random_content_seq(rng, spec, 6) for _ in range(500)}
    images = {m.forward(s) for s in seqs}
    assert len(images) == len(seqs)


# ---------------------------------------------------------------- corpus

def test_corpus_split_sizes(default_corpus):
    spec = default_corpus.spec
    assert len(default_corpus.train) == spec.train_size
    assert len(default_corpus.valid) == spec.valid_size
    assert len(default_corpus.test) == spec.test_size


def test_corpus_examples_well_formed(default_corpus):
    spec = default_corpus.spec
    m = build_mapping(spec)
    for split in (default_corpus.train, default_corpus.valid, default_corpus.test):
        for ex in split[:100]:
            assert ex.direction in (FWD, REV)
            assert spec.min_len <= len(ex.source) <= spec.max_len
            assert len(ex.target) == len(ex.source)
            assert ex.target == m.apply(ex.direction, ex.source)


def test_corpus_prompts_unique_across_splits(default_corpus):
    keys = [
        (ex.direction, ex.source)
        for split in (default_corpus.train, default_corpus.valid, default_corpus.test)
        for ex in split
    ]
    assert len(set(keys)) == len(keys)


def test_corpus_deterministic():
    a = generate_corpus(SMALL)
    b = generate_corpus(SMALL)
    assert a.train == b.train and a.valid == b.valid and a.test == b.test


def test_corpus_seed_changes_data():
    a = generate_corpus(SMALL)
    b = generate_corpus(TaskSpec(train_size=200, valid_size=50, test_size=50, seed=1))
    assert a.train != b.train


def test_corpus_both_directions_present(default_corpus):
    dirs = collections.Counter(ex.direction for ex in default_corpus.train)
    assert dirs[FWD] > 0.4 * len(default_corpus.train)
    assert dirs[REV] > 0.4 * len(default_corpus.train)


def test_corpus_impossible_dedupe_raises():
    # Two content tokens and length-1 sources admit only 4 distinct prompts.
    tiny = TaskSpec(
        vocab_size=FIRST_CONTENT + 2,
        min_len=1,
        max_len=1,
        train_size=10,
        valid_size=1,
        test_size=1,
    )
    with pytest.raises(InvalidInputError, match="distinct"):
        generate_corpus(tiny)


def test_zipf_probs_shape_and_mass():
    spec = TaskSpec()
    p = zipf_probs(spec)
    assert p.shape == (spec.n_content,)
    assert p[0] > p[1] > p[-1] > 0
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(p[1] / p[0], 2.0 ** -spec.zipf_exponent, atol=1e-12)


def test_train_sources_follow_zipf(default_corpus):
    spec = default_corpus.spec
    probs = zipf_probs(spec)
    counts = collections.Counter(
        t for ex in default_corpus.train for t in ex.source
    )
    total = sum(counts.values())
    for rank in range(20):
        token = FIRST_CONTENT + rank
        emp = counts[token] / total
        assert abs(emp - probs[rank]) / probs[rank] < 0.10, (rank, emp, probs[rank])


# ---------------------------------------------------------------- framing

def test_serialize_example_layout():
    ex = Example(FWD, (10, 11, 12), (20, 21, 22))
    row = serialize_example(ex)
    assert row == [BOS, FWD, 10, 11, 12, SEP, 20, 21, 22, EOS]
    assert example_prompt(ex) == [BOS, FWD, 10, 11, 12, SEP]
    assert len(row) == 2 * 3 + 4


def test_max_serialized_len_bound(default_corpus):
    spec = default_corpus.spec
    longest = max(
        len(serialize_example(ex))
        for ex in default_corpus.train
    )
    assert longest <= spec.max_serialized_len


def test_batches_cover_split_once():
    corpus = generate_corpus(SMALL)
    seen = []
    for batch in batch_iterator(corpus.train, 32, seed=5, epoch=0):
        assert batch.token_ids.shape == batch.loss_mask.shape
        for r in range(batch.token_ids.shape[0]):
            n = batch.lengths[r]
            seen.append(tuple(batch.token_ids[r, :n].tolist()))
    expected = [tuple(serialize_example(ex)) for ex in corpus.train]
    assert sorted(seen) == sorted(expected)
    assert len(seen) == len(expected)


def test_batch_mask_marks_targets_and_eos():
    corpus = generate_corpus(SMALL)
    batch = next(batch_iterator(corpus.train, 8, seed=0, epoch=0))
    ids, mask = batch.token_ids, batch.loss_mask
    for r in range(ids.shape[0]):
        n = int(batch.lengths[r])
        row = ids[r, :n].tolist()
        sep = row.index(SEP)
        expected = np.zeros(ids.shape[1], dtype=bool)
        expected[sep + 1:n] = True
        assert np.array_equal(mask[r], expected)
        assert row[n - 1] == EOS
        assert all(t == PAD for t in ids[r, n:].tolist())


def test_batch_shuffle_deterministic_and_epoch_varying():
    corpus = generate_corpus(SMALL)

    def first_rows(epoch):
        batch = next(batch_iterator(corpus.train, 16, seed=9, epoch=epoch))
        return batch.token_ids.tolist()

    assert first_rows(0) == first_rows(0)
    assert first_rows(0) != first_rows(1)


def test_batch_iterator_validates():
    corpus = generate_corpus(SMALL)
    with pytest.raises(InvalidInputError):
        next(batch_iterator(corpus.train, 0, seed=0, epoch=0))
    with pytest.raises(InvalidInputError):
        next(batch_iterator([], 4, seed=0, epoch=0))


# ---------------------------------------------------------------- file IO

def test_corpus_file_round_trip(tmp_path):
    corpus = generate_corpus(SMALL)
    write_corpus(corpus, tmp_path)
    loaded = read_corpus(tmp_path, SMALL)
    assert loaded.train == corpus.train
    assert loaded.valid == corpus.valid
    assert loaded.test == corpus.test
    header = (tmp_path / "train.txt").read_text().splitlines()[0]
    assert header == f"# taskspec {fingerprint(SMALL)}"


def test_read_corpus_rejects_wrong_spec(tmp_path):
    write_corpus(generate_corpus(SMALL), tmp_path)
    other = TaskSpec(train_size=200, valid_size=50, test_size=50, seed=99)
    with pytest.raises(InvalidInputError, match="fingerprint"):
        read_corpus(tmp_path, other)


def test_read_corpus_rejects_missing_or_malformed(tmp_path):
    with pytest.raises(InvalidInputError, match="missing"):
        read_corpus(tmp_path, SMALL)
    write_corpus(generate_corpus(SMALL), tmp_path)
    path = tmp_path / "valid.txt"
    path.write_text(f"# taskspec {fingerprint(SMALL)}\n4 10 11\n")
    with pytest.raises(InvalidInputError, match="malformed"):
        read_corpus(tmp_path, SMALL)


def test_fingerprint_tracks_every_field():
    base = fingerprint(TaskSpec())
    assert fingerprint(TaskSpec(seed=1)) != base
    assert fingerprint(TaskSpec(mapping_seed=1)) != base
    assert fingerprint(TaskSpec(max_len=15)) != base
    assert fingerprint(TaskSpec()) == base


# ------------------------------------------------------- learnability floor

def test_unigram_baseline_is_weak(default_corpus):
    """Positionwise token-to-token lookup cannot solve the task: the swap rule
    couples each output position to the neighboring input token."""
    table: dict[tuple, collections.Counter] = collections.defaultdict(
        collections.Counter
    )
    for ex in default_corpus.train:
        for s, t in zip(ex.source, ex.target):
            table[(ex.direction, s)][t] += 1
    mode = {k: c.most_common(1)[0][0] for k, c in table.items()}
    hits = 0
    total = 0
    for ex in default_corpus.test:
        for s, t in zip(ex.source, ex.target):
            total += 1
            hits += mode.get((ex.direction, s)) == t
    assert hits / total <= 0.50, hits / total
