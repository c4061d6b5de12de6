import numpy as np
import pytest

from distillab.errors import InvalidInputError
from distillab.seq_model import (
    AdamState,
    ModelConfig,
    ModelParams,
    adam_init,
    adam_step,
    backward,
    decode_greedy,
    decode_greedy_batch,
    forward,
    forward_with_cache,
    init_params,
    load_checkpoint,
    num_params,
    save_checkpoint,
)
from helpers import rel_err

TINY = ModelConfig(vocab_size=5, d_model=4, n_layers=1, n_heads=2, d_ff=8,
                   max_seq_len=6, seed=0)


def tiny_params():
    return init_params(TINY)


class TestInit:
    def test_deterministic_for_fixed_seed(self):
        a = init_params(TINY)
        b = init_params(TINY)
        assert set(a.arrays) == set(b.arrays)
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k])

    def test_different_seed_differs(self):
        a = init_params(TINY)
        b = init_params(ModelConfig(**{**TINY.__dict__, "seed": 1}))
        assert not np.array_equal(a.arrays["tok_emb"], b.arrays["tok_emb"])

    def test_init_statistics(self):
        cfg = ModelConfig(vocab_size=64, d_model=64, n_layers=2, n_heads=2,
                          d_ff=128, max_seq_len=32, seed=3)
        p = init_params(cfg)
        w = p.arrays["layers.0.mlp.w1"]
        assert abs(w.mean()) < 0.005
        assert w.std() == pytest.approx(0.02, rel=0.15)
        assert np.all(p.arrays["layers.0.ln1.g"] == 1.0)
        assert np.all(p.arrays["layers.0.ln1.b"] == 0.0)
        assert np.all(p.arrays["ln_f.b"] == 0.0)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(InvalidInputError):
            ModelConfig(vocab_size=5, d_model=6, n_heads=4)

    def test_num_params(self):
        p = tiny_params()
        assert num_params(p) == sum(a.size for a in p.arrays.values())


class TestForward:
    def test_shape_and_dtype(self):
        p = tiny_params()
        logits = forward(p, np.array([[1, 2, 3], [4, 0, 1]]))
        assert logits.shape == (2, 3, 5)
        assert logits.dtype == np.float64
        assert np.all(np.isfinite(logits))

    def test_zeroed_output_projection_gives_zero_logits(self):
        p = tiny_params()
        p.arrays["out_proj"][:] = 0.0
        logits = forward(p, np.array([[1, 2, 3]]))
        assert np.all(logits == 0.0)

    def test_causality(self):
        p = tiny_params()
        toks = np.array([[1, 2, 3, 4, 0, 2]])
        base = forward(p, toks)
        mutated = toks.copy()
        mutated[0, 3] = 0
        other = forward(p, mutated)
        assert np.array_equal(base[:, :3], other[:, :3])
        assert not np.allclose(base[:, 3:], other[:, 3:])

    def test_deterministic(self):
        p = tiny_params()
        toks = np.array([[1, 2, 3]])
        assert np.array_equal(forward(p, toks), forward(p, toks))

    def test_rejects_bad_tokens(self):
        p = tiny_params()
        with pytest.raises(InvalidInputError):
            forward(p, np.array([[9]]))
        with pytest.raises(InvalidInputError):
            forward(p, np.array([1, 2]))  # not 2-D
        with pytest.raises(InvalidInputError):
            forward(p, np.array([[1.0, 2.0]]))
        with pytest.raises(InvalidInputError):
            forward(p, np.zeros((1, 7), dtype=np.int64))  # beyond max_seq_len


class TestBackward:
    def test_matches_finite_differences_per_parameter(self):
        rng = np.random.default_rng(50)
        p = tiny_params()
        toks = rng.integers(0, 5, size=(2, 4))
        g_out = rng.normal(size=(2, 4, 5))

        def objective(params):
            return float((forward(params, toks) * g_out).sum())

        grads = backward(p, toks, g_out)
        h = 1e-6
        for name, arr in p.arrays.items():
            fd = np.zeros_like(arr)
            flat, fdflat = arr.reshape(-1), fd.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = objective(p)
                flat[j] = orig - h
                fm = objective(p)
                flat[j] = orig
                fdflat[j] = (fp - fm) / (2 * h)
            assert rel_err(grads[name], fd) < 1e-6, name

    def test_cache_path_matches_recompute(self):
        rng = np.random.default_rng(51)
        p = tiny_params()
        toks = rng.integers(0, 5, size=(3, 4))
        g_out = rng.normal(size=(3, 4, 5))
        logits, cache = forward_with_cache(p, toks)
        a = backward(p, toks, g_out, cache)
        b = backward(p, toks, g_out)
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_rejects_bad_grad_shape(self):
        p = tiny_params()
        with pytest.raises(InvalidInputError):
            backward(p, np.array([[1, 2]]), np.zeros((1, 2, 4)))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        cfg = TINY
        params = ModelParams(cfg, {"w": np.array([1.0, -2.0, 3.0])})
        state = AdamState({"w": np.zeros(3)}, {"w": np.zeros(3)}, 0)
        g = np.array([0.5, -0.25, 1e-3])
        new, state2 = adam_step(params, {"w": g}, state, lr=0.1)
        update = new.arrays["w"] - params.arrays["w"]
        np.testing.assert_allclose(update, -0.1 * np.sign(g), rtol=1e-4)
        assert state2.t == 1

    def test_warmup_scales_update(self):
        params = ModelParams(TINY, {"w": np.array([1.0])})
        state = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)}, 0)
        g = {"w": np.array([2.0])}
        full, _ = adam_step(params, g, state, lr=0.1, warmup=1.0)
        half, _ = adam_step(params, g, state, lr=0.1, warmup=0.5)
        d_full = full.arrays["w"][0] - 1.0
        d_half = half.arrays["w"][0] - 1.0
        assert d_half == pytest.approx(0.5 * d_full)

    def test_immutability(self):
        p = tiny_params()
        state = adam_init(p)
        grads = {k: np.ones_like(v) for k, v in p.arrays.items()}
        before = {k: v.copy() for k, v in p.arrays.items()}
        adam_step(p, grads, state, lr=0.01)
        for k in before:
            assert np.array_equal(p.arrays[k], before[k])
        assert state.t == 0
        assert np.all(state.m["tok_emb"] == 0.0)

    def test_rejects_mismatched_keys(self):
        p = tiny_params()
        state = adam_init(p)
        with pytest.raises(InvalidInputError):
            adam_step(p, {"w": np.zeros(1)}, state, lr=0.1)


class TestDecode:
    def test_eos_peaked_model_gives_empty_continuation(self):
        p = tiny_params()
        p.arrays["out_proj"][:] = 0.0  # all-zero logits: argmax is token 0
        out = decode_greedy(p, [1, 2], max_new=4, eos_id=0)
        assert out == [1, 2]

    def test_tie_break_prefers_lowest_id(self):
        p = tiny_params()
        p.arrays["out_proj"][:] = 0.0
        out = decode_greedy(p, [1], max_new=3, eos_id=4)
        assert out == [1, 0, 0, 0]

    def test_max_new_zero_returns_prompt(self):
        p = tiny_params()
        assert decode_greedy(p, [2, 3], max_new=0, eos_id=0) == [2, 3]

    def test_deterministic(self):
        p = tiny_params()
        a = decode_greedy(p, [1, 2], max_new=4, eos_id=0)
        b = decode_greedy(p, [1, 2], max_new=4, eos_id=0)
        assert a == b

    def test_length_cap_enforced(self):
        p = tiny_params()
        with pytest.raises(InvalidInputError):
            decode_greedy(p, [1, 2, 3], max_new=4, eos_id=0)

    def test_batch_matches_single(self):
        p = init_params(ModelConfig(vocab_size=11, d_model=8, n_layers=2,
                                    n_heads=2, d_ff=16, max_seq_len=12, seed=7))
        rng = np.random.default_rng(52)
        prompts = [list(rng.integers(0, 11, size=rng.integers(1, 5)))
                   for _ in range(9)]
        batch = decode_greedy_batch(p, prompts, max_new=6, eos_id=0)
        single = [decode_greedy(p, pr, max_new=6, eos_id=0) for pr in prompts]
        assert batch == single


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        p = tiny_params()
        save_checkpoint(tmp_path / "ckpt", p)
        q = load_checkpoint(tmp_path / "ckpt")
        assert q.config == p.config
        for k in p.arrays:
            assert np.array_equal(q.arrays[k], p.arrays[k])

    def test_fingerprint_stable_across_runs(self, tmp_path):
        save_checkpoint(tmp_path / "a", init_params(TINY))
        save_checkpoint(tmp_path / "b", init_params(TINY))
        assert (tmp_path / "a" / "params.bin").read_bytes() == \
               (tmp_path / "b" / "params.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_text() == \
               (tmp_path / "b" / "manifest.json").read_text()

    def test_manifest_offsets_are_lexicographic_and_dense(self, tmp_path):
        import json
        p = tiny_params()
        save_checkpoint(tmp_path / "ckpt", p)
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        names = [e["name"] for e in manifest["params"]]
        assert names == sorted(names)
        offset = 0
        for e in manifest["params"]:
            assert e["offset"] == offset
            offset += e["nbytes"]
        assert manifest["total_bytes"] == offset
        assert (tmp_path / "ckpt" / "params.bin").stat().st_size == offset

    def test_truncated_blob_rejected(self, tmp_path):
        p = tiny_params()
        save_checkpoint(tmp_path / "ckpt", p)
        blob = (tmp_path / "ckpt" / "params.bin").read_bytes()
        (tmp_path / "ckpt" / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(InvalidInputError):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_checkpoint_rejected(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_checkpoint(tmp_path / "nope")
