"""Decoder-only transformer in plain numpy with hand-written backprop.

Pre-norm blocks, learned absolute positions, untied output projection, no
biases on the linear maps (layer norms carry gain and bias). Everything is
float64 and fully deterministic for a fixed seed, so whole training runs are
bit-reproducible and gradients can be checked against finite differences.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_STD = 0.02

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

CHECKPOINT_FORMAT = "distillab-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_seq_len: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                     "max_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass
class ModelParams:
    """Named parameter arrays plus the config that shapes them."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: ModelConfig) -> ModelParams:
    """Fresh parameters: weights ~ N(0, 0.02), norm gains 1, biases 0."""
    rng = np.random.default_rng(config.seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    arrays: dict[str, np.ndarray] = {}
    arrays["tok_emb"] = w(v, d)
    arrays["pos_emb"] = w(config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"layers.{i}"
        arrays[f"{p}.ln1.g"] = np.ones(d)
        arrays[f"{p}.ln1.b"] = np.zeros(d)
        arrays[f"{p}.attn.wq"] = w(d, d)
        arrays[f"{p}.attn.wk"] = w(d, d)
        arrays[f"{p}.attn.wv"] = w(d, d)
        arrays[f"{p}.attn.wo"] = w(d, d)
        arrays[f"{p}.ln2.g"] = np.ones(d)
        arrays[f"{p}.ln2.b"] = np.zeros(d)
        arrays[f"{p}.mlp.w1"] = w(d, ff)
        arrays[f"{p}.mlp.w2"] = w(ff, d)
    arrays["ln_f.g"] = np.ones(d)
    arrays["ln_f.b"] = np.zeros(d)
    arrays["out_proj"] = w(d, v)
    return ModelParams(config, arrays)


def num_params(params: ModelParams) -> int:
    return sum(a.size for a in params.arrays.values())


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim != 2 or toks.shape[0] < 1 or toks.shape[1] < 1:
        raise InvalidInputError("tokens must be a (batch, positions) matrix")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InvalidInputError("tokens must be integers")
    if toks.shape[1] > config.max_seq_len:
        raise InvalidInputError(
            f"sequence length {toks.shape[1]} exceeds max_seq_len={config.max_seq_len}"
        )
    if np.any(toks < 0) or np.any(toks >= config.vocab_size):
        raise InvalidInputError("token ids out of vocabulary range")
    return toks


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    return dx, dg, db


def _gelu(a):
    # a*a*a, not a**3: np.power is an order of magnitude slower here
    t = np.tanh(_GELU_K * (a + _GELU_C * (a * a * a)))
    return 0.5 * a * (1.0 + t), t


def _gelu_grad(a, t):
    """Derivative of _gelu given its cached tanh value."""
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_K * (
        1.0 + 3.0 * _GELU_C * (a * a))


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def forward_with_cache(params: ModelParams, tokens):
    """Logits (batch, positions, vocab) plus the activations backward needs."""
    cfg = params.config
    toks = _check_tokens(cfg, tokens)
    a = params.arrays
    b, t = toks.shape
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    causal = np.tril(np.ones((t, t), dtype=bool))

    x = a["tok_emb"][toks] + a["pos_emb"][:t]
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        x_in = x
        u, ln1c = _ln_forward(x, a[f"{p}.ln1.g"], a[f"{p}.ln1.b"])
        qh = _split_heads(u @ a[f"{p}.attn.wq"], cfg.n_heads)
        kh = _split_heads(u @ a[f"{p}.attn.wk"], cfg.n_heads)
        vh = _split_heads(u @ a[f"{p}.attn.wv"], cfg.n_heads)
        scores = np.where(causal, qh @ kh.swapaxes(-1, -2) * scale, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ vh)
        x = x_in + ctx @ a[f"{p}.attn.wo"]
        x_mid = x
        w, ln2c = _ln_forward(x, a[f"{p}.ln2.g"], a[f"{p}.ln2.b"])
        pre = w @ a[f"{p}.mlp.w1"]
        h, gt = _gelu(pre)
        x = x_mid + h @ a[f"{p}.mlp.w2"]
        layers.append((x_in, ln1c, u, qh, kh, vh, probs, ctx, x_mid, ln2c, w, pre, h, gt))
    f, lnfc = _ln_forward(x, a["ln_f.g"], a["ln_f.b"])
    logits = f @ a["out_proj"]
    return logits, (toks, layers, lnfc, f, scale)


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Logits (batch, positions, vocab); position i sees tokens 0..i only."""
    logits, _ = forward_with_cache(params, tokens)
    return logits


def backward(params: ModelParams, tokens, grad_logits, cache=None) -> dict[str, np.ndarray]:
    """Parameter gradients for the given logit gradient.

    Recomputes the forward pass unless the cache from forward_with_cache is
    supplied. Returns one gradient array per parameter, matching shapes.
    """
    cfg = params.config
    a = params.arrays
    if cache is None:
        _, cache = forward_with_cache(params, tokens)
    toks, layers, lnfc, f, scale = cache
    b, t = toks.shape
    dlog = np.asarray(grad_logits, dtype=np.float64)
    if dlog.shape != (b, t, cfg.vocab_size):
        raise InvalidInputError("grad_logits shape must be (batch, positions, vocab)")

    grads: dict[str, np.ndarray] = {}
    d = cfg.d_model
    grads["out_proj"] = f.reshape(-1, d).T @ dlog.reshape(-1, cfg.vocab_size)
    df = dlog @ a["out_proj"].T
    dx, grads["ln_f.g"], grads["ln_f.b"] = _ln_backward(df, a["ln_f.g"], lnfc)

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        x_in, ln1c, u, qh, kh, vh, probs, ctx, x_mid, ln2c, w, pre, h, gt = layers[i]
        # mlp block: x = x_mid + gelu(w @ w1) @ w2
        dm = dx
        grads[f"{p}.mlp.w2"] = h.reshape(-1, cfg.d_ff).T @ dm.reshape(-1, d)
        dh = dm @ a[f"{p}.mlp.w2"].T
        dpre = dh * _gelu_grad(pre, gt)
        grads[f"{p}.mlp.w1"] = w.reshape(-1, d).T @ dpre.reshape(-1, cfg.d_ff)
        dw = dpre @ a[f"{p}.mlp.w1"].T
        dres, grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = _ln_backward(
            dw, a[f"{p}.ln2.g"], ln2c)
        dx_mid = dx + dres
        # attention block: x_mid = x_in + merge(probs @ vh) @ wo
        dattn = dx_mid
        grads[f"{p}.attn.wo"] = ctx.reshape(-1, d).T @ dattn.reshape(-1, d)
        dctx = _split_heads(dattn @ a[f"{p}.attn.wo"].T, cfg.n_heads)
        dprobs = dctx @ vh.swapaxes(-1, -2)
        dvh = probs.swapaxes(-1, -2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.swapaxes(-1, -2) @ qh * scale
        dq, dk, dv = (_merge_heads(z) for z in (dqh, dkh, dvh))
        u2 = u.reshape(-1, d)
        grads[f"{p}.attn.wq"] = u2.T @ dq.reshape(-1, d)
        grads[f"{p}.attn.wk"] = u2.T @ dk.reshape(-1, d)
        grads[f"{p}.attn.wv"] = u2.T @ dv.reshape(-1, d)
        du = dq @ a[f"{p}.attn.wq"].T + dk @ a[f"{p}.attn.wk"].T + dv @ a[f"{p}.attn.wv"].T
        dres, grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = _ln_backward(
            du, a[f"{p}.ln1.g"], ln1c)
        dx = dx_mid + dres

    grads["pos_emb"] = np.zeros_like(a["pos_emb"])
    grads["pos_emb"][:t] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(a["tok_emb"])
    np.add.at(grads["tok_emb"], toks, dx)
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: ModelParams) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return AdamState({k: v.copy() for k, v in zeros.items()}, zeros, 0)


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    warmup: float = 1.0,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state.

    warmup is a multiplier in [0, 1] applied to lr (1.0 after the ramp).
    Inputs are never mutated: parameter objects are immutable snapshots.
    """
    if lr <= 0.0:
        raise InvalidInputError(f"lr must be positive, got {lr}")
    if not (0.0 <= warmup <= 1.0):
        raise InvalidInputError(f"warmup multiplier must lie in [0, 1], got {warmup}")
    if set(grads) != set(params.arrays):
        raise InvalidInputError("gradient keys do not match parameter keys")
    t = state.t + 1
    lr_eff = lr * warmup
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, theta in params.arrays.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        new_arrays[name] = theta - lr_eff * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return ModelParams(params.config, new_arrays), AdamState(new_m, new_v, t)


def decode_greedy(params: ModelParams, prompt, max_new: int, eos_id: int) -> list[int]:
    """Greedy continuation of a single prompt.

    Appends the argmax token (ties break toward the lowest id) until EOS or
    max_new tokens; the terminating EOS is not included in the result.
    """
    cfg = params.config
    seq = [int(x) for x in prompt]
    if not seq:
        raise InvalidInputError("prompt must be nonempty")
    if max_new < 0:
        raise InvalidInputError("max_new must be >= 0")
    if len(seq) + max_new > cfg.max_seq_len:
        raise InvalidInputError(
            f"prompt length {len(seq)} + max_new {max_new} exceeds "
            f"max_seq_len={cfg.max_seq_len}"
        )
    if not (0 <= eos_id < cfg.vocab_size):
        raise InvalidInputError("eos_id out of vocabulary range")
    for _ in range(max_new):
        logits = forward(params, np.asarray([seq]))[0, -1]
        nxt = int(np.argmax(logits))
        if nxt == eos_id:
            break
        seq.append(nxt)
    return seq


def _decode_step(params: ModelParams, tokens, pos: int, kv) -> np.ndarray:
    """Logits for one token per row at position pos, reusing cached K/V.

    kv holds [keys, values] per layer shaped (batch, heads, seen, head_dim)
    and is extended in place with the new position. The new position attends
    to everything cached plus itself, which is exactly the causal row.
    """
    cfg = params.config
    a = params.arrays
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    x = a["tok_emb"][tokens][:, None, :] + a["pos_emb"][pos]
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        u, _ = _ln_forward(x, a[f"{p}.ln1.g"], a[f"{p}.ln1.b"])
        qh = _split_heads(u @ a[f"{p}.attn.wq"], cfg.n_heads)
        kv[i][0] = np.concatenate(
            [kv[i][0], _split_heads(u @ a[f"{p}.attn.wk"], cfg.n_heads)], axis=2)
        kv[i][1] = np.concatenate(
            [kv[i][1], _split_heads(u @ a[f"{p}.attn.wv"], cfg.n_heads)], axis=2)
        scores = qh @ kv[i][0].swapaxes(-1, -2) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        x = x + _merge_heads(probs @ kv[i][1]) @ a[f"{p}.attn.wo"]
        w, _ = _ln_forward(x, a[f"{p}.ln2.g"], a[f"{p}.ln2.b"])
        h, _ = _gelu(w @ a[f"{p}.mlp.w1"])
        x = x + h @ a[f"{p}.mlp.w2"]
    f, _ = _ln_forward(x, a["ln_f.g"], a["ln_f.b"])
    return (f @ a["out_proj"])[:, 0, :]


def decode_greedy_batch(
    params: ModelParams, prompts, max_new: int, eos_id: int
) -> list[list[int]]:
    """Greedy continuations for many prompts, batched by prompt length.

    Equivalent to decode_greedy on each prompt; rows are independent under
    causal attention. The prompt is run once, then each new token reuses the
    per-layer key/value cache instead of re-running the whole prefix.
    """
    results: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, prompt in enumerate(prompts):
        groups.setdefault(len(prompt), []).append(i)
    for plen, idxs in sorted(groups.items()):
        if plen + max_new > params.config.max_seq_len:
            raise InvalidInputError(
                f"prompt length {plen} + max_new {max_new} exceeds "
                f"max_seq_len={params.config.max_seq_len}"
            )
        cur = np.asarray([list(prompts[i]) for i in idxs], dtype=np.int64)
        if cur.size == 0 or plen == 0:
            raise InvalidInputError("prompts must be nonempty")
        done = np.zeros(len(idxs), dtype=bool)
        conts: list[list[int]] = [[] for _ in idxs]
        if max_new > 0:
            logits, (_, layers, _, _, _) = forward_with_cache(params, cur)
            kv = [[lay[4], lay[5]] for lay in layers]
            last = logits[:, -1, :]
            for step in range(max_new):
                nxt = last.argmax(axis=-1)
                for row, token in enumerate(nxt):
                    if done[row]:
                        continue
                    if int(token) == eos_id:
                        done[row] = True
                    else:
                        conts[row].append(int(token))
                if done.all() or step == max_new - 1:
                    break
                last = _decode_step(params, nxt, plen + step, kv)
        for row, i in enumerate(idxs):
            results[i] = list(prompts[i]) + conts[row]
    return results  # type: ignore[return-value]


def save_checkpoint(directory, params: ModelParams) -> None:
    """Write manifest.json plus params.bin (little-endian float64 blob).

    Arrays are concatenated in lexicographic parameter-name order; the
    manifest records names, shapes, byte offsets, dtype and the model config.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset,
             "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "model_config": asdict(params.config),
        "params": entries,
        "total_bytes": offset,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / BLOB_NAME).write_bytes(b"".join(chunks))


def load_checkpoint(directory) -> ModelParams:
    """Inverse of save_checkpoint; bit-exact round trip."""
    src = Path(directory)
    try:
        manifest = json.loads((src / MANIFEST_NAME).read_text())
    except FileNotFoundError as e:
        raise InvalidInputError(f"no checkpoint manifest in {src}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unrecognized checkpoint format in {src}")
    blob = (src / BLOB_NAME).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise InvalidInputError(
            f"checkpoint blob is {len(blob)} bytes, manifest says "
            f"{manifest['total_bytes']}"
        )
    config = ModelConfig(**manifest["model_config"])
    arrays = {}
    for entry in manifest["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + nbytes], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    expected = set(init_params(config).arrays)
    if set(arrays) != expected:
        raise InvalidInputError("checkpoint parameter names do not match config")
    return ModelParams(config, arrays)
