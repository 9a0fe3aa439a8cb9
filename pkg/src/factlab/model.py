"""Tiny decoder-only transformer in plain numpy with hand-written backprop.

Architecture: token embedding, pre-norm residual blocks of causal
self-attention (rotary positions, q/k/v biases, no output bias) and a gated
SiLU feed-forward, RMS norms, final norm, untied output head. Parameters
live in a flat name -> ndarray dict so the optimizer and the finite
difference checker can walk them uniformly.

float32 is the training dtype; float64 is used for gradient checks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels as kernels
from . import tokenizer
from .errors import ConfigurationError, DegenerateInputError, RangeError

CHECKPOINT_MAGIC = b"FLAB"
CHECKPOINT_VERSION = 1

# Model rows with size identifiers, as used for the size ladder: identifier ->
# (layers, hidden, intermediate, heads, lr_table, lr_wikidata). The non-embed
# counts these imply are what count_params is checked against.
REFERENCE_SIZES = {
    "20M": (3, 128, 384, 4, 2.0e-3, 3.0e-3),
    "30M": (3, 192, 512, 4, 1.0e-3, 2.0e-3),
    "41M": (3, 256, 768, 8, 1.0e-3, 2.0e-3),
    "44M": (6, 256, 768, 8, 7.5e-4, 1.5e-3),
    "69M": (6, 384, 1024, 8, 5.0e-4, 1.0e-3),
    "97M": (6, 512, 1408, 8, 5.0e-4, 7.5e-4),
    "116M": (12, 512, 1408, 8, 4.0e-4, 7.5e-4),
    "200M": (24, 768, 2048, 12, 2.5e-4, 5.0e-4),
    "0.5B": (24, 1024, 2816, 16, 1.5e-4, 3.0e-4),
}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden: int
    intermediate: int
    heads: int
    vocab: int = tokenizer.VOCAB_SIZE
    max_seq_len: int = 256
    rope_base: float = 10000.0
    init_std: float = 0.02
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigurationError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ConfigurationError("head dim must be even for rotary positions")
        if min(self.num_layers, self.hidden, self.intermediate, self.heads, self.vocab) < 1:
            raise ConfigurationError("all dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


def sized_config(num_layers: int, hidden: int, heads: int | None = None, **kw) -> ModelConfig:
    """Config with the conventional sizing rules applied.

    Intermediate is 8/3 of hidden rounded up to a multiple of 128, and the
    aspect ratio hidden/num_layers must stay within [128/3, 128].
    """
    aspect = hidden / num_layers
    if not (128 / 3 - 1e-9) <= aspect <= 128 + 1e-9:
        raise ConfigurationError(
            f"aspect ratio {aspect:.1f} outside [{128 / 3:.1f}, 128]; pass dimensions explicitly"
        )
    intermediate = 128 * math.ceil(8 * hidden / (3 * 128))
    if heads is None:
        heads = 4 if hidden <= 192 else 8 if hidden <= 512 else hidden // 64
    return ModelConfig(num_layers=num_layers, hidden=hidden, intermediate=intermediate, heads=heads, **kw)


def reference_config(identifier: str, **kw) -> ModelConfig:
    layers, hidden, inter, heads, _, _ = REFERENCE_SIZES[identifier]
    return ModelConfig(num_layers=layers, hidden=hidden, intermediate=inter, heads=heads, **kw)


def count_params(config: ModelConfig) -> tuple[int, int]:
    """(total, non_embed) parameter counts.

    Per layer: q/k/v/o projections (4h^2), q/k/v biases (3h), gated MLP
    (3·h·intermediate), two norm gains (2h); plus the final norm gain.
    Embedding and the untied output head are counted only in the total.
    """
    h, i = config.hidden, config.intermediate
    per_layer = 4 * h * h + 3 * h + 3 * h * i + 2 * h
    non_embed = config.num_layers * per_layer + h
    total = non_embed + 2 * config.vocab * h
    return total, non_embed


class ModelState:
    """Parameter tensors plus the config; mutated only by the trainer."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)

    def param_groups(self) -> dict[str, list[str]]:
        """Group name (layer index stripped) -> parameter names."""
        groups: dict[str, list[str]] = {}
        for name in self.params:
            group = name.split(".", 1)[1] if name.startswith("l") and "." in name else name
            groups.setdefault(group, []).append(name)
        return groups

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def astype(self, dtype) -> "ModelState":
        return ModelState(
            self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype
        )


def init_model(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> ModelState:
    """Gaussian(0, init_std) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed if seed is not None else config.seed, 0x1417]))
    h, i, v = config.hidden, config.intermediate, config.vocab
    std = config.init_std
    dt = np.dtype(dtype)

    def gauss(*shape):
        return (rng.standard_normal(shape) * std).astype(dt)

    params: dict[str, np.ndarray] = {}
    params["embed"] = gauss(v, h)
    for l in range(config.num_layers):
        p = f"l{l}."
        params[p + "attn_norm"] = np.ones(h, dtype=dt)
        params[p + "wq"] = gauss(h, h)
        params[p + "wk"] = gauss(h, h)
        params[p + "wv"] = gauss(h, h)
        params[p + "bq"] = np.zeros(h, dtype=dt)
        params[p + "bk"] = np.zeros(h, dtype=dt)
        params[p + "bv"] = np.zeros(h, dtype=dt)
        params[p + "wo"] = gauss(h, h)
        params[p + "mlp_norm"] = np.ones(h, dtype=dt)
        params[p + "wg"] = gauss(h, i)
        params[p + "wu"] = gauss(h, i)
        params[p + "wd"] = gauss(i, h)
    params["final_norm"] = np.ones(h, dtype=dt)
    params["head"] = gauss(h, v)
    return ModelState(config, params, dt)


# --------------------------------------------------------------------------
# numerics

_EPS = 1e-6


def _rope_tables(T, half, base, dtype):
    pos = np.arange(T, dtype=np.float64)[:, None]
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / (2 * half))
    ang = pos * freqs[None, :]
    return np.ascontiguousarray(np.cos(ang).astype(dtype)), np.ascontiguousarray(np.sin(ang).astype(dtype))


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope(T, half, base, dtype):
    key = (T, half, float(base), np.dtype(dtype).str)
    if key not in _ROPE_CACHE:
        if len(_ROPE_CACHE) > 64:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = _rope_tables(T, half, base, dtype)
    return _ROPE_CACHE[key]


def _split_heads(flat, B, T, H, d):
    # (B*T, H*d) -> contiguous (B*H, T, d)
    return np.ascontiguousarray(
        flat.reshape(B, T, H, d).transpose(0, 2, 1, 3)
    ).reshape(B * H, T, d)


def _merge_heads(x, B, T, H, d):
    # (B*H, T, d) -> (B*T, H*d); reshape of the transposed view copies
    return x.reshape(B, H, T, d).transpose(0, 2, 1, 3).reshape(B * T, H * d)


def forward(state: ModelState, tokens: np.ndarray, want_cache: bool = False):
    """Logits (B,T,vocab) for a token batch; optionally the activation cache for backprop."""
    cfg = state.config
    tokens = np.atleast_2d(np.asarray(tokens))
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise RangeError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if T == 0:
        raise DegenerateInputError("empty token batch")
    P = state.params
    dt = state.dtype
    H, d = cfg.heads, cfg.hidden // cfg.heads
    h = cfg.hidden
    BT = B * T
    cos, sin = _rope(T, d // 2, cfg.rope_base, dt)
    scale = dt.type(1.0 / math.sqrt(d))

    x = P["embed"][tokens].reshape(BT, h)
    cache = {"tokens": tokens, "layers": []} if want_cache else None

    for l in range(cfg.num_layers):
        p = f"l{l}."
        a, inv1 = kernels.rmsnorm_fwd(x, P[p + "attn_norm"], _EPS)
        wqkv = np.concatenate([P[p + "wq"], P[p + "wk"], P[p + "wv"]], axis=1)
        bqkv = np.concatenate([P[p + "bq"], P[p + "bk"], P[p + "bv"]])
        qkv = a @ wqkv + bqkv
        q = _split_heads(qkv[:, :h], B, T, H, d)
        k = _split_heads(qkv[:, h:2 * h], B, T, H, d)
        v = _split_heads(qkv[:, 2 * h:], B, T, H, d)
        qr = kernels.rope_rotate(q, cos, sin)
        qr *= scale
        kr = kernels.rope_rotate(k, cos, sin)
        probs = kernels.softmax_causal_(qr @ kr.transpose(0, 2, 1))
        o = _merge_heads(probs @ v, B, T, H, d)
        x_mid = x + o @ P[p + "wo"]

        b_, inv2 = kernels.rmsnorm_fwd(x_mid, P[p + "mlp_norm"], _EPS)
        wgu = np.concatenate([P[p + "wg"], P[p + "wu"]], axis=1)
        gu = b_ @ wgu
        g, u = gu[:, :cfg.intermediate], gu[:, cfg.intermediate:]
        m, sig = kernels.silu_gate(g, u)
        x_new = x_mid + m @ P[p + "wd"]

        if want_cache:
            cache["layers"].append(
                dict(x=x, a=a, inv1=inv1, qr=qr, kr=kr, v=v, probs=probs, o=o,
                     x_mid=x_mid, b=b_, inv2=inv2, g=g, u=u, sig=sig, m=m)
            )
        x = x_new

    hf, invf = kernels.rmsnorm_fwd(x, P["final_norm"], _EPS)
    logits = (hf @ P["head"]).reshape(B, T, cfg.vocab)
    if want_cache:
        cache["x_last"] = x
        cache["hf"] = hf
        cache["invf"] = invf
        return logits, cache
    return logits


def loss_and_grads(
    state: ModelState, tokens: np.ndarray, loss_mask: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over masked next-token targets, with analytic gradients.

    ``loss_mask[b, j]`` marks token j as a prediction target: the logits at
    position j-1 are scored against tokens[b, j]. Position 0 can never be a
    target. PAD and prompt positions are excluded by the mask, so the loss is
    invariant to whatever the model emits there.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    loss_mask = np.atleast_2d(np.asarray(loss_mask, dtype=bool))
    if loss_mask.shape != tokens.shape:
        raise ConfigurationError("loss_mask must match tokens shape")
    if loss_mask[:, 0].any():
        raise ConfigurationError("position 0 has no preceding context to predict it from")
    n_mask = int(loss_mask.sum())
    if n_mask == 0:
        raise DegenerateInputError("batch has zero target positions")

    cfg = state.config
    B, T = tokens.shape
    logits, cache = forward(state, tokens, want_cache=True)

    # CE on positions j-1 -> token j: shift targets/mask left over the full batch
    targets = np.zeros((B, T), dtype=tokens.dtype)
    targets[:, :-1] = tokens[:, 1:]
    sel = np.zeros((B, T), dtype=bool)
    sel[:, :-1] = loss_mask[:, 1:]
    loss_sum, dflat = kernels.ce_loss_and_dlogits(
        logits.reshape(-1, cfg.vocab), targets.reshape(-1), sel.reshape(-1), n_mask
    )
    loss = loss_sum / n_mask
    grads = _backward(state, cache, dflat.reshape(B, T, cfg.vocab))
    return loss, grads


def _backward(state: ModelState, cache, dlogits) -> dict[str, np.ndarray]:
    cfg = state.config
    P = state.params
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, d = cfg.heads, cfg.hidden // cfg.heads
    h = cfg.hidden
    BT = B * T
    dt = state.dtype
    cos, sin = _rope(T, d // 2, cfg.rope_base, dt)
    scale = dt.type(1.0 / math.sqrt(d))
    grads: dict[str, np.ndarray] = {}

    dl2 = dlogits.reshape(BT, cfg.vocab)
    grads["head"] = cache["hf"].T @ dl2
    dhf = dl2 @ P["head"].T
    dx, grads["final_norm"] = kernels.rmsnorm_bwd(dhf, cache["x_last"], P["final_norm"], cache["invf"])

    for l in reversed(range(cfg.num_layers)):
        p = f"l{l}."
        c = cache["layers"][l]

        # MLP block: x_new = x_mid + silu_gate(norm(x_mid)) @ wd
        dmlp = dx
        dm = dmlp @ P[p + "wd"].T
        grads[p + "wd"] = c["m"].T @ dmlp
        dg, du = kernels.silu_gate_bwd(dm, c["g"], c["u"], c["sig"])
        grads[p + "wg"] = c["b"].T @ dg
        grads[p + "wu"] = c["b"].T @ du
        db = dg @ P[p + "wg"].T + du @ P[p + "wu"].T
        dx_mid, grads[p + "mlp_norm"] = kernels.rmsnorm_bwd(db, c["x_mid"], P[p + "mlp_norm"], c["inv2"])
        dx_mid += dmlp

        # attention block
        do = dx_mid @ P[p + "wo"].T
        grads[p + "wo"] = c["o"].T @ dx_mid
        do3 = _split_heads(do, B, T, H, d)
        dprobs = do3 @ c["v"].transpose(0, 2, 1)
        dv = c["probs"].transpose(0, 2, 1) @ do3
        dscores = kernels.softmax_causal_bwd_(c["probs"], dprobs)
        dqr = dscores @ c["kr"]
        dqr *= scale  # qr was pre-scaled in forward
        dkr = dscores.transpose(0, 2, 1) @ c["qr"]
        dq = kernels.rope_rotate(dqr, cos, -sin)  # inverse rotation
        dk = kernels.rope_rotate(np.ascontiguousarray(dkr), cos, -sin)
        dqkv = np.concatenate(
            [_merge_heads(dq, B, T, H, d), _merge_heads(dk, B, T, H, d), _merge_heads(dv, B, T, H, d)],
            axis=1,
        )
        dw = c["a"].T @ dqkv
        grads[p + "wq"] = dw[:, :h]
        grads[p + "wk"] = dw[:, h:2 * h]
        grads[p + "wv"] = dw[:, 2 * h:]
        dbias = dqkv.sum(axis=0)
        grads[p + "bq"] = dbias[:h]
        grads[p + "bk"] = dbias[h:2 * h]
        grads[p + "bv"] = dbias[2 * h:]
        wqkv = np.concatenate([P[p + "wq"], P[p + "wk"], P[p + "wv"]], axis=1)
        da = dqkv @ wqkv.T
        dxa, grads[p + "attn_norm"] = kernels.rmsnorm_bwd(da, c["x"], P[p + "attn_norm"], c["inv1"])
        dx = dx_mid + dxa

    grads["embed"] = kernels.embed_grad(tokens.reshape(-1), dx, cfg.vocab)
    return grads


# --------------------------------------------------------------------------
# greedy decoding with per-layer KV cache

class DecodeSession:
    """Incremental forward pass: one prefill over equal-length prompts, then single-token steps."""

    def __init__(self, state: ModelState, prompts: np.ndarray):
        self.state = state
        cfg = state.config
        self.H, self.d = cfg.heads, cfg.hidden // cfg.heads
        self.pos = 0
        self.kcache: list = [None] * cfg.num_layers
        self.vcache: list = [None] * cfg.num_layers
        self.last_logits = self._advance(np.atleast_2d(prompts))

    def _advance(self, tokens: np.ndarray) -> np.ndarray:
        """Feed tokens (B, t), return logits at the final position (B, vocab)."""
        cfg = self.state.config
        P = self.state.params
        dt = self.state.dtype
        B, t = tokens.shape
        if t > 1 and self.pos != 0:
            raise ConfigurationError("multi-token advance is only valid as the initial prefill")
        T_total = self.pos + t
        if T_total > cfg.max_seq_len:
            raise RangeError(f"decode length {T_total} exceeds max_seq_len {cfg.max_seq_len}")
        H, d = self.H, self.d
        cos_all, sin_all = _rope(T_total, d // 2, cfg.rope_base, dt)
        cos = np.ascontiguousarray(cos_all[self.pos:])
        sin = np.ascontiguousarray(sin_all[self.pos:])
        scale = dt.type(1.0 / math.sqrt(d))

        x = P["embed"][tokens].reshape(B * t, -1)
        for l in range(cfg.num_layers):
            p = f"l{l}."
            a, _ = kernels.rmsnorm_fwd(x, P[p + "attn_norm"], _EPS)
            q = _split_heads(a @ P[p + "wq"] + P[p + "bq"], B, t, H, d)
            k = _split_heads(a @ P[p + "wk"] + P[p + "bk"], B, t, H, d)
            v = _split_heads(a @ P[p + "wv"] + P[p + "bv"], B, t, H, d)
            qr = kernels.rope_rotate(q, cos, sin)
            qr *= scale
            kr = kernels.rope_rotate(k, cos, sin)
            if self.kcache[l] is not None:
                kr = np.concatenate([self.kcache[l], kr], axis=1)
                v = np.concatenate([self.vcache[l], v], axis=1)
            self.kcache[l], self.vcache[l] = kr, v
            scores = qr @ kr.transpose(0, 2, 1)
            if t > 1:
                probs = kernels.softmax_causal_(scores)
            else:
                m = scores.max(axis=-1, keepdims=True)
                np.exp(scores - m, out=scores)
                scores /= scores.sum(axis=-1, keepdims=True)
                probs = scores
            o = _merge_heads(probs @ v, B, t, H, d)
            x = x + o @ P[p + "wo"]
            b_, _ = kernels.rmsnorm_fwd(x, P[p + "mlp_norm"], _EPS)
            m_, _ = kernels.silu_gate(b_ @ P[p + "wg"], b_ @ P[p + "wu"])
            x = x + m_ @ P[p + "wd"]
        self.pos = T_total
        last = np.ascontiguousarray(x.reshape(B, t, -1)[:, -1, :])
        hf, _ = kernels.rmsnorm_fwd(last, P["final_norm"], _EPS)
        return (hf @ P["head"]).astype(np.float64)

    def step(self, next_tokens: np.ndarray) -> np.ndarray:
        self.last_logits = self._advance(next_tokens[:, None])
        return self.last_logits


def greedy_continuations(state: ModelState, prompts: list[np.ndarray], max_new: int) -> list[list[int]]:
    """Greedy decode for prompts of equal length; stops rows at EOS."""
    arr = np.stack(prompts)
    session = DecodeSession(state, arr)
    B = arr.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    logits = session.last_logits
    for _ in range(max_new):
        nxt = np.argmax(logits, axis=-1)  # ties resolve to the lowest id
        for i in range(B):
            if alive[i]:
                out[i].append(int(nxt[i]))
                if nxt[i] == tokenizer.EOS:
                    alive[i] = False
        if not alive.any():
            break
        logits = session.step(nxt.astype(arr.dtype))
    return out


# --------------------------------------------------------------------------
# checkpoints: magic + version, JSON header, raw little-endian payloads

def save_checkpoint(state: ModelState, path, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    tensors = dict(state.params)
    if extra_tensors:
        for k, v in extra_tensors.items():
            tensors["extra:" + k] = v
    index = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({
            "name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
            "offset": offset, "nbytes": le.nbytes,
        })
        offset += le.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "dtype": str(state.dtype),
        "tensors": index,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    params: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            payload, dtype=dtype, count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"]).astype(entry["dtype"])
        if entry["name"].startswith("extra:"):
            extra[entry["name"][6:]] = arr
        else:
            params[entry["name"]] = arr
    config = ModelConfig(**header["config"])
    state = ModelState(config, params, np.dtype(header["dtype"]))
    return state, extra, header.get("meta", {})
