"""Tiny vision-encoder + language-decoder transformer.

Two forward implementations share the same parameters and kernels:

  * a tape-path built from `tensor.apply` ops, used wherever gradients
    are needed (teacher-forced training passes, gradient checks);
  * a fast numpy-only path with per-layer KV caches, used for greedy
    decoding and Monte Carlo sampling where no gradients flow.

The decoder consumes the instruction tokens as its own prefix (they are
part of the target template) and attends to the encoded image patches
via cross-attention. Decoding always starts after the instruction
segment plus the <predict_bbox> task prompt.

Checkpoints are a versioned binary format: magic, format version, a
JSON metadata blob (model config, vocabulary, task settings), then one
record per parameter (name, dims, little-endian f64 payload), bit-exact
across save/load.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import codec, kernels
from . import tensor as T
from .codec import MAX_SEQ_LEN, Role, TokenSequence, decode_template
from .tensor import Tensor

NEG_MASK = -1e9  # finite stand-in for -inf; exp underflows to exactly 0.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 96
    height: int = 64
    channels: int = 3
    patch: int = 8
    embed_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    max_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.width % self.patch or self.height % self.patch:
            raise ValueError("image dims must be divisible by patch size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.max_len != MAX_SEQ_LEN:
            raise ValueError(f"max decode length is fixed at {MAX_SEQ_LEN}")
        if self.vocab_size <= codec.N_FIXED_IDS:
            raise ValueError("vocab_size must cover structural tokens and digits")

    @property
    def n_patches(self):
        return (self.width // self.patch) * (self.height // self.patch)

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def mlp_dim(self):
        return self.embed_dim * self.mlp_ratio


def _enc_names(i):
    return [f"enc{i}.{s}" for s in (
        "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
        "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )]


def _dec_names(i):
    return [f"dec{i}.{s}" for s in (
        "ln1_g", "ln1_b", "self_wq", "self_wk", "self_wv", "self_wo",
        "ln2_g", "ln2_b", "cross_wq", "cross_wk", "cross_wv", "cross_wo",
        "ln3_g", "ln3_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh ParamStore: normal(0, 0.02) weights, unit layernorm gains."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0])))
    d, v = cfg.embed_dim, cfg.vocab_size
    params = {}

    def w(name, *shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def ln(gname, bname):
        params[gname] = Tensor(np.ones(d), requires_grad=True)
        params[bname] = Tensor(np.zeros(d), requires_grad=True)

    def b(name, n):
        params[name] = Tensor(np.zeros(n), requires_grad=True)

    w("tok_emb", v, d)
    w("dec_pos", cfg.max_len, d)
    w("patch_w", cfg.patch_dim, d)
    b("patch_b", d)
    w("enc_pos", cfg.n_patches, d)
    for i in range(cfg.enc_layers):
        n = _enc_names(i)
        ln(n[0], n[1])
        for name in n[2:6]:
            w(name, d, d)
        ln(n[6], n[7])
        w(n[8], d, cfg.mlp_dim)
        b(n[9], cfg.mlp_dim)
        w(n[10], cfg.mlp_dim, d)
        b(n[11], d)
    ln("enc_ln_g", "enc_ln_b")
    for i in range(cfg.dec_layers):
        n = _dec_names(i)
        ln(n[0], n[1])
        for name in n[2:6]:
            w(name, d, d)
        ln(n[6], n[7])
        for name in n[8:12]:
            w(name, d, d)
        ln(n[12], n[13])
        w(n[14], d, cfg.mlp_dim)
        b(n[15], cfg.mlp_dim)
        w(n[16], cfg.mlp_dim, d)
        b(n[17], d)
    ln("dec_ln_g", "dec_ln_b")
    w("out_w", d, v)
    b("out_b", v)
    return params


# -- tape-path forward -------------------------------------------------------------

def _split_heads(x, cfg):
    b, t, _ = x.data.shape
    x = T.reshape(x, (b, t, cfg.heads, cfg.head_dim))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x, cfg):
    b, _, t, _ = x.data.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, cfg.embed_dim))


def _attn_t(x, kv_source, p, pre, cfg, causal):
    q = _split_heads(T.matmul(x, p[pre + "wq"]), cfg)
    k = _split_heads(T.matmul(kv_source, p[pre + "wk"]), cfg)
    v = _split_heads(T.matmul(kv_source, p[pre + "wv"]), cfg)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    if causal:
        t = x.data.shape[1]
        mask = T.constant(np.triu(np.full((t, t), NEG_MASK), k=1))
        scores = T.add(scores, mask)
    attn = T.softmax_lastdim(scores)
    return T.matmul(_merge_heads(T.matmul(attn, v), cfg), p[pre + "wo"])


def _mlp_t(x, p, pre):
    h = T.gelu(T.add(T.matmul(x, p[pre + "mlp_w1"]), p[pre + "mlp_b1"]))
    return T.add(T.matmul(h, p[pre + "mlp_w2"]), p[pre + "mlp_b2"])


def encode_images_t(images: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Batched tape-path encoder: (B,H,W,C) in [0,1] -> Tensor (B,Nx,d)."""
    bsz, h, w, c = images.shape
    if (h, w, c) != (cfg.height, cfg.width, cfg.channels):
        raise T.ShapeError(f"image shape {(h, w, c)} does not match config")
    ph, pw = h // cfg.patch, w // cfg.patch
    x = T.constant(images)
    x = T.reshape(x, (bsz, ph, cfg.patch, pw, cfg.patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (bsz, ph * pw, cfg.patch_dim))
    x = T.add(T.matmul(x, params["patch_w"]), params["patch_b"])
    x = T.add(x, params["enc_pos"])
    for i in range(cfg.enc_layers):
        pre = f"enc{i}."
        h1 = T.layernorm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        x = T.add(x, _attn_t(h1, h1, params, pre, cfg, causal=False))
        h2 = T.layernorm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        x = T.add(x, _mlp_t(h2, params, pre))
    return T.layernorm(x, params["enc_ln_g"], params["enc_ln_b"])


def encode_image(image: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Single image -> Tensor (Nx, d)."""
    enc = encode_images_t(image[None], params, cfg)
    return T.reshape(enc, (cfg.n_patches, cfg.embed_dim))


def decode_sequence_logits_t(enc: Tensor, ids: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Teacher-forced decoder pass: logits[b, t] is the distribution over
    the token at position t+1 given ids[b, :t+1] and the image."""
    bsz, t = ids.shape
    if t > cfg.max_len:
        raise T.ShapeError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    x = T.embedding_gather(params["tok_emb"], ids)
    x = T.add(x, T.slice_(params["dec_pos"], 0, 0, t))
    for i in range(cfg.dec_layers):
        pre = f"dec{i}."
        h1 = T.layernorm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        x = T.add(x, _attn_t(h1, h1, params, pre + "self_", cfg, causal=True))
        h2 = T.layernorm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        x = T.add(x, _attn_t(h2, enc, params, pre + "cross_", cfg, causal=False))
        h3 = T.layernorm(x, params[pre + "ln3_g"], params[pre + "ln3_b"])
        x = T.add(x, _mlp_t(h3, params, pre))
    x = T.layernorm(x, params["dec_ln_g"], params["dec_ln_b"])
    return T.add(T.matmul(x, params["out_w"]), params["out_b"])


def decode_logits(enc: Tensor, prefix: TokenSequence, params, cfg: ModelConfig) -> Tensor:
    """Next-position logits (V,) after the given prefix."""
    n = len(prefix)
    if n >= cfg.max_len:
        raise T.ShapeError("prefix overflows the decode budget")
    enc3 = T.reshape(enc, (1,) + enc.data.shape) if enc.data.ndim == 2 else enc
    logits = decode_sequence_logits_t(enc3, prefix.ids[None, :], params, cfg)
    last = T.slice_(logits, 1, n - 1, n)
    return T.reshape(last, (cfg.vocab_size,))


def repeat_memory(enc: Tensor, k: int) -> Tensor:
    """(B,Nx,d) -> (B*k,Nx,d) replicating each item k times (grad sums back)."""
    b, nx, d = enc.data.shape
    r = T.reshape(enc, (b, 1, nx, d))
    return T.reshape(T.concat([r] * k, axis=1), (b * k, nx, d))


# -- fast no-grad decode path --------------------------------------------------------

def _ln_rows(x, g, b):
    return kernels.layernorm_rows(np.ascontiguousarray(x), g, b, T.LAYERNORM_EPS)[0]


def encode_images_np(images: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    """Numpy twin of encode_images_t (no tape, same kernels)."""
    p = {k: v.data for k, v in params.items()}
    bsz, h, w, c = images.shape
    ph, pw = h // cfg.patch, w // cfg.patch
    x = images.reshape(bsz, ph, cfg.patch, pw, cfg.patch, c)
    x = np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(bsz, ph * pw, cfg.patch_dim)
    x = x @ p["patch_w"] + p["patch_b"] + p["enc_pos"]
    nx, d = cfg.n_patches, cfg.embed_dim
    for i in range(cfg.enc_layers):
        pre = f"enc{i}."
        h1 = _ln_rows(x.reshape(-1, d), p[pre + "ln1_g"], p[pre + "ln1_b"]).reshape(bsz, nx, d)
        q = (h1 @ p[pre + "wq"]).reshape(bsz, nx, cfg.heads, -1).transpose(0, 2, 1, 3)
        k = (h1 @ p[pre + "wk"]).reshape(bsz, nx, cfg.heads, -1).transpose(0, 2, 1, 3)
        v = (h1 @ p[pre + "wv"]).reshape(bsz, nx, cfg.heads, -1).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(cfg.head_dim)
        a = kernels.softmax_rows(np.ascontiguousarray(s.reshape(-1, nx))).reshape(s.shape)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(bsz, nx, d) @ p[pre + "wo"]
        x = x + o
        h2 = _ln_rows(x.reshape(-1, d), p[pre + "ln2_g"], p[pre + "ln2_b"]).reshape(bsz, nx, d)
        hh = h2 @ p[pre + "mlp_w1"] + p[pre + "mlp_b1"]
        hh = kernels.gelu(np.ascontiguousarray(hh.reshape(-1))).reshape(hh.shape)
        x = x + (hh @ p[pre + "mlp_w2"] + p[pre + "mlp_b2"])
    return _ln_rows(x.reshape(-1, d), p["enc_ln_g"], p["enc_ln_b"]).reshape(bsz, nx, d)


class DecoderState:
    """Incremental decoder over R parallel rows with per-layer KV caches.

    enc_np has shape (R, Nx, d) or (1, Nx, d) to share one image across
    all rows (cross-attention broadcasts over the row axis).
    """

    def __init__(self, enc_np, params, cfg: ModelConfig):
        self.cfg = cfg
        self.p = {k: v.data for k, v in params.items()}
        self.t = 0
        hd, nh = cfg.head_dim, cfg.heads
        self.cross_k = []
        self.cross_v = []
        self.self_k = []
        self.self_v = []
        r_enc, nx, d = enc_np.shape
        self.rows = None  # fixed on first step
        for i in range(cfg.dec_layers):
            pre = f"dec{i}."
            ck = (enc_np @ self.p[pre + "cross_wk"]).reshape(r_enc, nx, nh, hd).transpose(0, 2, 3, 1)
            cv = (enc_np @ self.p[pre + "cross_wv"]).reshape(r_enc, nx, nh, hd).transpose(0, 2, 1, 3)
            self.cross_k.append(np.ascontiguousarray(ck))  # (r_enc, H, hd, Nx)
            self.cross_v.append(np.ascontiguousarray(cv))  # (r_enc, H, Nx, hd)
            self.self_k.append(None)
            self.self_v.append(None)

    def step(self, ids):
        """Feed tokens for position self.t; return logits (R, V) for t+1."""
        cfg, p = self.cfg, self.p
        ids = np.asarray(ids, dtype=np.int64)
        r = ids.shape[0]
        if self.rows is None:
            self.rows = r
            hd = cfg.head_dim
            for i in range(cfg.dec_layers):
                self.self_k[i] = np.empty((r, cfg.heads, cfg.max_len, hd))
                self.self_v[i] = np.empty((r, cfg.heads, cfg.max_len, hd))
        t = self.t
        if t >= cfg.max_len:
            raise T.ShapeError("decode budget exhausted")
        d, nh, hd = cfg.embed_dim, cfg.heads, cfg.head_dim
        x = p["tok_emb"][ids] + p["dec_pos"][t]
        for i in range(cfg.dec_layers):
            pre = f"dec{i}."
            h1 = _ln_rows(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (h1 @ p[pre + "self_wq"]).reshape(r, nh, 1, hd)
            self.self_k[i][:, :, t, :] = (h1 @ p[pre + "self_wk"]).reshape(r, nh, hd)
            self.self_v[i][:, :, t, :] = (h1 @ p[pre + "self_wv"]).reshape(r, nh, hd)
            keys = self.self_k[i][:, :, : t + 1, :]
            vals = self.self_v[i][:, :, : t + 1, :]
            s = (q @ keys.transpose(0, 1, 3, 2)) / math.sqrt(hd)
            a = kernels.softmax_rows(np.ascontiguousarray(s.reshape(-1, t + 1))).reshape(s.shape)
            x = x + (a @ vals).reshape(r, d) @ p[pre + "self_wo"]

            h2 = _ln_rows(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            q2 = (h2 @ p[pre + "cross_wq"]).reshape(r, nh, 1, hd)
            s2 = (q2 @ self.cross_k[i]) / math.sqrt(hd)
            nx = s2.shape[-1]
            a2 = kernels.softmax_rows(np.ascontiguousarray(s2.reshape(-1, nx))).reshape(s2.shape)
            x = x + (a2 @ self.cross_v[i]).reshape(r, d) @ p[pre + "cross_wo"]

            h3 = _ln_rows(x, p[pre + "ln3_g"], p[pre + "ln3_b"])
            hh = h3 @ p[pre + "mlp_w1"] + p[pre + "mlp_b1"]
            hh = kernels.gelu(np.ascontiguousarray(hh.reshape(-1))).reshape(hh.shape)
            x = x + hh @ p[pre + "mlp_w2"] + p[pre + "mlp_b2"]
        x = _ln_rows(x, p["dec_ln_g"], p["dec_ln_b"])
        self.t = t + 1
        return x @ p["out_w"] + p["out_b"]


# -- decoding -------------------------------------------------------------------------

_ROLE_BY_ID = {
    codec.PAD_ID: Role.PAD,
    codec.EOS_ID: Role.EOS,
    codec.INSTR_OPEN_ID: Role.INSTRUCTION,
    codec.INSTR_CLOSE_ID: Role.INSTRUCTION,
    codec.PREDICT_OPEN_ID: Role.TASK_PROMPT,
    codec.PREDICT_CLOSE_ID: Role.TASK_PROMPT,
}


def _role_of(tid):
    if codec.DIGIT_BASE_ID <= tid < codec.DIGIT_BASE_ID + 10:
        return Role.COORD_VALUE
    if codec.X_MIN_OPEN_ID <= tid <= codec.Y_CTR_CLOSE_ID:
        return Role.COORD_PROMPT
    return _ROLE_BY_ID.get(tid, Role.INSTRUCTION)


@dataclass
class DecodedSequence:
    """One decoded (or sampled) sequence plus its per-position stats.

    logp[t] is the log-probability of the emitted token at position t
    (0.0 at prompt and forced positions, where the policy made no
    choice). `restricted` marks positions sampled from the
    digit-restricted renormalized softmax. `full_logprobs`, when
    retained, covers positions prompt_len.. aligned to its rows.
    """

    seq: TokenSequence
    logp: np.ndarray
    sampled: np.ndarray
    restricted: np.ndarray
    prompt_len: int
    full_logprobs: np.ndarray = None

    def generated_ids(self):
        return self.seq.ids[self.prompt_len:]


def _prompt_of(instruction: TokenSequence) -> TokenSequence:
    return TokenSequence(
        np.concatenate([instruction.ids, [codec.PREDICT_OPEN_ID]]),
        np.concatenate([instruction.roles, [np.int8(Role.TASK_PROMPT)]]),
    )


def _full_log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(image, instruction: TokenSequence, params, cfg: ModelConfig,
                  retain_probs=False) -> DecodedSequence:
    """Argmax decoding after the instruction + <predict_bbox> prompt; stops
    at <eos> or the 128-token budget."""
    enc = encode_images_np(image[None], params, cfg)
    state = DecoderState(enc, params, cfg)
    prompt = _prompt_of(instruction)
    n0 = len(prompt)
    logits = None
    for t in range(n0):
        logits = state.step(prompt.ids[t : t + 1])
    ids = list(prompt.ids)
    roles = list(prompt.roles)
    logp = [0.0] * n0
    rows = []
    while len(ids) < cfg.max_len:
        lsm = _full_log_softmax(logits[0])
        if retain_probs:
            rows.append(lsm)
        nxt = int(np.argmax(logits[0]))
        ids.append(nxt)
        roles.append(_role_of(nxt))
        logp.append(float(lsm[nxt]))
        if nxt == codec.EOS_ID:
            break
        logits = state.step(np.array([nxt]))
    n = len(ids)
    return DecodedSequence(
        seq=TokenSequence(np.array(ids), np.array(roles, dtype=np.int8)),
        logp=np.array(logp),
        sampled=np.zeros(n, dtype=bool),
        restricted=np.zeros(n, dtype=bool),
        prompt_len=n0,
        full_logprobs=np.array(rows) if retain_probs else None,
    )


def _sample_rows(probs, rng):
    """Inverse-CDF draw per row; final cumsum cell forced to 1.0 so the
    draw always lands."""
    cs = np.cumsum(probs, axis=-1)
    cs[:, -1] = 1.0
    u = rng.random(probs.shape[0])
    return (u[:, None] < cs).argmax(axis=-1)


def sample_decode(image, instruction: TokenSequence, params, cfg: ModelConfig,
                  k: int, rng, force_structural=True, variant="bbox", digits=2,
                  retain_probs=False):
    """k sequences sampled from the per-step softmax.

    force_structural=True walks the variant's template: structural
    positions are forced to the template token (log-prob recorded as 0)
    and value slots are sampled from the softmax renormalized over the
    ten digit tokens, so every sample parses. force_structural=False
    free-runs over the full vocabulary until <eos> or the budget.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    enc = encode_images_np(image[None], params, cfg)
    return _sample_with_memory(enc, instruction, params, cfg, k, rng,
                               force_structural, variant, digits, retain_probs)


def _sample_with_memory(enc, instruction, params, cfg, k, rng,
                        force_structural, variant, digits, retain_probs):
    state = DecoderState(enc, params, cfg)
    prompt = _prompt_of(instruction)
    n0 = len(prompt)
    logits = None
    for t in range(n0):
        logits = state.step(np.repeat(prompt.ids[t : t + 1], k))

    dig0 = codec.DIGIT_BASE_ID
    ids_rows = [list(prompt.ids) for _ in range(k)]
    logp_rows = [[0.0] * n0 for _ in range(k)]
    sampled_cols = []
    restricted_cols = []
    prob_rows = [[] for _ in range(k)] if retain_probs else None

    def record_probs(lsm_full):
        if retain_probs:
            for r in range(k):
                prob_rows[r].append(lsm_full[r])

    if force_structural:
        template = decode_template(variant, digits)
        roles_tail = template.roles
        for pos in range(len(template)):
            lsm_full = _full_log_softmax(logits)
            record_probs(lsm_full)
            if template.ids[pos] < 0:
                dp = kernels.softmax_rows(np.ascontiguousarray(logits[:, dig0 : dig0 + 10]))
                draw = _sample_rows(dp, rng)
                toks = dig0 + draw
                lp = np.log(np.maximum(dp[np.arange(k), draw], 1e-300))
                sampled_cols.append(True)
                restricted_cols.append(True)
            else:
                toks = np.full(k, template.ids[pos], dtype=np.int64)
                lp = np.zeros(k)
                sampled_cols.append(False)
                restricted_cols.append(False)
            for r in range(k):
                ids_rows[r].append(int(toks[r]))
                logp_rows[r].append(float(lp[r]))
            if pos + 1 < len(template):
                logits = state.step(toks)
        roles_full = np.concatenate([prompt.roles, roles_tail])
        out = []
        for r in range(k):
            n = len(ids_rows[r])
            out.append(DecodedSequence(
                seq=TokenSequence(np.array(ids_rows[r]), roles_full.astype(np.int8)),
                logp=np.array(logp_rows[r]),
                sampled=np.concatenate([np.zeros(n0, dtype=bool), np.array(sampled_cols)]),
                restricted=np.concatenate([np.zeros(n0, dtype=bool), np.array(restricted_cols)]),
                prompt_len=n0,
                full_logprobs=np.array(prob_rows[r]) if retain_probs else None,
            ))
        return out

    # free-running: all rows step together until every row closed
    alive = np.ones(k, dtype=bool)
    while alive.any() and len(ids_rows[0]) < cfg.max_len:
        lsm_full = _full_log_softmax(logits)
        record_probs(lsm_full)
        probs = kernels.softmax_rows(np.ascontiguousarray(logits))
        draw = _sample_rows(probs, rng)
        lp = np.log(np.maximum(probs[np.arange(k), draw], 1e-300))
        toks = np.where(alive, draw, codec.PAD_ID)
        for r in range(k):
            ids_rows[r].append(int(toks[r]))
            logp_rows[r].append(float(lp[r]) if alive[r] else 0.0)
        sampled_cols.append(alive.copy())
        alive = alive & (draw != codec.EOS_ID)
        if alive.any() and len(ids_rows[0]) < cfg.max_len:
            logits = state.step(toks)
    sampled_m = np.array(sampled_cols).T if sampled_cols else np.zeros((k, 0), dtype=bool)
    out = []
    for r in range(k):
        n = len(ids_rows[r])
        ids_arr = np.array(ids_rows[r])
        roles = np.concatenate([prompt.roles, [_role_of(t) for t in ids_arr[n0:]]]).astype(np.int8)
        srow = np.concatenate([np.zeros(n0, dtype=bool), sampled_m[r]])
        out.append(DecodedSequence(
            seq=TokenSequence(ids_arr, roles),
            logp=np.array(logp_rows[r]) * srow,
            sampled=srow,
            restricted=np.zeros(n, dtype=bool),
            prompt_len=n0,
            full_logprobs=np.array(prob_rows[r]) if retain_probs else None,
        ))
    return out


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"RUIGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params, meta: dict):
    """Atomic write; params stored in sorted-name order, f64 little-endian."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        names = sorted(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(blob_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return params, meta


def config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(**meta["model"])
