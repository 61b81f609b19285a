"""Trainable architectures and training loops.

Three backbones share one transformer toolkit:

  vanilla     encoder over x, decoder over y_<t, softmax head.
  single_enc  identical machinery; the encoder input is the source
              concatenated with retrieved TM sides, separator-joined.
  dual_enc    a second encoder embeds each TM pair as its own sequence
              "x_tm <sep> y_tm"; the decoder state attends over all TM
              token encodings with a bilinear score, producing a copy
              distribution over target-side TM tokens and a sigmoid gate
              that mixes it with the generator softmax.

Desk-scale defaults (64-dim, 4 heads, 2/2/2 layers) keep everything CPU
trainable; the production-scale lineage for this family is 512-dim,
8 heads, 2048 FFN with 6/4/6 layers, recorded here for reference only.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from tmlab import autodiff as ad
from tmlab.corpus import (
    BOS,
    EOS,
    PAD,
    SEP_TOKEN,
    ParallelCorpus,
    Vocab,
    build_vocab,
    encode_corpus,
)
from tmlab.errors import DataError, NumericError
from tmlab.retrieval import RetrievalIndex, TmSet, build_index, retrieve_topk
from tmlab.seeding import substream

ARCHITECTURES = ("vanilla", "single_enc", "dual_enc")
TRAIN_MODES = ("none", "topk", "single_multi")
NEG_BIAS = -1e9
GATE_FLOOR = 1e-9  # target-side attention mass floor before renormalization


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_src_layers: int = 2
    n_mem_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 64
    arch: str = "vanilla"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise DataError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.arch not in ARCHITECTURES:
            raise DataError(f"unknown architecture '{self.arch}'")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 7e-4
    warmup: int = 200
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    k_retrieval: int = 5
    pool: int = 100


@dataclass
class DecoderState:
    """Everything one forward produces at every step of every batch row."""

    p: ad.Tensor                  # (B, T, V) next-token distribution
    p_nmt: ad.Tensor              # (B, T, V) generator distribution
    h: ad.Tensor                  # (B, T, D) decoder state
    logits: ad.Tensor             # (B, T, V) generator logits
    p_tm: ad.Tensor | None = None   # (B, T, V) copy distribution
    lam: ad.Tensor | None = None    # (B, T, 1) effective gate
    h_tz: ad.Tensor | None = None   # (B, T, D) contextualized TM state
    alpha: ad.Tensor | None = None  # (B, T, M) attention over TM tokens


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, ad.Tensor]:
    rng = substream(seed, "init")
    D, F, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["emb"] = (rng.standard_normal((V, D)) / math.sqrt(D)).astype(dtype)
    # zero output head: an untrained model predicts the uniform distribution
    p["out_w"] = np.zeros((D, V), dtype=dtype)
    p["out_b"] = np.zeros(V, dtype=dtype)

    def make_layer(prefix: str, cross: bool) -> None:
        for blk in (("self",) if not cross else ("self", "cross")):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{prefix}.{blk}.{w}"] = _xavier(rng, D, D, dtype)
            for b in ("bq", "bk", "bv", "bo"):
                p[f"{prefix}.{blk}.{b}"] = np.zeros(D, dtype=dtype)
            p[f"{prefix}.{blk}.ln_g"] = np.ones(D, dtype=dtype)
            p[f"{prefix}.{blk}.ln_b"] = np.zeros(D, dtype=dtype)
        p[f"{prefix}.ffn.w1"] = _xavier(rng, D, F, dtype)
        p[f"{prefix}.ffn.b1"] = np.zeros(F, dtype=dtype)
        p[f"{prefix}.ffn.w2"] = _xavier(rng, F, D, dtype)
        p[f"{prefix}.ffn.b2"] = np.zeros(D, dtype=dtype)
        p[f"{prefix}.ffn.ln_g"] = np.ones(D, dtype=dtype)
        p[f"{prefix}.ffn.ln_b"] = np.zeros(D, dtype=dtype)

    stacks = [("src", cfg.n_src_layers, False), ("dec", cfg.n_dec_layers, True)]
    if cfg.arch == "dual_enc":
        stacks.insert(1, ("mem", cfg.n_mem_layers, False))
    for stack, n_layers, cross in stacks:
        for i in range(n_layers):
            make_layer(f"{stack}{i}", cross)
        p[f"{stack}.lnf_g"] = np.ones(D, dtype=dtype)
        p[f"{stack}.lnf_b"] = np.zeros(D, dtype=dtype)
    if cfg.arch == "dual_enc":
        p["tm.w"] = _xavier(rng, D, D, dtype)      # bilinear attention map
        p["tm.h"] = _xavier(rng, D, D, dtype)      # TM context projection
        p["gate.w"] = np.zeros((D, 1), dtype=dtype)
        p["gate.b"] = np.zeros(1, dtype=dtype)
    return {k: ad.parameter(v, dtype=dtype) for k, v in p.items()}


_pe_cache: dict[tuple[int, int, str], np.ndarray] = {}


def positional_encoding(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    key = (max_len, d_model, np.dtype(dtype).name)
    if key not in _pe_cache:
        pos = np.arange(max_len)[:, None]
        i = np.arange(0, d_model, 2)[None, :]
        angle = pos / np.power(10000.0, i / d_model)
        pe = np.zeros((max_len, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _pe_cache[key] = pe.astype(dtype)
    return _pe_cache[key]


# ---------------------------------------------------------------------------
# Transformer building blocks (pre-LN residual wiring)
# ---------------------------------------------------------------------------

def _embed(params, cfg, ids: np.ndarray, rng, train) -> ad.Tensor:
    L = ids.shape[-1]
    if L > cfg.max_len:
        raise DataError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    dtype = params["emb"].data.dtype
    x = ad.mul(ad.embedding_lookup(params["emb"], ids), math.sqrt(cfg.d_model))
    x = ad.add(x, ad.Tensor(positional_encoding(cfg.max_len, cfg.d_model, dtype)[:L]))
    return ad.dropout(x, cfg.dropout, rng, train)


def _heads_split(x: ad.Tensor, n_heads: int) -> ad.Tensor:
    B, T, D = x.shape
    return ad.permute(ad.reshape(x, (B, T, n_heads, D // n_heads)), (0, 2, 1, 3))


def _heads_merge(x: ad.Tensor) -> ad.Tensor:
    B, H, T, Dh = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (B, T, H * Dh))


def _mha(params, prefix, q_in, kv_in, mask_bias, cfg, rng, train) -> ad.Tensor:
    def proj(w, b, t):
        return ad.add(ad.matmul(t, params[f"{prefix}.{w}"]), params[f"{prefix}.{b}"])

    q = _heads_split(proj("wq", "bq", q_in), cfg.n_heads)
    k = _heads_split(proj("wk", "bk", kv_in), cfg.n_heads)
    v = _heads_split(proj("wv", "bv", kv_in), cfg.n_heads)
    ctx = _heads_merge(ad.scaled_dot_attention(q, k, v, mask_bias))
    return ad.dropout(proj("wo", "bo", ctx), cfg.dropout, rng, train)


def _ffn(params, prefix, x, cfg, rng, train) -> ad.Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return ad.dropout(h, cfg.dropout, rng, train)


def _ln(params, prefix, x) -> ad.Tensor:
    return ad.layer_norm(x, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])


def _key_pad_bias(ids: np.ndarray, dtype) -> np.ndarray:
    # (B, 1, 1, S): blocks attention into PAD keys
    return (np.where(ids == PAD, NEG_BIAS, 0.0)[:, None, None, :]).astype(dtype)


def _encode_stack(params, cfg, stack: str, n_layers: int, ids: np.ndarray, rng, train) -> ad.Tensor:
    x = _embed(params, cfg, ids, rng, train)
    bias = _key_pad_bias(ids, x.data.dtype)
    for i in range(n_layers):
        pre = f"{stack}{i}"
        n = _ln(params, f"{pre}.self", x)
        x = ad.add(x, _mha(params, f"{pre}.self", n, n, bias, cfg, rng, train))
        x = ad.add(x, _ffn(params, f"{pre}.ffn", _ln(params, f"{pre}.ffn", x), cfg, rng, train))
    return ad.layer_norm(x, params[f"{stack}.lnf_g"], params[f"{stack}.lnf_b"])


def _decode_stack(params, cfg, y_in: np.ndarray, enc: ad.Tensor, src_ids: np.ndarray,
                  rng, train) -> ad.Tensor:
    x = _embed(params, cfg, y_in, rng, train)
    T = y_in.shape[-1]
    dtype = x.data.dtype
    causal = np.where(np.arange(T)[None, :] > np.arange(T)[:, None], NEG_BIAS, 0.0)
    self_bias = (causal[None, None, :, :] + _key_pad_bias(y_in, dtype)).astype(dtype)
    cross_bias = _key_pad_bias(src_ids, dtype)
    for i in range(cfg.n_dec_layers):
        pre = f"dec{i}"
        n = _ln(params, f"{pre}.self", x)
        x = ad.add(x, _mha(params, f"{pre}.self", n, n, self_bias, cfg, rng, train))
        x = ad.add(x, _mha(params, f"{pre}.cross", _ln(params, f"{pre}.cross", x),
                           enc, cross_bias, cfg, rng, train))
        x = ad.add(x, _ffn(params, f"{pre}.ffn", _ln(params, f"{pre}.ffn", x), cfg, rng, train))
    return ad.layer_norm(x, params["dec.lnf_g"], params["dec.lnf_b"])


# ---------------------------------------------------------------------------
# TM memory batching
# ---------------------------------------------------------------------------

@dataclass
class MemoryBatch:
    """Per-TM token sequences plus flat per-example pools over their tokens."""

    seq_ids: np.ndarray       # (Nseq, L) "x_tm <sep> y_tm", PAD-padded
    pool_seq: np.ndarray      # (B, M) sequence index per pooled token
    pool_pos: np.ndarray      # (B, M) position within the sequence
    pool_tok: np.ndarray      # (B, M) token id (copy candidates)
    pool_valid: np.ndarray    # (B, M) bool
    pool_is_tgt: np.ndarray   # (B, M) bool, True on y_tm tokens
    has_tm: np.ndarray        # (B,) bool

    @property
    def empty(self) -> bool:
        return self.seq_ids.shape[0] == 0


def build_memory_batch(tm_lists: Sequence[Sequence[tuple[tuple, tuple]]], sep_id: int,
                       max_len: int) -> MemoryBatch:
    """Lay out each example's TM pairs as separate encoder sequences.

    Pools index every x_tm and y_tm token (the separator is excluded);
    invalid slots point at (0, 0) and are masked.
    """
    B = len(tm_lists)
    seqs: list[tuple[int, ...]] = []
    per_ex: list[list[tuple[int, int, int, bool]]] = []  # (seq, pos, tok, is_tgt)
    for tms in tm_lists:
        slots: list[tuple[int, int, int, bool]] = []
        for src, tgt in tms:
            seq = tuple(src) + (sep_id,) + tuple(tgt)
            if len(seq) > max_len:
                raise DataError(f"TM sequence length {len(seq)} exceeds max_len {max_len}")
            si = len(seqs)
            seqs.append(seq)
            for j, tok in enumerate(src):
                slots.append((si, j, tok, False))
            for j, tok in enumerate(tgt):
                slots.append((si, len(src) + 1 + j, tok, True))
        per_ex.append(slots)

    M = max((len(s) for s in per_ex), default=0)
    M = max(M, 1)
    L = max((len(s) for s in seqs), default=1)
    seq_ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        seq_ids[i, : len(s)] = s
    pool_seq = np.zeros((B, M), dtype=np.int64)
    pool_pos = np.zeros((B, M), dtype=np.int64)
    pool_tok = np.zeros((B, M), dtype=np.int64)
    pool_valid = np.zeros((B, M), dtype=bool)
    pool_is_tgt = np.zeros((B, M), dtype=bool)
    for b, slots in enumerate(per_ex):
        for m, (si, pos, tok, is_tgt) in enumerate(slots):
            pool_seq[b, m] = si
            pool_pos[b, m] = pos
            pool_tok[b, m] = tok
            pool_valid[b, m] = True
            pool_is_tgt[b, m] = is_tgt
    return MemoryBatch(
        seq_ids=seq_ids,
        pool_seq=pool_seq,
        pool_pos=pool_pos,
        pool_tok=pool_tok,
        pool_valid=pool_valid,
        pool_is_tgt=pool_is_tgt,
        has_tm=np.asarray([len(s) > 0 for s in per_ex], dtype=bool),
    )


def build_concat_source(x: Sequence[int], tms: Sequence[tuple[tuple, tuple]], sep_id: int,
                        max_len: int) -> tuple[int, ...]:
    """Input layout for the single-encoder model: x <sep> x_tm <sep> y_tm <sep> ..."""
    out = list(x) + [sep_id]
    for src, tgt in tms:
        out.extend(src)
        out.append(sep_id)
        out.extend(tgt)
        out.append(sep_id)
    if len(out) > max_len:
        raise DataError(
            f"concatenated input length {len(out)} exceeds max_len {max_len} "
            f"(source {len(x)}, {len(tms)} TMs)"
        )
    return tuple(out)


# ---------------------------------------------------------------------------
# Forwards
# ---------------------------------------------------------------------------

def dual_encode_memory(params, cfg: ModelConfig, mem: MemoryBatch, rng=None, train=False) -> ad.Tensor:
    """Contextual encodings for every pooled TM token: (B, M, D)."""
    enc = _encode_stack(params, cfg, "mem", cfg.n_mem_layers, mem.seq_ids, rng, train)
    return ad.index_select2(enc, mem.pool_seq, mem.pool_pos)


def tm_attention_scores(h: ad.Tensor, pool: ad.Tensor, w_tm: ad.Tensor) -> ad.Tensor:
    """Bilinear attention scores of the decoder state over TM token encodings."""
    return ad.matmul(ad.matmul(h, w_tm), ad.swap_last(pool))  # (B, T, M)


def masked_attention(scores: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Softmax over the slots where mask holds."""
    bias = np.where(mask, 0.0, NEG_BIAS)[:, None, :].astype(scores.data.dtype)
    return ad.softmax(ad.add(scores, ad.Tensor(bias)), axis=-1)


def tm_attention(h: ad.Tensor, pool: ad.Tensor, w_tm: ad.Tensor,
                 valid: np.ndarray) -> ad.Tensor:
    """Bilinear cross attention of the decoder state over TM token encodings."""
    if not valid.any():
        raise DataError("tm_attention needs at least one valid TM token")
    return masked_attention(tm_attention_scores(h, pool, w_tm), valid)


def copy_distribution(alpha: ad.Tensor, token_ids: np.ndarray, vocab_size: int,
                      is_tgt: np.ndarray | None = None) -> ad.Tensor:
    """Scatter attention mass onto the vocabulary.

    When `is_tgt` is given, only target-side TM tokens receive mass and
    the result is renormalized over that side (source-side tokens keep
    their attention but contribute nothing to the vocabulary).
    """
    if is_tgt is None:
        return ad.scatter_vocab(alpha, token_ids, vocab_size)
    gate_mask = ad.Tensor(is_tgt[:, None, :].astype(alpha.data.dtype))
    alpha_tgt = ad.mul(alpha, gate_mask)
    mass = ad.clip_min(ad.tsum(alpha_tgt, axis=-1, keepdims=True), GATE_FLOOR)
    return ad.div(ad.scatter_vocab(alpha_tgt, token_ids, vocab_size), mass)


def mix_gate(lam: ad.Tensor, p_nmt: ad.Tensor, p_tm: ad.Tensor) -> ad.Tensor:
    """(1 - lam) * p_nmt + lam * p_tm; exact at the endpoints."""
    return ad.add(ad.mul(ad.sub(1.0, lam), p_nmt), ad.mul(lam, p_tm))


def gate_and_mix(h_tz: ad.Tensor, p_nmt: ad.Tensor, p_tm: ad.Tensor,
                 gate_w: ad.Tensor, gate_b: ad.Tensor,
                 has_tm: np.ndarray | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    """Mix generator and copy distributions through the learned gate.

    The gate is the sigmoid of a linear map of the contextualized TM
    state; rows flagged TM-less in `has_tm` have it forced to zero.
    Returns (mixture, gate).
    """
    lam = ad.sigmoid(ad.add(ad.matmul(h_tz, gate_w), gate_b))
    if has_tm is not None:
        lam = ad.mul(lam, ad.Tensor(has_tm[:, None, None].astype(lam.data.dtype)))
    return mix_gate(lam, p_nmt, p_tm), lam


def forward_vanilla(params, cfg: ModelConfig, x_ids: np.ndarray, y_in: np.ndarray,
                    rng=None, train=False) -> DecoderState:
    enc = _encode_stack(params, cfg, "src", cfg.n_src_layers, x_ids, rng, train)
    h = _decode_stack(params, cfg, y_in, enc, x_ids, rng, train)
    logits = ad.add(ad.matmul(h, params["out_w"]), params["out_b"])
    p = ad.softmax(logits, axis=-1)
    return DecoderState(p=p, p_nmt=p, h=h, logits=logits)


def forward_single_enc(params, cfg: ModelConfig, concat_ids: np.ndarray, y_in: np.ndarray,
                       rng=None, train=False) -> DecoderState:
    return forward_vanilla(params, cfg, concat_ids, y_in, rng, train)


def forward_dual(params, cfg: ModelConfig, x_ids: np.ndarray, mem: MemoryBatch | None,
                 y_in: np.ndarray, rng=None, train=False) -> DecoderState:
    enc = _encode_stack(params, cfg, "src", cfg.n_src_layers, x_ids, rng, train)
    h = _decode_stack(params, cfg, y_in, enc, x_ids, rng, train)
    logits = ad.add(ad.matmul(h, params["out_w"]), params["out_b"])
    p_nmt = ad.softmax(logits, axis=-1)
    if mem is None or mem.empty:
        # no TM anywhere in the batch: the gate is forced shut
        return DecoderState(p=p_nmt, p_nmt=p_nmt, h=h, logits=logits)
    pool = dual_encode_memory(params, cfg, mem, rng, train)
    scores = tm_attention_scores(h, pool, params["tm.w"])
    alpha = masked_attention(scores, mem.pool_valid)
    h_tz = ad.matmul(ad.matmul(alpha, pool), params["tm.h"])
    # copy weights renormalize over target-side slots; a second masked softmax
    # of the same scores keeps that exact at any score magnitude
    alpha_copy = masked_attention(scores, mem.pool_valid & mem.pool_is_tgt)
    p_tm = copy_distribution(alpha_copy, mem.pool_tok, cfg.vocab_size)
    p, lam = gate_and_mix(h_tz, p_nmt, p_tm, params["gate.w"], params["gate.b"],
                          has_tm=mem.has_tm)
    return DecoderState(p=p, p_nmt=p_nmt, h=h, logits=logits, p_tm=p_tm, lam=lam,
                        h_tz=h_tz, alpha=alpha)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, ad.Tensor]
    config: ModelConfig
    meta: dict


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = dict(ckpt.meta)
    meta["config"] = asdict(ckpt.config)
    ad.save_arrays(path, {k: v.data for k, v in ckpt.params.items()}, meta)


def load_checkpoint(path: str | Path, vocab: Vocab | None = None) -> Checkpoint:
    arrays, meta = ad.load_arrays(path)
    cfg = ModelConfig(**meta.pop("config"))
    if vocab is not None and meta.get("vocab_hash") not in (None, vocab.content_hash()):
        raise DataError(f"{path}: vocab mismatch with checkpoint (hash differs)")
    params = {k: ad.parameter(v, dtype=v.dtype) for k, v in arrays.items()}
    return Checkpoint(params=params, config=cfg, meta=meta)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def retrieve_training_tms(
    enc_corpus: ParallelCorpus,
    index: RetrievalIndex,
    k: int,
    pool: int,
    same_store: bool,
) -> list[TmSet]:
    """Top-k TMs per training pair with self-exclusion.

    The pair's own id (when the datastore is the training corpus) and
    any token-identical source are excluded so the model cannot read off
    its own target.
    """
    out = []
    for p in enc_corpus:
        out.append(
            retrieve_topk(
                index,
                p.source,
                k,
                exclude_pair_id=p.pair_id if same_store else None,
                exclude_exact=True,
                pool=pool,
            )
        )
    return out


def _presentations(mode: str, n_pairs: int, tms: list[TmSet] | None, k: int):
    """Expand pairs into per-epoch training presentations."""
    if mode == "none":
        return [(i, ()) for i in range(n_pairs)]
    assert tms is not None
    if mode == "topk":
        return [(i, tuple(range(len(tms[i])))) for i in range(n_pairs)]
    if mode == "single_multi":
        out = []
        for i in range(n_pairs):
            for r in range(k):
                out.append((i, (r,) if r < len(tms[i]) else ()))
            out.append((i, ()))
        return out
    raise DataError(f"unknown training mode '{mode}'")


def train(
    arch: str,
    corpus: ParallelCorpus,
    mode: str,
    config: ModelConfig | None,
    train_config: TrainConfig,
    seed: int,
    vocab: Vocab | None = None,
    datastore: ParallelCorpus | None = None,
    verbose: bool = False,
) -> Checkpoint:
    """Teacher-forced training with Adam and warmup + inverse-sqrt decay.

    mode "none" always presents an empty TM set; "topk" conditions on
    all retrieved TMs jointly; "single_multi" presents each pair once
    per TM rank plus once with an empty TM (k_retrieval + 1 passes, so
    six per epoch at the default k=5; missing ranks fall back to empty).
    """
    if arch not in ARCHITECTURES:
        raise DataError(f"unknown architecture '{arch}'")
    if mode not in TRAIN_MODES:
        raise DataError(f"unknown training mode '{mode}'")
    if vocab is None:
        vocab = build_vocab(((p.source, p.target) for p in corpus), extra=(SEP_TOKEN,))
    cfg = config or ModelConfig(vocab_size=len(vocab), arch=arch)
    if cfg.vocab_size != len(vocab) or cfg.arch != arch:
        cfg = replace(cfg, vocab_size=len(vocab), arch=arch)

    tc = train_config
    enc = encode_corpus(corpus, vocab)
    tms: list[TmSet] | None = None
    if mode != "none":
        store = enc if datastore is None else encode_corpus(datastore, vocab)
        index = build_index(store)
        tms = retrieve_training_tms(enc, index, tc.k_retrieval, tc.pool, datastore is None)

    params = init_params(cfg, seed)
    state = ad.adam_init(params, lr=tc.base_lr)
    order_rng = substream(seed, "order")
    drop_rng = substream(seed, "dropout")
    sep = vocab.sep_id if arch != "vanilla" else None

    items = _presentations(mode, len(enc), tms, tc.k_retrieval)
    step = 0
    history: list[float] = []
    for epoch in range(tc.epochs):
        perm = order_rng.permutation(len(items))
        total, count = 0.0, 0
        for lo in range(0, len(perm), tc.batch_size):
            chunk = [items[j] for j in perm[lo : lo + tc.batch_size]]
            loss = _train_step(params, cfg, enc, tms, chunk, tc, state, step, sep, drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            total += loss * len(chunk)
            count += len(chunk)
            step += 1
        history.append(total / max(count, 1))
        if verbose:
            print(f"epoch {epoch + 1}/{tc.epochs} loss {history[-1]:.4f}", file=sys.stderr)

    meta = {
        "arch": arch,
        "mode": mode,
        "vocab_hash": vocab.content_hash(),
        "seed": seed,
        "k_retrieval": tc.k_retrieval,
        "pool": tc.pool,
        "self_exclusion": mode != "none",
        "history": history,
    }
    return Checkpoint(params=params, config=cfg, meta=meta)


def _train_step(params, cfg, enc, tms, chunk, tc, state, step, sep, drop_rng) -> float:
    y_in = _pad_batch([(BOS,) + enc[i].target for i, _ in chunk])
    y_out = _pad_batch([enc[i].target + (EOS,) for i, _ in chunk])
    tm_sel = [
        [(tms[i][r].source, tms[i][r].target) for r in ranks] if tms is not None else []
        for i, ranks in chunk
    ]
    if cfg.arch == "dual_enc":
        x = _pad_batch([enc[i].source for i, _ in chunk])
        mem = build_memory_batch(tm_sel, sep, cfg.max_len)
        out = forward_dual(params, cfg, x, mem, y_in, rng=drop_rng, train=True)
        loss_t = ad.nll_from_probs(out.p, y_out, tc.label_smoothing, PAD)
    elif cfg.arch == "single_enc":
        x = _pad_batch([
            build_concat_source(enc[i].source, sel, sep, cfg.max_len)
            for (i, _), sel in zip(chunk, tm_sel)
        ])
        out = forward_single_enc(params, cfg, x, y_in, rng=drop_rng, train=True)
        loss_t = ad.cross_entropy_label_smoothed(out.logits, y_out, tc.label_smoothing, PAD)
    else:
        x = _pad_batch([enc[i].source for i, _ in chunk])
        out = forward_vanilla(params, cfg, x, y_in, rng=drop_rng, train=True)
        loss_t = ad.cross_entropy_label_smoothed(out.logits, y_out, tc.label_smoothing, PAD)
    ad.zero_grads(params.values())
    ad.backward(loss_t, params=params.values())
    grads = {k: p.grad for k, p in params.items()}
    grads = ad.clip_global_norm(grads, tc.clip_norm)
    ad.adam_step(params, grads, state, lr=ad.lr_inverse_sqrt(step + 1, tc.base_lr, tc.warmup))
    return float(loss_t.data)
