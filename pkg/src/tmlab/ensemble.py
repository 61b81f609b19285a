"""Inference-time prediction modes and the weighted-ensemble fine-tune.

Modes over a TM-augmented checkpoint:

  base      one forward conditioned jointly on all retrieved TMs.
  single    one forward conditioned on a single TM (or none).
  average   uniform mixture of the K single-TM forwards; reuses the
            single-TM checkpoint unchanged.
  weighted  softmax-weighted mixture; per-TM scores come from a small
            two-layer network over the plain decoder state and the
            TM-contextualized state, fine-tuned jointly with the backbone.

Mixtures anchor their summation on the first component, so K identical
components reproduce the single prediction bit for bit, and uniform
weights reproduce the average ensemble bit for bit. Components are
mixed in ascending k order; the result is renormalized only when the
total drifts past 1e-9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tmlab import autodiff as ad
from tmlab.corpus import BOS, EOS, PAD, ParallelCorpus, Vocab, encode_corpus
from tmlab.errors import DataError, NumericError
from tmlab.model import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    build_concat_source,
    build_memory_batch,
    forward_dual,
    forward_single_enc,
    forward_vanilla,
    _pad_batch,
    _xavier,
)
from tmlab.retrieval import RetrievalIndex, TmPair, build_index, retrieve_topk
from tmlab.seeding import substream

PREDICT_MODES = ("vanilla", "base", "single", "average", "weighted")

TmIds = tuple[tuple[int, ...], tuple[int, ...]]  # (source ids, target ids)


def tm_ids(z: TmPair) -> TmIds:
    return tuple(z.source), tuple(z.target)


# ---------------------------------------------------------------------------
# Teacher-forced sequence distributions (single example, no grad)
# ---------------------------------------------------------------------------

def _seq_state(ckpt: Checkpoint, sep_id: int | None, x: Sequence[int],
               tms: Sequence[TmIds], y_in: Sequence[int]):
    cfg = ckpt.config
    y = np.asarray([list(y_in)], dtype=np.int64)
    with ad.no_grad():
        if cfg.arch == "dual_enc":
            xb = np.asarray([list(x)], dtype=np.int64)
            mem = build_memory_batch([list(tms)], sep_id, cfg.max_len) if tms else None
            return forward_dual(ckpt.params, cfg, xb, mem, y)
        if cfg.arch == "single_enc":
            concat = build_concat_source(x, tms, sep_id, cfg.max_len)
            xb = np.asarray([list(concat)], dtype=np.int64)
            return forward_single_enc(ckpt.params, cfg, xb, y)
        if tms:
            raise DataError("a vanilla checkpoint cannot condition on TMs")
        xb = np.asarray([list(x)], dtype=np.int64)
        return forward_vanilla(ckpt.params, cfg, xb, y)


def _seq_probs(ckpt, sep_id, x, tms, y_in) -> np.ndarray:
    return _seq_state(ckpt, sep_id, x, tms, y_in).p.data[0].astype(np.float64)


def _multi_single_states(ckpt: Checkpoint, sep_id: int | None, x: Sequence[int],
                         Z: Sequence[TmIds], y_in: Sequence[int]):
    """All K single-TM forwards of one example as one batch of K rows.

    Rows are bitwise identical to separate single-example forwards: the
    memory pool pads with exactly-masked slots and per-row reductions
    never mix rows.
    """
    cfg = ckpt.config
    K = len(Z)
    if cfg.arch == "dual_enc":
        xb = np.repeat(np.asarray([list(x)], dtype=np.int64), K, axis=0)
        yb = np.repeat(np.asarray([list(y_in)], dtype=np.int64), K, axis=0)
        mem = build_memory_batch([[z] for z in Z], sep_id, cfg.max_len)
        with ad.no_grad():
            return forward_dual(ckpt.params, cfg, xb, mem, yb)
    if cfg.arch == "single_enc":
        concats = [build_concat_source(x, [z], sep_id, cfg.max_len) for z in Z]
        xb = _pad_batch(concats)
        yb = np.repeat(np.asarray([list(y_in)], dtype=np.int64), K, axis=0)
        with ad.no_grad():
            return forward_single_enc(ckpt.params, cfg, xb, yb)
    raise DataError("ensembles need a TM-capable checkpoint")


def _softmax64(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def mix_components(dists: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mixture of K stacked distributions.

    dists: (K, T, V); weights: (T, K) summing to 1 per step. Summation
    is anchored on component 0, so identical components pass through
    untouched. Renormalizes defensively when the total drifts beyond
    what float32-normalized components can account for.
    """
    base = dists[0]
    out = base.copy()
    for k in range(dists.shape[0]):
        out = out + weights[:, k : k + 1] * (dists[k] - base)
    total = out.sum(axis=-1, keepdims=True)
    drift = np.abs(total - 1.0) > 1e-6
    if drift.any():
        rows = drift[:, 0]
        out[rows] = out[rows] / total[rows]
    return out


def base_seq_probs(ckpt, sep_id, x, Z: Sequence[TmIds], y_in) -> np.ndarray:
    """Joint conditioning on the whole TM set (empty set degrades to vanilla)."""
    return _seq_probs(ckpt, sep_id, x, list(Z), y_in)


def single_seq_probs(ckpt, sep_id, x, z: TmIds | None, y_in) -> np.ndarray:
    return _seq_probs(ckpt, sep_id, x, [z] if z is not None else [], y_in)


def average_seq_probs(ckpt, sep_id, x, Z: Sequence[TmIds], y_in) -> np.ndarray:
    if not Z:
        raise DataError("average ensemble needs at least one TM; use vanilla mode instead")
    st = _multi_single_states(ckpt, sep_id, x, Z, y_in)
    dists = st.p.data.astype(np.float64)                    # (K, T, V)
    weights = _softmax64(np.zeros((dists.shape[1], len(Z))))
    return mix_components(dists, weights)


def weighted_seq_probs(ckpt, weightnet, sep_id, x, Z: Sequence[TmIds], y_in,
                       return_weights: bool = False):
    if not Z:
        raise DataError("weighted ensemble needs at least one TM; use vanilla mode instead")
    d_model = ckpt.config.d_model
    if weightnet["wn.w2"].data.shape[0] != d_model:
        raise DataError(
            f"weightnet d_model {weightnet['wn.w2'].data.shape[0]} does not match "
            f"checkpoint d_model {d_model}"
        )
    st = _multi_single_states(ckpt, sep_id, x, Z, y_in)
    dists = st.p.data.astype(np.float64)                    # (K, T, V)
    # memory enters after the decoder stack, so any row's decoder state is
    # the plain one; the single-encoder variant needs an empty-TM forward
    if ckpt.config.arch == "dual_enc":
        h_t = st.h.data[:1]
    else:
        h_t = _seq_state(ckpt, sep_id, x, [], y_in).h.data
    h_tk = np.transpose(_tm_state(st, ckpt.config.arch).data, (1, 0, 2))[None]  # (1,T,K,D)
    with ad.no_grad():
        scores = weightnet_scores(weightnet, ad.Tensor(h_t), ad.Tensor(h_tk))
    weights = _softmax64(scores.data[0])                    # (T, K)
    mixed = mix_components(dists, weights)
    return (mixed, weights) if return_weights else mixed


def _tm_state(state, arch: str):
    """Decoding state summarizing one TM: the contextualized TM representation
    for the dual encoder, the (TM-aware) decoder state for the single encoder."""
    if arch == "dual_enc":
        if state.h_tz is None:
            raise DataError("dual forward carried no TM context")
        return state.h_tz
    return state.h


def mode_seq_probs(mode: str, ckpt, sep_id, x, Z: Sequence[TmIds], y_in,
                   weightnet=None) -> np.ndarray:
    if mode == "vanilla":
        return _seq_probs(ckpt, sep_id, x, [], y_in)
    if mode == "base":
        return base_seq_probs(ckpt, sep_id, x, Z, y_in)
    if mode == "single":
        return single_seq_probs(ckpt, sep_id, x, Z[0] if Z else None, y_in)
    if mode == "average":
        return average_seq_probs(ckpt, sep_id, x, Z, y_in)
    if mode == "weighted":
        if weightnet is None:
            raise DataError("weighted mode needs a weightnet")
        return weighted_seq_probs(ckpt, weightnet, sep_id, x, Z, y_in)
    raise DataError(f"unknown prediction mode '{mode}'")


# Step-level views: distribution over the next token given a target prefix.

def predict_base(ckpt, sep_id, x, Z, y_prefix) -> np.ndarray:
    return base_seq_probs(ckpt, sep_id, x, Z, (BOS,) + tuple(y_prefix))[-1]


def predict_single(ckpt, sep_id, x, z, y_prefix) -> np.ndarray:
    return single_seq_probs(ckpt, sep_id, x, z, (BOS,) + tuple(y_prefix))[-1]


def predict_average(ckpt, sep_id, x, Z, y_prefix) -> np.ndarray:
    return average_seq_probs(ckpt, sep_id, x, Z, (BOS,) + tuple(y_prefix))[-1]


def predict_weighted(ckpt, weightnet, sep_id, x, Z, y_prefix) -> np.ndarray:
    return weighted_seq_probs(ckpt, weightnet, sep_id, x, Z, (BOS,) + tuple(y_prefix))[-1]


# ---------------------------------------------------------------------------
# Weighting network
# ---------------------------------------------------------------------------

def init_weightnet(d_model: int, seed: int, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Two linear layers with residual + layer norm, zero-initialized score head.

    Zero scores make the initial weighted ensemble coincide exactly with
    the average ensemble.
    """
    rng = substream(seed, "weightnet")
    p = {
        "wn.w1": _xavier(rng, 2 * d_model, d_model, dtype),
        "wn.b1": np.zeros(d_model, dtype=dtype),
        "wn.w2": _xavier(rng, d_model, d_model, dtype),
        "wn.b2": np.zeros(d_model, dtype=dtype),
        "wn.ln_g": np.ones(d_model, dtype=dtype),
        "wn.ln_b": np.zeros(d_model, dtype=dtype),
        "wn.score_w": np.zeros((d_model, 1), dtype=dtype),
        "wn.score_b": np.zeros(1, dtype=dtype),
    }
    return {k: ad.parameter(v, dtype=dtype) for k, v in p.items()}


def weightnet_scores(wn, h_t: ad.Tensor, h_tk: ad.Tensor) -> ad.Tensor:
    """Per-TM scalar scores: h_t (B,T,D) broadcast against h_tk (B,T,K,D)."""
    B, T, K, D = h_tk.shape
    ht = ad.broadcast_to(ad.reshape(h_t, (B, T, 1, D)), (B, T, K, D))
    u = ad.concat([ht, h_tk], axis=-1)
    h1 = ad.relu(ad.add(ad.matmul(u, wn["wn.w1"]), wn["wn.b1"]))
    h2 = ad.add(ad.matmul(h1, wn["wn.w2"]), wn["wn.b2"])
    o = ad.layer_norm(ad.add(h1, h2), wn["wn.ln_g"], wn["wn.ln_b"])
    s = ad.add(ad.matmul(o, wn["wn.score_w"]), wn["wn.score_b"])
    return ad.reshape(s, (B, T, K))


def save_weightnet(wn, path: str | Path, meta: dict | None = None) -> None:
    ad.save_arrays(path, {k: v.data for k, v in wn.items()}, meta or {})


def load_weightnet(path: str | Path) -> tuple[dict[str, ad.Tensor], dict]:
    arrays, meta = ad.load_arrays(path)
    return {k: ad.parameter(v, dtype=v.dtype) for k, v in arrays.items()}, meta


# ---------------------------------------------------------------------------
# Weighted-ensemble fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    weightnet: dict[str, ad.Tensor]
    curve: list[tuple[int, float]]   # (update, held-out loss)
    selected_update: int


def finetune_weighted(
    ckpt: Checkpoint,
    valid_corpus: ParallelCorpus,
    vocab: Vocab,
    datastore: ParallelCorpus,
    updates: int = 2000,
    seed: int = 0,
    k: int = 5,
    batch_size: int = 16,
    lr: float = 2e-4,
    label_smoothing: float = 0.1,
    eval_every: int | None = None,
) -> FinetuneResult:
    """Fine-tune backbone plus weighting network on 90% of the valid data.

    The remaining 10% selects the checkpoint: the parameters minimizing
    held-out loss over the recorded curve (update 0 included) win.
    """
    if len(valid_corpus) < 10:
        raise DataError(f"valid corpus has {len(valid_corpus)} pairs; need at least 10")
    if ckpt.config.arch not in ("dual_enc", "single_enc"):
        raise DataError("weighted ensemble needs a TM-capable checkpoint")
    sep = vocab.sep_id
    cfg = ckpt.config
    # fine-tune a private copy; the caller's single-TM checkpoint stays usable
    ckpt = Checkpoint(
        params={k_: ad.parameter(p.data.copy(), dtype=p.data.dtype) for k_, p in ckpt.params.items()},
        config=cfg,
        meta=dict(ckpt.meta),
    )
    enc_valid = encode_corpus(valid_corpus, vocab)
    index = build_index(encode_corpus(datastore, vocab))

    perm = substream(seed, "valid_split").permutation(len(enc_valid))
    n_fit = max(1, int(round(0.9 * len(enc_valid))))
    fit_ids = perm[:n_fit]
    held_ids = perm[n_fit:]
    if len(held_ids) == 0:
        fit_ids, held_ids = perm[:-1], perm[-1:]

    tms = {int(i): retrieve_topk(index, enc_valid[int(i)].source, k) for i in perm}
    wn = init_weightnet(cfg.d_model, seed)
    all_params = dict(ckpt.params)
    all_params.update(wn)
    state = ad.adam_init(all_params, lr=lr)
    order_rng = substream(seed, "order")
    drop_rng = substream(seed, "dropout")

    def batch_loss(ids: Sequence[int], train: bool) -> ad.Tensor:
        rows = [enc_valid[int(i)] for i in ids]
        x = _pad_batch([r.source for r in rows])
        y_in = _pad_batch([(BOS,) + r.target for r in rows])
        y_out = _pad_batch([r.target + (EOS,) for r in rows])
        rng = drop_rng if train else None
        state0 = forward_dual(ckpt.params, cfg, x, None, y_in, rng=rng, train=train)
        p_parts, h_parts = [], []
        B, T = y_in.shape
        for kk in range(k):
            sel = [
                [(tms[int(i)][kk].source, tms[int(i)][kk].target)] if kk < len(tms[int(i)]) else []
                for i in ids
            ]
            mem = build_memory_batch(sel, sep, cfg.max_len)
            st = forward_dual(ckpt.params, cfg, x, mem, y_in, rng=rng, train=train)
            p_parts.append(ad.reshape(st.p, (B, T, 1, cfg.vocab_size)))
            h_tk = st.h_tz if st.h_tz is not None else st.h
            h_parts.append(ad.reshape(h_tk, (B, T, 1, cfg.d_model)))
        p_stack = ad.concat(p_parts, axis=2)            # (B, T, K, V)
        h_stack = ad.concat(h_parts, axis=2)            # (B, T, K, D)
        w = ad.softmax(weightnet_scores(wn, state0.h, h_stack), axis=-1)
        mixed = ad.tsum(ad.mul(ad.reshape(w, (B, T, k, 1)), p_stack), axis=2)
        return ad.nll_from_probs(mixed, y_out, label_smoothing, PAD)

    def heldout_loss() -> float:
        with ad.no_grad():
            total, n = 0.0, 0
            for lo in range(0, len(held_ids), batch_size):
                ids = held_ids[lo : lo + batch_size]
                total += float(batch_loss(ids, train=False).data) * len(ids)
                n += len(ids)
        return total / n

    eval_every = eval_every or max(1, updates // 10)
    curve = [(0, heldout_loss())]
    best = (curve[0][1], 0, {kk: p.data.copy() for kk, p in all_params.items()})
    step = 0
    while step < updates:
        epoch_order = order_rng.permutation(fit_ids)
        for lo in range(0, len(epoch_order), batch_size):
            if step >= updates:
                break
            ids = epoch_order[lo : lo + batch_size]
            loss = batch_loss(ids, train=True)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite fine-tune loss at update {step}")
            ad.zero_grads(all_params.values())
            ad.backward(loss, params=all_params.values())
            grads = ad.clip_global_norm({kk: p.grad for kk, p in all_params.items()}, 1.0)
            ad.adam_step(all_params, grads, state)
            step += 1
            if step % eval_every == 0 or step == updates:
                hl = heldout_loss()
                curve.append((step, hl))
                if hl < best[0]:
                    best = (hl, step, {kk: p.data.copy() for kk, p in all_params.items()})

    for kk, p in all_params.items():
        p.data = best[2][kk]
    meta = dict(ckpt.meta)
    meta.update({"finetuned_updates": updates, "finetune_seed": seed,
                 "selected_update": best[1]})
    return FinetuneResult(
        checkpoint=Checkpoint(params=ckpt.params, config=cfg, meta=meta),
        weightnet=wn,
        curve=curve,
        selected_update=best[1],
    )


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

StepFn = Callable[[tuple[int, ...]], np.ndarray]


def make_step_fn(mode: str, ckpt, sep_id, x, Z, weightnet=None) -> StepFn:
    def step(prefix: tuple[int, ...]) -> np.ndarray:
        if mode == "vanilla":
            return _seq_probs(ckpt, sep_id, x, [], (BOS,) + prefix)[-1]
        if mode == "single":
            return predict_single(ckpt, sep_id, x, Z[0] if Z else None, prefix)
        if mode == "base":
            return predict_base(ckpt, sep_id, x, Z, prefix)
        if mode == "average":
            if not Z:
                return predict_single(ckpt, sep_id, x, None, prefix)
            return predict_average(ckpt, sep_id, x, Z, prefix)
        if mode == "weighted":
            if not Z:
                return predict_single(ckpt, sep_id, x, None, prefix)
            return predict_weighted(ckpt, weightnet, sep_id, x, Z, prefix)
        raise DataError(f"unknown prediction mode '{mode}'")

    return step


def sequence_score(step_fn: StepFn, tokens: tuple[int, ...]) -> float:
    """Length-normalized log-probability of `tokens` followed by EOS."""
    full = tuple(tokens) + (EOS,)
    total = 0.0
    for t, tok in enumerate(full):
        dist = step_fn(full[:t])
        total += math.log(max(float(dist[tok]), 1e-12))
    return total / len(full)


def greedy_decode(step_fn: StepFn, max_new: int) -> tuple[int, ...]:
    out: tuple[int, ...] = ()
    for _ in range(max_new):
        tok = int(np.argmax(step_fn(out)))
        if tok == EOS:
            break
        out = out + (tok,)
    return out


def beam_decode(step_fn: StepFn, width: int, max_new: int) -> tuple[tuple[int, ...], float]:
    """Beam search scored by length-normalized log-probability.

    Candidates are expanded in cumulative log-prob order with ties broken
    toward lower token ids, so beam(1) reproduces greedy decoding.
    """
    if width < 1:
        raise DataError(f"beam width must be >= 1, got {width}")
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    done: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_new):
        if not live:
            break
        cands: list[tuple[float, tuple[int, ...]]] = []
        for tokens, score in live:
            dist = step_fn(tokens)
            logp = np.log(np.maximum(dist.astype(np.float64), 1e-300))
            top = np.lexsort((np.arange(logp.size), -logp))[:width]
            for tok in top:
                cands.append((score + float(logp[tok]), tokens + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tokens in cands[:width]:
            if tokens[-1] == EOS:
                done.append((tokens[:-1], score / len(tokens)))
            else:
                live.append((tokens, score))
    for tokens, score in live:
        done.append((tokens, score / max(len(tokens) + 1, 1)))
    if not done:
        return (), float("-inf")
    done.sort(key=lambda c: (-c[1], c[0]))
    return done[0]


def decode(
    mode: str,
    ckpt: Checkpoint,
    x: Sequence[int],
    index: RetrievalIndex,
    k: int,
    sep_id: int | None,
    strategy: str = "greedy",
    beam_width: int = 4,
    weightnet=None,
    max_new: int | None = None,
) -> tuple[tuple[int, ...], float]:
    """Translate one encoded source; returns (token ids, normalized score)."""
    Z = [tm_ids(z) for z in retrieve_topk(index, tuple(x), k)] if mode != "vanilla" else []
    step_fn = make_step_fn(mode, ckpt, sep_id, tuple(x), Z, weightnet)
    max_new = max_new or (ckpt.config.max_len - 1)
    if strategy == "greedy":
        tokens = greedy_decode(step_fn, max_new)
        return tokens, sequence_score(step_fn, tokens)
    if strategy == "beam":
        return beam_decode(step_fn, beam_width, max_new)
    raise DataError(f"unknown decoding strategy '{strategy}'")
