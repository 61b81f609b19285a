import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlab.biasvar import decompose
from tmlab.corpus import EOS, SEP_TOKEN, build_vocab, encode_corpus, synth_task
from tmlab.ensemble import mode_seq_probs
from tmlab.errors import DataError
from tmlab.evalmetrics import BleuResult, corpus_bleu, token_ce, token_ce_from_dists
from tmlab.model import ModelConfig, TrainConfig, init_params, train, Checkpoint
from tmlab.corpus import BOS
from tmlab.retrieval import build_index

sentences = st.lists(st.sampled_from("abcdef"), min_size=1, max_size=7)


def test_bleu_identity_is_100():
    h = [["the", "cat", "sat", "on", "the", "mat"]]
    r = corpus_bleu(h, h)
    assert r.score == pytest.approx(100.0, abs=1e-9)
    assert r.brevity_penalty == 1.0
    assert r.precisions == (1.0, 1.0, 1.0, 1.0)


@settings(max_examples=40)
@given(sentences)
def test_bleu_self_identity_any_sentence(s):
    assert corpus_bleu([s], [s]).score == pytest.approx(100.0, abs=1e-9)


def test_bleu_disjoint_is_tiny():
    # corpus-scale totals: smoothing of zero matches leaves a near-zero score
    hyps = [[f"a{i}_{j}" for j in range(8)] for i in range(30)]
    refs = [[f"b{i}_{j}" for j in range(8)] for i in range(30)]
    assert corpus_bleu(hyps, refs).score < 1.0


def test_bleu_hand_computed_fixture():
    """Three-sentence fixture with n-gram counts worked out by hand.

    matches/totals: p1 = 9/10, p2 = 6/7, p3 = 3/4, p4 = 1/1 (order-4 has
    one hypothesis 4-gram, which matches). hyp_len 10, ref_len 11, so
    BP = exp(1 - 11/10).
    """
    hyps = [
        ["the", "cat", "sat", "down"],
        ["a", "dog", "ran"],
        ["big", "red", "ball"],
    ]
    refs = [
        ["the", "cat", "sat", "down"],
        ["a", "dog", "ran", "away"],
        ["the", "red", "ball"],
    ]
    want = math.exp(1 - 11 / 10) * math.exp(
        (math.log(9 / 10) + math.log(6 / 7) + math.log(3 / 4) + math.log(1.0)) / 4
    ) * 100
    got = corpus_bleu(hyps, refs)
    assert got.score == pytest.approx(want, abs=0.01)
    assert got.precisions == pytest.approx((9 / 10, 6 / 7, 3 / 4, 1.0))
    assert got.hyp_len == 10 and got.ref_len == 11


def test_bleu_corpus_level_permutation_invariant():
    hyps = [["a", "b", "c"], ["d", "e"], ["f", "g", "h", "a"]]
    refs = [["a", "b", "x"], ["d", "e"], ["f", "h", "g", "a"]]
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu(hyps[::-1], refs[::-1])
    assert a == b


def test_bleu_smoothing_only_on_zero_matches():
    # bigram matches exist, so p2 stays an exact ratio; 4-grams are absent
    hyps = [["a", "b", "c"]]
    refs = [["a", "b", "d"]]
    r = corpus_bleu(hyps, refs)
    assert r.precisions[0] == pytest.approx(2 / 3)
    assert r.precisions[1] == pytest.approx(1 / 2)
    assert r.precisions[2] == pytest.approx(1 / 2)  # 0 of 1, smoothed to 1/2
    assert r.precisions[3] == pytest.approx(1.0)    # vacuous order
    assert isinstance(r, BleuResult)


def test_bleu_length_mismatch():
    with pytest.raises(DataError):
        corpus_bleu([["a"]], [["a"], ["b"]])


# ---------------------------------------------------------------------------
# Token-level cross entropy
# ---------------------------------------------------------------------------

TINY = dict(d_model=16, n_heads=2, ffn_dim=24, n_src_layers=1, n_mem_layers=1,
            n_dec_layers=1, dropout=0.0, max_len=48)


@pytest.fixture(scope="module")
def tiny_task():
    task = synth_task(n_pairs=40, n_templates=2, lexicon_size=8, seed=6)
    vocab = build_vocab(((p.source, p.target) for p in task.corpus), extra=(SEP_TOKEN,))
    return task, vocab


def test_token_ce_uniform_model_is_ln_vocab(tiny_task):
    task, vocab = tiny_task
    cfg = ModelConfig(vocab_size=len(vocab), arch="vanilla", **TINY)
    ckpt = Checkpoint(params=init_params(cfg, seed=0), config=cfg, meta={})
    nats, ppl = token_ce(ckpt, task.corpus, vocab)
    assert nats == pytest.approx(math.log(len(vocab)), abs=1e-5)
    assert ppl == pytest.approx(len(vocab), rel=1e-4)


def test_token_ce_peaked_dists_go_to_zero():
    dists = np.full((4, 6), 1e-9)
    golds = np.asarray([0, 3, 5, 2])
    dists[np.arange(4), golds] = 1.0
    assert token_ce_from_dists(dists / dists.sum(-1, keepdims=True), golds) < 1e-6


def test_token_ce_nonnegative_and_trained_is_low(tiny_task):
    task, vocab = tiny_task
    cfg = ModelConfig(vocab_size=len(vocab), arch="vanilla", d_model=32, n_heads=2,
                      ffn_dim=48, n_src_layers=1, n_mem_layers=1, n_dec_layers=1,
                      dropout=0.0, max_len=48)
    ck = train("vanilla", task.corpus, "none", cfg,
               TrainConfig(epochs=60, batch_size=16, base_lr=3e-3, warmup=20,
                           label_smoothing=0.0),
               seed=0, vocab=vocab)
    nats, _ = token_ce(ck, task.corpus, vocab)
    assert 0.0 <= nats < 0.35


def test_token_ce_matches_biasvar_loss_exactly(tiny_task):
    """The likelihood metric and the estimator's loss term share definitions."""
    task, vocab = tiny_task
    cfg = ModelConfig(vocab_size=len(vocab), arch="dual_enc", **TINY)
    ck = train("dual_enc", task.corpus, "topk", cfg,
               TrainConfig(epochs=1, batch_size=16, base_lr=1e-3, warmup=5, k_retrieval=2),
               seed=1, vocab=vocab)
    enc = encode_corpus(task.corpus, vocab)
    index = build_index(enc)
    nats, _ = token_ce(ck, task.corpus, vocab, mode="vanilla")

    rows, golds = [], []
    for p in enc:
        rows.append(mode_seq_probs("vanilla", ck, vocab.sep_id, p.source, [], (BOS,) + p.target))
        golds.extend(p.target + (EOS,))
    entry = decompose([np.concatenate(rows)], np.asarray(golds), truncate=10_000)
    assert nats == pytest.approx(entry.loss, abs=1e-9)


def test_token_ce_vocab_guard(tiny_task):
    task, vocab = tiny_task
    cfg = ModelConfig(vocab_size=len(vocab), arch="vanilla", **TINY)
    ckpt = Checkpoint(params=init_params(cfg, seed=0), config=cfg,
                      meta={"vocab_hash": "not-the-right-hash"})
    with pytest.raises(DataError, match="vocab mismatch"):
        token_ce(ckpt, task.corpus, vocab)
