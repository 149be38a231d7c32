import itertools
import json
import math

import numpy as np
import pytest

from bridgenmt import model as M
from bridgenmt.data import make_batch
from bridgenmt.decode import (
    AttentionMatrix,
    BeamStep,
    beam_search,
    default_max_out_len,
    force_decode,
    force_decode_batch,
    greedy_decode,
    greedy_decode_batch,
    hard_align,
    strip_eos,
)
from bridgenmt.errors import InputError
from bridgenmt.model import BOS, EOS, PAD, UNK, ModelConfig, bind, init_params


def tiny(variant="baseline", seed=0, scale=1.5, vt=6):
    cfg = ModelConfig(src_vocab_size=9, tgt_vocab_size=vt, embed_dim=4, hidden_dim=5, variant=variant,
                      dropout_rate=0.0, init_scale=scale)
    return init_params(cfg, seed)


def sequence_logprob(params, src, seq):
    """Teacher-forced model log p(seq | src), stepping the model directly (oracle).

    Banned tokens keep their probability mass: scores are true model
    log-probabilities, as in the training loss.
    """
    src = list(src) + [EOS]
    P = bind(params)
    enc = M.encode(P, [src], [[1] * len(src)])
    s, prev, total = M.decoder_init(P, enc), BOS, 0.0
    for tok in seq:
        out = M.decoder_step(P, s, [prev], enc)
        z = out.logits.value[0]
        assert tok not in (PAD, BOS)
        m = z.max()
        total += z[tok] - m - math.log(np.exp(z - m).sum())
        s, prev = out.s_t, tok
    return total


def enumerate_outputs(vocab, max_len):
    allowed = [t for t in range(vocab) if t not in (PAD, BOS)]
    words = [t for t in allowed if t != EOS]
    for n in range(max_len):
        for body in itertools.product(words, repeat=n):
            yield body + (EOS,)
    yield from itertools.product(words, repeat=max_len)


# ------------------------------------------------------------ exhaustive


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("variant", ["baseline", "target"])
def test_exhaustive_beam_equals_brute_force(seed, variant):
    p = tiny(variant, seed)
    src = [4, 6, 5]
    scored = [(sequence_logprob(p, src, seq), seq) for seq in enumerate_outputs(6, 4)]
    best_score, best_seq = max(scored)
    hyp, _ = beam_search(p, src, beam_size=6 ** 4, max_out_len=4)[0]
    assert hyp.tokens == best_seq
    assert hyp.logprob == pytest.approx(best_score, abs=1e-9)


def test_beam_scores_equal_teacher_forced_scores():
    p = tiny(seed=5)
    for hyp, att in beam_search(p, [4, 5], beam_size=5):
        assert hyp.logprob == pytest.approx(sequence_logprob(p, [4, 5], hyp.tokens), abs=1e-12)
        assert att.shape == (len(hyp.tokens), 3)


# ---------------------------------------------------------- beam vs greedy


def test_beam_one_equals_greedy_on_random_sentences():
    rng = np.random.default_rng(0)
    p = tiny(seed=3, vt=12)
    for _ in range(20):
        src = rng.integers(4, 9, size=rng.integers(1, 7)).tolist()
        g, g_att = greedy_decode(p, src)
        (b, b_att), = beam_search(p, src, beam_size=1)
        assert b.tokens == g.tokens
        assert b.logprob == pytest.approx(g.logprob, abs=1e-12)
        assert np.array_equal(b_att.matrix, g_att.matrix)


def test_width_monotonicity_on_sharpened_models():
    for seed in range(10):
        p = tiny(seed=seed, scale=2.0, vt=10)
        src = [4, 7, 5, 8]
        best = [beam_search(p, src, beam_size=w, max_out_len=6)[0][0].logprob for w in range(1, 9)]
        assert all(b >= a - 1e-12 for a, b in zip(best, best[1:])), best


def test_beam_admissibility_by_frontier_replay():
    for seed in range(5):
        trace: list[BeamStep] = []
        beam_search(tiny(seed=seed, vt=10), [4, 5, 6], beam_size=3, trace=trace)
        assert trace
        for st in trace:
            if st.best_pruned is not None:
                assert min(st.kept) >= st.best_pruned


def test_beam_is_deterministic_and_ranked():
    p = tiny(seed=7, vt=10)
    a = beam_search(p, [4, 6], beam_size=4)
    b = beam_search(p, [4, 6], beam_size=4)
    assert [(h.tokens, h.logprob) for h, _ in a] == [(h.tokens, h.logprob) for h, _ in b]
    scores = [h.logprob for h, _ in a]
    assert scores == sorted(scores, reverse=True)
    assert len(a) <= 4


def test_hypothesis_invariants():
    p = tiny(seed=8, vt=10)
    for hyp, att in beam_search(p, [4, 5, 6, 7], beam_size=6):
        assert len(hyp.attention) == len(hyp.tokens)
        prefix = np.cumsum(hyp.step_logprobs)
        assert all(b <= a for a, b in zip(prefix, prefix[1:]))
        assert prefix[-1] == pytest.approx(hyp.logprob, abs=1e-12)
        assert att.is_valid()
        assert PAD not in hyp.tokens and BOS not in hyp.tokens
        assert hyp.finished == (hyp.tokens[-1] == EOS)


def test_length_norm_ranks_by_mean_logprob():
    p = tiny(seed=9, vt=10)
    ranked = beam_search(p, [4, 5, 6], beam_size=5, length_norm=True)
    means = [h.logprob / len(h.tokens) for h, _ in ranked]
    assert means == sorted(means, reverse=True)


def test_unfinished_hypotheses_are_retired_at_the_limit():
    p = tiny(seed=1)
    p.arrays["out.b"][EOS] = -50.0
    (hyp, _), *_ = beam_search(p, [4], beam_size=2, max_out_len=3)
    assert len(hyp.tokens) == 3 and not hyp.finished
    g, _ = greedy_decode(p, [4], max_out_len=3)
    assert len(g.tokens) == 3 and not g.finished


def test_default_output_limit():
    assert default_max_out_len(4) == 13
    p = tiny(seed=1)
    p.arrays["out.b"][EOS] = -50.0
    g, _ = greedy_decode(p, [4, 5])  # source length 3 with EOS
    assert len(g.tokens) == default_max_out_len(3)


def test_decoder_argument_errors():
    p = tiny()
    with pytest.raises(InputError):
        beam_search(p, [4], beam_size=0)
    with pytest.raises(InputError):
        greedy_decode(p, [4], max_out_len=0)
    with pytest.raises(InputError):
        greedy_decode(p, [])
    with pytest.raises(InputError):
        force_decode(p, [4], [])


# ------------------------------------------------------------------ greedy


def test_eos_peaked_readout_gives_immediate_eos():
    p = tiny(seed=2)
    p.arrays["out.W"][:] = 0.0
    p.arrays["out.b"][:] = 0.0
    p.arrays["out.b"][EOS] = 10.0
    hyp, att = greedy_decode(p, [4, 5, 6])
    assert hyp.tokens == (EOS,)
    assert att.shape == (1, 4)


def test_banned_tokens_are_never_emitted():
    p = tiny(seed=2)
    p.arrays["out.b"][[PAD, BOS]] = 100.0
    hyp, _ = greedy_decode(p, [4, 5])
    assert PAD not in hyp.tokens and BOS not in hyp.tokens
    assert UNK in hyp.tokens or EOS in hyp.tokens or hyp.tokens


def test_batched_greedy_matches_single_sentence_greedy():
    p = tiny(seed=4, vt=12)
    rng = np.random.default_rng(1)
    sents = [tuple(rng.integers(4, 9, size=rng.integers(1, 8)).tolist()) for _ in range(12)]
    batch = make_batch([(s, (4,)) for s in sents])
    out = greedy_decode_batch(p, batch)
    for s, toks in zip(sents, out):
        assert tuple(toks) == greedy_decode(p, s)[0].tokens


def test_batched_greedy_ignores_extra_padding():
    p = tiny(seed=4, vt=12)
    batch = make_batch([((4, 5, 6), (4,)), ((7,), (4,))])
    assert greedy_decode_batch(p, batch) == greedy_decode_batch(p, batch.padded(extra_src=4))


# ------------------------------------------------------------------ forced


def test_forced_decode_on_greedy_output_reproduces_its_attention():
    for seed, eos_bias in ((6, 0.0), (6, 3.0)):
        p = tiny(seed=seed, vt=12)
        p.arrays["out.b"][EOS] = eos_bias
        hyp, att = greedy_decode(p, [4, 5, 6, 7])
        nll, forced = force_decode(p, [4, 5, 6, 7], hyp.tokens)
        n = len(hyp.tokens)
        assert np.array_equal(forced.matrix[:n], att.matrix)
        if hyp.finished:
            assert forced.shape[0] == n
            assert nll == pytest.approx(-hyp.logprob, abs=1e-12)
        else:  # the limit cut greedy short; forcing appends EOS
            assert forced.shape[0] == n + 1


def test_forced_decode_appends_eos_and_scores_reference():
    p = tiny(seed=6, vt=12)
    nll, att = force_decode(p, [4, 5], [7, 8])
    assert att.shape == (3, 3)
    assert att.is_valid()
    assert nll == pytest.approx(-sequence_logprob(p, [4, 5], [7, 8, EOS]), abs=1e-12)


def test_batched_forced_decode_matches_single():
    p = tiny(seed=3, vt=12)
    pairs = [((4, 5, 6), (7, 8)), ((8,), (4, 5, 6, 9)), ((5, 5), (10,))]
    batch = make_batch(pairs)
    for (nll, att), (s, t) in zip(force_decode_batch(p, batch), pairs):
        n1, a1 = force_decode(p, s, t)
        assert nll == pytest.approx(n1, rel=1e-10)
        np.testing.assert_allclose(att.matrix, a1.matrix, rtol=0, atol=1e-12)
    padded = force_decode_batch(p, batch.padded(extra_src=2, extra_tgt=3))
    for (a, x), (b, y) in zip(force_decode_batch(p, batch), padded):
        assert a == b and np.array_equal(x.matrix, y.matrix)


# -------------------------------------------------------------- hard align


def test_hard_align_examples():
    assert hard_align(np.array([[0.9, 0.1], [0.2, 0.8]])) == [(0, 0), (1, 1)]
    assert hard_align(np.full((1, 4), 0.25)) == [(0, 0)]


def test_hard_align_matches_row_scan():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = rng.integers(0, 4, size=(rng.integers(1, 6), rng.integers(1, 6))).astype(float)
        expected = []
        for t, row in enumerate(m):
            best = 0
            for j in range(1, len(row)):
                if row[j] > row[best]:
                    best = j
            expected.append((t, best))
        assert hard_align(AttentionMatrix(m)) == expected


# --------------------------------------------------------- attention matrix


def test_attention_matrix_json_round_trip_and_labels():
    att = AttentionMatrix(np.array([[0.25, 0.75], [1.0, 0.0]]), ["a", "</s>"], ["x", "</s>"])
    back = AttentionMatrix.from_json(att.to_json())
    assert np.array_equal(back.matrix, att.matrix)
    assert back.src_tokens == ["a", "</s>"] and back.tgt_tokens == ["x", "</s>"]
    assert set(json.loads(att.to_json())) == {"src_tokens", "tgt_tokens", "matrix"}
    with pytest.raises(InputError):
        AttentionMatrix(np.eye(2), ["a"], None)
    assert not AttentionMatrix(np.array([[0.5, 0.4]])).is_valid()


def test_strip_eos():
    assert strip_eos([5, 6, EOS]) == [5, 6]
    assert strip_eos([5, 6]) == [5, 6]
    assert strip_eos([]) == []
