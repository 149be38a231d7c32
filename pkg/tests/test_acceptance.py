"""Acceptance criteria, one test group per criterion.

Each group records a verdict line (see ``verdicts.py``) that is printed
in the terminal summary. The toy-task groups share one session of
training runs: Baseline and SourceBridge -> DirectBridge for seeds 1-3
and TargetBridge for seed 1.
"""

import time

import numpy as np
import oracles
import pytest
import toylab
from test_decode import enumerate_outputs, sequence_logprob
from verdicts import criterion

from bridgenmt import analysis as A
from bridgenmt import model as M
from bridgenmt.cli import gradcheck_model
from bridgenmt.data import (
    GoldAlignment,
    ToySpec,
    build_vocab,
    encode_pairs,
    gen_toy_corpus,
    make_batch,
    make_batches,
)
from bridgenmt.decode import (
    beam_search,
    force_decode_batch,
    greedy_decode_batch,
    hard_align,
)
from bridgenmt.model import ModelConfig, Variant, init_params
from bridgenmt.runs import DevSet, run_training
from bridgenmt.train import (
    TrainConfig,
    checkpoint_from_state,
    evaluate_loss,
    load_checkpoint,
    new_train_state,
    save_checkpoint,
)

SEEDS = (1, 2, 3)

# ------------------------------------------------- 1. gradient correctness


@pytest.mark.parametrize("variant", list(Variant), ids=lambda v: v.value)
def test_gradient_matches_central_differences(variant):
    with criterion(1, variant.value) as note:
        t0 = time.perf_counter()
        # every coordinate of every parameter tensor
        rep = gradcheck_model(variant, embed_dim=8, hidden_dim=12, vocab=20, length=5,
                              tolerance=1e-4, max_coords=None)
        secs = time.perf_counter() - t0
        n = sum(a.size for a in rep.analytic.values())
        note["detail"] = f"max rel err {rep.overall:.2e} over {n} coords, {secs:.0f}s"
        assert rep.passed, note["detail"]
        assert rep.overall < 1e-4
        assert secs < 60


# ------------------------------------------------- 2. parameter accounting


def test_parameter_accounting_at_full_size():
    with criterion(2) as note:
        t0 = time.perf_counter()
        cfg = ModelConfig(30000, 30000, 620, 1000)
        n = {v: M.count_params(cfg, v) for v in Variant}
        base = n[Variant.BASELINE]
        direct_src = n[Variant.DIRECT_BRIDGE] - n[Variant.SOURCE_BRIDGE]
        src_base = n[Variant.SOURCE_BRIDGE] - base
        tgt_base = n[Variant.TARGET_BRIDGE] - base
        secs = time.perf_counter() - t0
        note["detail"] = (f"baseline {base / 1e6:.2f}M, direct-source {direct_src:,}, "
                          f"source-baseline {src_base / 1e6:.2f}M, target-baseline {tgt_base / 1e6:.2f}M")
        assert direct_src == 384_400 == 620 * 620
        assert abs(src_base - 3.7e6) <= 0.2 * 3.7e6
        assert abs(tgt_base - 1.8e6) <= 0.2 * 1.8e6
        assert abs(base - 74.8e6) <= 0.1 * 74.8e6
        assert secs < 1.0


# ---------------------------------------------- 3. beam search optimality


def test_exhaustive_beam_matches_brute_force():
    with criterion(3) as note:
        t0 = time.perf_counter()
        worst = 0.0
        for seed, variant in [(s, v) for s in range(3) for v in Variant]:
            cfg = ModelConfig(9, 6, 4, 5, variant=variant, dropout_rate=0.0, init_scale=1.5)
            p = init_params(cfg, seed)
            src = [4, 6, 5]
            scored = [(sequence_logprob(p, src, seq), seq) for seq in enumerate_outputs(6, 4)]
            best_score, best_seq = max(scored)
            hyp, _ = beam_search(p, src, beam_size=len(scored), max_out_len=4)[0]
            assert hyp.tokens == best_seq, (variant, seed)
            worst = max(worst, abs(hyp.logprob - best_score))
        secs = time.perf_counter() - t0
        note["detail"] = f"12 models, {len(scored)} sequences each, max |score diff| {worst:.1e}, {secs:.1f}s"
        assert worst <= 1e-9
        assert secs < 10


# ---------------------------------------------------- 4. metric oracles


def _metric_fixture(seed=0, n=8):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(6)]
    src = [[words[i] for i in rng.integers(0, 6, size=rng.integers(2, 8))] for _ in range(n)]
    tgt = [[words[i] for i in rng.integers(0, 6, size=rng.integers(2, 8))] for _ in range(n)]
    hyps = []
    for t in tgt:
        h = list(t)
        for k in range(len(h)):
            if rng.random() < 0.25:
                h[k] = words[int(rng.integers(0, 6))]
        if rng.random() < 0.3:
            h = h[:-1]
        hyps.append(h)
    tags = ["NN", "NNS", "VB", "VBD", "JJ", "DT"]
    src_tags = [[tags[int(i)] for i in rng.integers(0, 6, size=len(s))] for s in src]
    tgt_tags = [[tags[int(i)] for i in rng.integers(0, 6, size=len(t))] for t in tgt]
    mats, golds, hard = [], [], []
    for s, t in zip(src, tgt):
        m = rng.random((len(t) + 1, len(s) + 1)) ** 3
        mats.append(m / m.sum(axis=1, keepdims=True))
        sure = {(int(rng.integers(0, len(s))), j) for j in range(len(t)) if rng.random() < 0.7}
        poss = sure | {(int(rng.integers(0, len(s))), j) for j in range(len(t)) if rng.random() < 0.4}
        golds.append(GoldAlignment(sure, poss))
        hard.append(hard_align(m))
    return dict(src=src, tgt=tgt, hyps=hyps, src_tags=src_tags, tgt_tags=tgt_tags, mats=mats,
                golds=golds, hard=hard)


def test_metrics_match_brute_force_oracles():
    with criterion(4) as note:
        t0 = time.perf_counter()
        checked = 0
        for seed in range(5):
            f = _metric_fixture(seed)
            refs = [[t] for t in f["tgt"]]
            assert A.corpus_bleu(f["hyps"], refs) == pytest.approx(oracles.bleu(f["hyps"], refs), abs=1e-12)
            assert A.one_gram_bleu(f["hyps"], refs) == pytest.approx(
                oracles.bleu(f["hyps"], refs, max_n=1), abs=1e-12)
            preds = [A.links_from_hard(h, len(t), len(s)) for h, s, t in zip(f["hard"], f["src"], f["tgt"])]
            sure = [g.sure for g in f["golds"]]
            poss = [g.possible for g in f["golds"]]
            assert A.corpus_aer(preds, f["golds"]) == oracles.aer(preds, sure, poss)
            stripped = [A.strip_eos_matrix(m) for m in f["mats"]]
            assert A.corpus_saer(stripped, f["golds"]) == pytest.approx(
                oracles.saer(stripped, sure, poss), abs=1e-12)
            assert A.eos_alignment_rate(f["mats"]) == oracles.eos_rate(f["mats"])
            assert A.rot(f["hard"], f["src"], f["tgt"]) == oracles.rot(f["hard"], f["src"], f["tgt"])
            keep = {"NN", "NNS"}
            assert A.rot(f["hard"], f["src"], f["tgt"], f["src_tags"], keep) == oracles.rot(
                f["hard"], f["src"], f["tgt"], f["src_tags"], keep)
            assert A.pos_confusion(f["hard"], f["src_tags"], f["tgt_tags"]) == oracles.pos_confusion(
                f["hard"], f["src_tags"], f["tgt_tags"], A.merge_tag)
            checked += 1
        secs = time.perf_counter() - t0
        note["detail"] = f"7 metrics x {checked} fixtures of 8 sentences, {secs:.2f}s"
        assert secs < 10


# ------------------------------------------------ shared toy-task training


@pytest.fixture(scope="session")
def lab():
    data = toylab.load_toy()
    runs = {}
    for seed in SEEDS:
        runs["baseline", seed] = toylab.train_variant(data, Variant.BASELINE, seed)
        runs["source-bridge", seed] = toylab.train_variant(data, Variant.SOURCE_BRIDGE, seed)
        runs["direct-bridge", seed] = toylab.train_variant(data, Variant.DIRECT_BRIDGE, seed,
                                                           donor=runs["source-bridge", seed].params)
    runs["target-bridge", 1] = toylab.train_variant(data, Variant.TARGET_BRIDGE, 1)
    for run in runs.values():
        run.metrics["test_bleu"] = toylab.test_bleu(run, data)
    for seed in SEEDS:
        for name in ("baseline", "direct-bridge"):
            run = runs[name, seed]
            run.metrics["eos_rate"] = toylab.eos_rate(run, data)
            run.metrics["aer"] = toylab.forced_aer(run, data)
        runs["direct-bridge", seed].metrics["lexicon"] = toylab.lexicon_accuracy(runs["direct-bridge", seed], data)
    return data, runs


# --------------------------------------------- 5. toy-task learnability


@pytest.mark.slow
@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_each_variant_learns_the_toy_task(lab, variant):
    _, runs = lab
    run = runs[variant, 1]
    with criterion(5, variant) as note:
        note["detail"] = (f"test BLEU {run.metrics['test_bleu']:.4f} (best epoch {run.best_epoch}, "
                          f"{run.seconds:.0f}s)")
        assert run.metrics["test_bleu"] >= toylab.BLEU_THRESHOLD
        assert run.best_epoch <= toylab.TRAIN["max_epochs"]
        assert run.seconds < 15 * 60


# ------------------------------------------- 6. directional bridging effects


@pytest.mark.slow
def test_direct_bridging_raises_eos_rate_and_lowers_aer(lab):
    _, runs = lab
    med = {(name, key): toylab.median(runs[name, s].metrics[key] for s in SEEDS)
           for name in ("baseline", "direct-bridge") for key in ("eos_rate", "aer")}
    with criterion(6) as note:
        note["detail"] = (f"median eos-rate {med['baseline', 'eos_rate']:.1f}% -> "
                          f"{med['direct-bridge', 'eos_rate']:.1f}%, median AER "
                          f"{med['baseline', 'aer']:.4f} -> {med['direct-bridge', 'aer']:.4f}")
        assert med["direct-bridge", "eos_rate"] >= med["baseline", "eos_rate"]
        assert med["direct-bridge", "aer"] <= med["baseline", "aer"]


# ------------------------------------------- 7. embedding transform quality


@pytest.mark.slow
def test_bridge_matrix_maps_frequent_words_to_their_translations(lab):
    _, runs = lab
    accs = [runs["direct-bridge", s].metrics["lexicon"] for s in SEEDS]
    with criterion(7) as note:
        note["detail"] = f"top-1 accuracy per seed {accs}, median {toylab.median(accs):.2f}"
        assert toylab.median(accs) >= 0.80


# ------------------------------------------- 8. determinism and persistence


def _small_run(out_dir, variant="direct-bridge"):
    c = gen_toy_corpus(ToySpec(vocab_size=12, n_pairs=120, min_len=2, max_len=6, seed=5))
    train, dev = c.split([100, 20])
    sv, tv = build_vocab(train.src, 30), build_vocab(train.tgt, 30)
    cfg = ModelConfig(len(sv), len(tv), 8, 12, variant=variant, dropout_rate=0.5, init_scale=0.3)
    tc = TrainConfig(batch_size=8, max_epochs=2, dropout_rate=0.5, seed=9, variant=variant)
    state = new_train_state(init_params(cfg, 9), tc)
    dev_set = DevSet([sv.encode(s) for s in dev.src], dev.tgt)
    res = run_training(state, encode_pairs(train.pairs(), sv, tv), tc, dev_set, sv, tv, out_dir)
    ck = load_checkpoint(out_dir / "best.bnmt")
    lines = []
    for s in dev.src:
        hyp, att = beam_search(ck.params, sv.encode(s), 4)[0]
        lines.append(" ".join(tv.decode(hyp.tokens)) + " | " + att.to_json())
    (out_dir / "translations.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return res, state, sv, tv, dev


def test_identical_runs_give_identical_bytes_and_round_trip_is_bitwise(tmp_path):
    with criterion(8) as note:
        _, state, sv, tv, dev = _small_run(tmp_path / "a")
        _small_run(tmp_path / "b")
        files = ["train.log.jsonl", "dev.jsonl", "best.bnmt", "last.bnmt", "translations.txt"]
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        save_checkpoint(tmp_path / "m.bnmt", checkpoint_from_state(state, sv, tv))
        loaded = load_checkpoint(tmp_path / "m.bnmt")
        batch = make_batch(encode_pairs(dev.pairs(), sv, tv))
        a, b = evaluate_loss(state.params, batch), evaluate_loss(loaded.params, batch)
        assert np.array_equal(a.per_sentence, b.per_sentence)
        assert a.bridge_penalty == b.bridge_penalty
        assert all(np.array_equal(x, y) for x, y in zip(a.alphas, b.alphas))
        assert greedy_decode_batch(state.params, batch) == greedy_decode_batch(loaded.params, batch)
        note["detail"] = f"{len(files)} artifacts byte-identical; reloaded forward bitwise equal"


# --------------------------------------------------- 9. masking invariance


@pytest.mark.parametrize("variant", list(Variant), ids=lambda v: v.value)
def test_padding_changes_nothing(variant):
    with criterion(9, variant.value) as note:
        rng = np.random.default_rng(list(Variant).index(variant) + 7)
        cfg = ModelConfig(15, 14, 6, 8, variant=variant, dropout_rate=0.0, init_scale=0.5)
        p = init_params(cfg, 3)
        pairs = [(tuple(rng.integers(4, 15, size=rng.integers(1, 9)).tolist()),
                  tuple(rng.integers(4, 14, size=rng.integers(1, 9)).tolist())) for _ in range(24)]
        n = 0
        for batch in make_batches(pairs, 6, seed=1):
            for extra_src, extra_tgt in ((1, 0), (0, 2), (5, 3)):
                wide = batch.padded(extra_src=extra_src, extra_tgt=extra_tgt)
                a, b = evaluate_loss(p, batch), evaluate_loss(p, wide)
                assert np.array_equal(a.per_sentence, b.per_sentence)
                assert float(a.loss.value) == float(b.loss.value)
                tx = batch.src.shape[1]
                for x, y in zip(a.alphas, b.alphas):
                    assert np.array_equal(x, y[:tx]) and not y[tx:].any()
                for (nll_a, att_a), (nll_b, att_b) in zip(force_decode_batch(p, batch),
                                                          force_decode_batch(p, wide)):
                    assert nll_a == nll_b and np.array_equal(att_a.matrix, att_b.matrix)
                assert greedy_decode_batch(p, batch) == greedy_decode_batch(p, wide)
                n += 1
        note["detail"] = f"{n} padded batches exact"
