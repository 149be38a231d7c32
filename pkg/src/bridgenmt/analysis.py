"""Evaluation metrics and attention diagnostics.

Alignment links are ``(src_pos, tgt_pos)`` pairs, as in Pharaoh files.
Hard alignments produced by the decoder are ``(tgt_pos, src_pos)`` pairs,
one per target position; :func:`links_from_hard` converts between them.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import EOS_TOKEN, GoldAlignment, Link
from .decode import AttentionMatrix, hard_align
from .errors import InputError, VariantError
from .model import N_RESERVED, ModelParams

Tokens = Sequence[str]


@dataclass
class MetricReport:
    name: str
    value: float
    breakdown: dict = field(default_factory=dict)
    n_sentences: int = 0

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "value": self.value,
                           "breakdown": self.breakdown, "n_sentences": self.n_sentences},
                          sort_keys=True)


# ----------------------------------------------------------------------- BLEU


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_ref_lists(refs) -> list[list[list[str]]]:
    out = []
    for r in refs:
        if r and isinstance(r[0], str):
            out.append([list(r)])
        elif not r:
            out.append([[]])
        else:
            out.append([list(x) for x in r])
    return out


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    def score(self, smooth: bool = False) -> float:
        if self.hyp_len == 0:
            return 0.0
        logs = []
        for n, (m, t) in enumerate(zip(self.matches, self.totals), start=1):
            if smooth and n > 1:
                m, t = m + 1, t + 1
            if m == 0 or t == 0:
                return 0.0
            logs.append(math.log(m / t))
        bp = math.exp(min(0.0, 1.0 - self.ref_len / self.hyp_len))
        return bp * math.exp(sum(logs) / len(logs))


def bleu_stats(hyps: Sequence[Tokens], refs, max_n: int = 4, case_insensitive: bool = True) -> BleuStats:
    ref_lists = _as_ref_lists(refs)
    if len(hyps) != len(ref_lists):
        raise InputError(f"{len(hyps)} hypotheses but {len(ref_lists)} reference sets")
    if not hyps:
        raise InputError("empty corpus")
    if max_n < 1:
        raise InputError("max_n must be at least 1")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, rs in zip(hyps, ref_lists):
        if case_insensitive:
            hyp = [w.lower() for w in hyp]
            rs = [[w.lower() for w in r] for r in rs]
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    return BleuStats(matches, totals, hyp_len, ref_len)


def corpus_bleu(hyps: Sequence[Tokens], refs, max_n: int = 4, case_insensitive: bool = True,
                smooth: bool = False) -> float:
    """Corpus BLEU in [0, 1] with brevity penalty ``exp(min(0, 1 - r/c))``.

    ``refs[i]`` is one token list or a list of alternative references.
    Any zero n-gram precision gives 0 unless ``smooth`` adds one to the
    counts of orders two and up.
    """
    return bleu_stats(hyps, refs, max_n, case_insensitive).score(smooth)


def one_gram_bleu(hyps: Sequence[Tokens], refs, case_insensitive: bool = True) -> float:
    return corpus_bleu(hyps, refs, max_n=1, case_insensitive=case_insensitive)


DEFAULT_LENGTH_EDGES = (10, 20, 30, 40, 50)


def bucket_label(length: int, edges: Sequence[int]) -> str:
    lo = 0
    for hi in edges:
        if length <= hi:
            return f"{lo + 1}-{hi}"
        lo = hi
    return f">{lo}"


def length_bucket_bleu(hyps, refs, src_lengths: Sequence[int],
                       edges: Sequence[int] = DEFAULT_LENGTH_EDGES, max_n: int = 4,
                       smooth: bool = False) -> dict[str, dict]:
    """Corpus BLEU per source-length bucket; empty buckets are left out."""
    if not (len(hyps) == len(refs) == len(src_lengths)):
        raise InputError("hypotheses, references and source lengths differ in count")
    if list(edges) != sorted(set(edges)):
        raise InputError("bucket edges must be strictly increasing")
    groups: dict[str, list[int]] = {}
    for i, n in enumerate(src_lengths):
        groups.setdefault(bucket_label(int(n), edges), []).append(i)
    order = [bucket_label(e, edges) for e in edges] + [f">{edges[-1]}" if edges else ">0"]
    out = {}
    for label in order:
        idx = groups.get(label)
        if not idx:
            continue
        out[label] = {
            "bleu": corpus_bleu([hyps[i] for i in idx], [refs[i] for i in idx], max_n,
                                smooth=smooth),
            "count": len(idx),
            "indices": idx,
        }
    return out


# ------------------------------------------------------------------ alignment


def links_from_hard(hard: Iterable[tuple[int, int]], n_tgt: int | None = None,
                    n_src: int | None = None) -> set[Link]:
    """``(tgt, src)`` hard links to ``(src, tgt)`` links.

    With ``n_tgt``/``n_src`` given, links touching a position at or beyond
    those bounds (the EOS row and column) are dropped.
    """
    out = set()
    for t, s in hard:
        if n_tgt is not None and t >= n_tgt:
            continue
        if n_src is not None and s >= n_src:
            continue
        out.add((int(s), int(t)))
    return out


def _aer_counts(pred: set[Link], gold: GoldAlignment) -> tuple[int, int, int, int]:
    return len(pred & gold.sure), len(pred & gold.possible), len(pred), len(gold.sure)


def aer(pred: Iterable[Link], gold: GoldAlignment) -> float:
    """One sentence: ``1 - (|A & S| + |A & P|) / (|A| + |S|)``."""
    return corpus_aer([pred], [gold])


def corpus_aer(preds: Sequence[Iterable[Link]], golds: Sequence[GoldAlignment]) -> float:
    """AER with the link counts pooled over all sentences before dividing."""
    if len(preds) != len(golds):
        raise InputError("prediction and gold alignments differ in sentence count")
    a_s = a_p = n_a = n_s = 0
    for p, g in zip(preds, golds):
        c = _aer_counts(set(p), g)
        a_s, a_p, n_a, n_s = a_s + c[0], a_p + c[1], n_a + c[2], n_s + c[3]
    if n_a + n_s == 0:
        raise InputError("AER undefined: no predicted and no sure links")
    return 1.0 - (a_s + a_p) / (n_a + n_s)


def gold_matrices(gold: GoldAlignment, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Indicator matrices ``(M_S, M_P)`` of shape ``(T_y, T_x)``."""
    n_tgt, n_src = shape
    m_s, m_p = np.zeros(shape), np.zeros(shape)
    for links, m in ((gold.sure, m_s), (gold.possible, m_p)):
        for s, t in links:
            if not (0 <= s < n_src and 0 <= t < n_tgt):
                raise InputError(f"gold link {s}-{t} outside a {n_tgt}x{n_src} matrix")
            m[t, s] = 1.0
    return m_s, m_p


def _saer_terms(m_a: np.ndarray, gold: GoldAlignment) -> tuple[float, float]:
    m_s, m_p = gold_matrices(gold, m_a.shape)
    num = float((m_a * m_s).sum() + (m_a * m_p).sum())
    den = float(m_a.sum() + m_s.sum())
    return num, den


def saer(m_a, gold: GoldAlignment) -> float:
    """Soft AER: ``1 - (<M_A, M_S> + <M_A, M_P>) / (|M_A|_1 + |M_S|_1)``.

    ``m_a`` is a ``(T_y, T_x)`` matrix; ``<.,.>`` is the elementwise product
    sum and ``|.|_1`` the entry sum.
    """
    m = m_a.matrix if isinstance(m_a, AttentionMatrix) else np.asarray(m_a, dtype=np.float64)
    num, den = _saer_terms(m, gold)
    if den == 0:
        raise InputError("SAER undefined: empty matrix and no sure links")
    return 1.0 - num / den


def corpus_saer(matrices: Sequence, golds: Sequence[GoldAlignment]) -> float:
    if len(matrices) != len(golds):
        raise InputError("matrices and gold alignments differ in sentence count")
    num = den = 0.0
    for m_a, g in zip(matrices, golds):
        m = m_a.matrix if isinstance(m_a, AttentionMatrix) else np.asarray(m_a, dtype=np.float64)
        n, d = _saer_terms(m, g)
        num, den = num + n, den + d
    if den == 0:
        raise InputError("SAER undefined: empty matrices and no sure links")
    return 1.0 - num / den


def strip_eos_matrix(att: AttentionMatrix | np.ndarray) -> np.ndarray:
    """Drop the target EOS row and the source EOS column."""
    m = att.matrix if isinstance(att, AttentionMatrix) else np.asarray(att)
    return m[:-1, :-1]


# --------------------------------------------------------------- eos and ROT


def eos_alignment_rate(matrices: Sequence[AttentionMatrix | np.ndarray]) -> float:
    """Percentage of sentences whose target EOS row peaks on the source EOS.

    The last row of each matrix is the target EOS and the last column the
    source EOS. Labeled matrices are checked for that layout.
    """
    if not matrices:
        raise InputError("no attention matrices")
    hits = 0
    for i, att in enumerate(matrices):
        m = att.matrix if isinstance(att, AttentionMatrix) else np.asarray(att)
        if isinstance(att, AttentionMatrix):
            if att.tgt_tokens is not None and (not att.tgt_tokens or att.tgt_tokens[-1] != EOS_TOKEN):
                raise InputError(f"sentence {i}: target does not end with {EOS_TOKEN}")
            if att.src_tokens is not None and (not att.src_tokens or att.src_tokens[-1] != EOS_TOKEN):
                raise InputError(f"sentence {i}: source does not end with {EOS_TOKEN}")
        if m.shape[0] == 0:
            raise InputError(f"sentence {i}: empty target (missing EOS)")
        last_row = hard_align(m)[-1]
        hits += last_row[1] == m.shape[1] - 1
    return 100.0 * hits / len(matrices)


def rot(hard: Sequence[Sequence[tuple[int, int]]], src: Sequence[Tokens], tgt: Sequence[Tokens],
        src_tags: Sequence[Sequence[str]] | None = None, word_filter: set[str] | None = None) -> float:
    """Ratio of over-translation, as a percentage.

    Per sentence, each distinct source word ``w`` (surface token; restricted
    to source positions whose tag is in ``word_filter`` when given) collects
    the multiset ``e(w)`` of target tokens hard-aligned to it;
    ``t(w) = |e(w)| - |set(e(w))|``. ROT is ``100 * sum t(w) / #words``.
    Links to positions past the token lists (EOS) are ignored.
    """
    if not (len(hard) == len(src) == len(tgt)):
        raise InputError("alignments, sources and targets differ in sentence count")
    if src_tags is not None and len(src_tags) != len(src):
        raise InputError("source tags and sources differ in sentence count")
    dup = n_words = 0
    for k, (links, s, t) in enumerate(zip(hard, src, tgt)):
        keep = range(len(s))
        if word_filter is not None:
            if src_tags is None:
                raise InputError("a tag filter needs source tags")
            tags = src_tags[k]
            if len(tags) != len(s):
                raise InputError(f"line {k + 1}: {len(tags)} tags for {len(s)} source tokens")
            keep = [j for j in range(len(s)) if tags[j] in word_filter]
        words = {s[j] for j in keep}
        kept_pos = set(keep)
        aligned: dict[str, list[str]] = {w: [] for w in words}
        for tp, sp in links:
            if tp < len(t) and sp in kept_pos:
                aligned[s[sp]].append(t[tp])
        n_words += len(words)
        dup += sum(len(e) - len(set(e)) for e in aligned.values())
    return 100.0 * dup / n_words if n_words else 0.0


# --------------------------------------------------------------- POS confusion


def merge_tag(tag: str, merge_map: Mapping[str, str] | None = None) -> str:
    """Collapse fine tags: explicit map first, then VB* to V and NN* to N."""
    if merge_map and tag in merge_map:
        return merge_map[tag]
    if tag.startswith("VB"):
        return "V"
    if tag.startswith("NN"):
        return "N"
    return tag


def pos_confusion(hard: Sequence[Sequence[tuple[int, int]]], src_tags: Sequence[Sequence[str]],
                  tgt_tags: Sequence[Sequence[str]], merge_map: Mapping[str, str] | None = None,
                  src_lengths: Sequence[int] | None = None, tgt_lengths: Sequence[int] | None = None,
                  ) -> dict[str, dict[str, float]]:
    """Per target tag, percentage distribution of the aligned source tags.

    Target positions past the tag list (EOS) are skipped; source positions
    past it count under ``"EOS"``. ``*_lengths`` let callers verify that the
    tag files match the token counts of the corpus.
    """
    if not (len(hard) == len(src_tags) == len(tgt_tags)):
        raise InputError("alignments and tag files differ in sentence count")
    for name, tags, lengths in (("source", src_tags, src_lengths), ("target", tgt_tags, tgt_lengths)):
        if lengths is None:
            continue
        for k, (tg, n) in enumerate(zip(tags, lengths)):
            if len(tg) != n:
                raise InputError(f"line {k + 1}: {len(tg)} {name} tags for {n} tokens")
    counts: dict[str, Counter] = {}
    for k, (links, st, tt) in enumerate(zip(hard, src_tags, tgt_tags)):
        for tp, sp in links:
            if tp >= len(tt):
                continue
            if sp > len(st):
                raise InputError(f"line {k + 1}: source position {sp} out of range")
            s_tag = "EOS" if sp == len(st) else merge_tag(st[sp], merge_map)
            counts.setdefault(merge_tag(tt[tp], merge_map), Counter())[s_tag] += 1
    table = {}
    for row in sorted(counts):
        total = sum(counts[row].values())
        table[row] = {c: 100.0 * n / total for c, n in sorted(counts[row].items())}
    return table


# --------------------------------------------------------- nearest neighbours


def nearest_target_words(params: ModelParams, src_word_ids: Sequence[int], k: int = 5,
                         exclude_reserved: bool = True) -> list[tuple[int, list[tuple[int, float]]]]:
    """Target rows closest to ``W x`` for each source id, by Euclidean distance.

    Exhaustive scan; ties break toward the lower target id.
    """
    if not params.config.variant.has_bridge_matrix:
        raise VariantError(f"{params.config.variant.value} has no bridge matrix")
    table = params["tgt_embed"]
    start = N_RESERVED if exclude_reserved else 0
    cand = np.arange(start, table.shape[0])
    k = min(k, cand.size)
    out = []
    for sid in src_word_ids:
        if not 0 <= sid < params["src_embed"].shape[0]:
            raise InputError(f"source id {sid} outside the vocabulary")
        mapped = params["src_embed"][sid] @ params["bridge.W"].T
        dist = np.sqrt(((table[cand] - mapped) ** 2).sum(axis=1))
        order = np.lexsort((cand, dist))[:k]
        out.append((int(sid), [(int(cand[i]), float(dist[i])) for i in order]))
    return out
