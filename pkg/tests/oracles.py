"""Brute-force reference implementations of the evaluation metrics.

Written independently of the package: plain loops over lists, no shared
helpers, so agreement is evidence rather than tautology.
"""

import math


def ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def count(items, x):
    return sum(1 for y in items if y == x)


def bleu(hyps, refs, max_n=4, lower=True):
    """Corpus BLEU from explicit clipped counts; ``refs[i]`` is a list of references."""
    match = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for hyp, rs in zip(hyps, refs):
        if lower:
            hyp = [w.lower() for w in hyp]
            rs = [[w.lower() for w in x] for x in rs]
        c += len(hyp)
        best = None
        for x in rs:
            key = (abs(len(x) - len(hyp)), len(x))
            if best is None or key < best:
                best = key
        r += best[1]
        for n in range(1, max_n + 1):
            grams = ngram_list(hyp, n)
            total[n - 1] += len(grams)
            seen = []
            for g in grams:
                if g in seen:
                    continue
                seen.append(g)
                clip = max(count(ngram_list(x, n), g) for x in rs)
                match[n - 1] += min(count(grams, g), clip)
    if c == 0 or any(m == 0 for m in match):
        return 0.0
    log_p = sum(math.log(match[i] / total[i]) for i in range(max_n)) / max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def aer(pred_sets, sure_sets, possible_sets):
    a_s = a_p = n_a = n_s = 0
    for a, s, p in zip(pred_sets, sure_sets, possible_sets):
        p = p | s
        for link in a:
            a_s += link in s
            a_p += link in p
        n_a += len(a)
        n_s += len(s)
    return 1 - (a_s + a_p) / (n_a + n_s)


def saer(mats, sure_sets, possible_sets):
    num = den = 0.0
    for m, s, p in zip(mats, sure_sets, possible_sets):
        p = p | s
        for t, row in enumerate(m):
            for j, v in enumerate(row):
                if (j, t) in s:
                    num += v
                if (j, t) in p:
                    num += v
                den += v
        den += len(s)
    return 1 - num / den


def eos_rate(mats):
    hits = 0
    for m in mats:
        last = list(m[-1])
        best = 0
        for j in range(len(last)):
            if last[j] > last[best]:
                best = j
        hits += best == len(last) - 1
    return 100.0 * hits / len(mats)


def rot(hard, src, tgt, src_tags=None, keep_tags=None):
    dup = words = 0
    for k in range(len(src)):
        s, t = src[k], tgt[k]
        positions = [j for j in range(len(s))
                     if keep_tags is None or src_tags[k][j] in keep_tags]
        vocab = []
        for j in positions:
            if s[j] not in vocab:
                vocab.append(s[j])
        words += len(vocab)
        for w in vocab:
            e = [t[tp] for tp, sp in hard[k] if tp < len(t) and sp in positions and s[sp] == w]
            dup += len(e) - len(set(e))
    return 100.0 * dup / words if words else 0.0


def pos_confusion(hard, src_tags, tgt_tags, merge):
    tally = {}
    for k in range(len(hard)):
        for tp, sp in hard[k]:
            if tp >= len(tgt_tags[k]):
                continue
            row = merge(tgt_tags[k][tp])
            col = "EOS" if sp == len(src_tags[k]) else merge(src_tags[k][sp])
            tally.setdefault(row, {})
            tally[row][col] = tally[row].get(col, 0) + 1
    out = {}
    for row, cols in tally.items():
        n = sum(cols.values())
        out[row] = {c: 100.0 * v / n for c, v in cols.items()}
    return out
