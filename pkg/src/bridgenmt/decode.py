"""Greedy, beam and forced decoding plus attention-matrix extraction.

Decoders take either a source id sequence (EOS is appended when missing) or
a single-row :class:`EncoderOutput`. PAD and BOS are never emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import InputError
from .model import (
    BOS,
    EOS,
    PAD,
    EncoderOutput,
    ModelParams,
    bind,
    decoder_init,
    decoder_step,
    encode,
)
from .tensor import Tape

BANNED_OUTPUTS = (PAD, BOS)


@dataclass
class AttentionMatrix:
    """``T_y x T_x`` attention over the real source positions (EOS included)."""

    matrix: np.ndarray
    src_tokens: list[str] | None = None
    tgt_tokens: list[str] | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InputError(f"attention matrix must be 2-D, got shape {self.matrix.shape}")
        if self.src_tokens is not None and len(self.src_tokens) != self.matrix.shape[1]:
            raise InputError("source labels do not match the matrix width")
        if self.tgt_tokens is not None and len(self.tgt_tokens) != self.matrix.shape[0]:
            raise InputError("target labels do not match the matrix height")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    def is_valid(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        return bool((m >= 0).all() and np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=tol))

    def to_json(self) -> str:
        return json.dumps({
            "src_tokens": self.src_tokens,
            "tgt_tokens": self.tgt_tokens,
            "matrix": self.matrix.tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "AttentionMatrix":
        obj = json.loads(line)
        return cls(np.array(obj["matrix"], dtype=np.float64).reshape(len(obj["matrix"]), -1),
                   obj.get("src_tokens"), obj.get("tgt_tokens"))


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    state: np.ndarray | None = None
    attention: list[np.ndarray] = field(default_factory=list)
    finished: bool = False
    step_logprobs: tuple[float, ...] = ()

    def score(self, length_norm: bool = False) -> float:
        if length_norm and self.tokens:
            return self.logprob / len(self.tokens)
        return self.logprob

    def attention_matrix(self, src_tokens=None, tgt_tokens=None) -> AttentionMatrix:
        width = self.attention[0].shape[0] if self.attention else 0
        rows = np.array(self.attention) if self.attention else np.zeros((0, width))
        return AttentionMatrix(rows, src_tokens, tgt_tokens)


@dataclass
class BeamStep:
    """Scores of the candidates kept and the best one pruned at one expansion."""

    kept: list[float]
    best_pruned: float | None


# ------------------------------------------------------------------ helpers


def default_max_out_len(src_len: int) -> int:
    return 2 * src_len + 5


def _source_ids(src) -> np.ndarray:
    ids = np.asarray(list(src), dtype=np.int64)
    if ids.size == 0:
        raise InputError("empty source sentence")
    if ids[-1] != EOS:
        ids = np.append(ids, EOS)
    return ids


class _Stepper:
    """Decoder steps for ``k`` hypotheses that share one source sentence."""

    def __init__(self, params: ModelParams, src):
        self.tape = Tape(recording=False)
        self.P = bind(params, self.tape)
        if isinstance(src, EncoderOutput):
            if src.batch_size != 1:
                raise InputError("decoders expect a single-sentence encoder output")
            c = self.tape.constant
            enc = EncoderOutput(c(src.annotations.value), c(src.src_embeds.value),
                                src.src_mask, src.src_ids, c(src.keys.value))
        else:
            ids = _source_ids(src)
            enc = encode(self.P, ids[None], np.ones((1, ids.size), dtype=bool))
        self.enc = enc
        self.src_len = int(enc.src_mask[:, 0].sum())

    def initial_state(self) -> np.ndarray:
        return decoder_init(self.P, self.enc).value[0]

    def step(self, states: np.ndarray, prev: np.ndarray):
        """Log-probabilities ``(k, V)``, new states ``(k, h)``, attention ``(k, T_x)``."""
        k = states.shape[0]
        enc = self._replicate(k)
        out = decoder_step(self.P, self.tape.constant(states), prev, enc)
        logp = T.log_softmax(out.logits.value)
        logp[:, BANNED_OUTPUTS] = -np.inf
        alpha = out.alpha_t.value[: self.src_len].T
        return logp, out.s_t.value, alpha

    def _replicate(self, k: int) -> EncoderOutput:
        if k == 1:
            return self.enc
        e, c, rows = self.enc, self.tape.constant, np.zeros(k, dtype=np.int64)
        return EncoderOutput(c(e.annotations.value[:, rows]), c(e.src_embeds.value[:, rows]),
                             e.src_mask[:, rows], e.src_ids[:, rows], c(e.keys.value[:, rows]))


# ------------------------------------------------------------------ decoders


def greedy_decode(params: ModelParams, src, max_out_len: int | None = None) -> tuple[Hypothesis, AttentionMatrix]:
    """Argmax token at every step until EOS or ``max_out_len`` tokens."""
    dec = _Stepper(params, src)
    limit = default_max_out_len(dec.src_len) if max_out_len is None else max_out_len
    if limit < 1:
        raise InputError("max_out_len must be at least 1")
    state = dec.initial_state()[None]
    prev = BOS
    tokens, step_lp, rows = [], [], []
    total = 0.0
    finished = False
    for _ in range(limit):
        logp, new_state, alpha = dec.step(state, np.array([prev]))
        tok = int(np.argmax(logp[0]))
        total = total + logp[0, tok]
        tokens.append(tok)
        step_lp.append(float(logp[0, tok]))
        rows.append(alpha[0])
        state, prev = new_state, tok
        if tok == EOS:
            finished = True
            break
    hyp = Hypothesis(tuple(tokens), float(total), state[0], rows, finished, tuple(step_lp))
    return hyp, hyp.attention_matrix()


def beam_search(
    params: ModelParams,
    src,
    beam_size: int = 10,
    max_out_len: int | None = None,
    length_norm: bool = False,
    trace: list[BeamStep] | None = None,
) -> list[tuple[Hypothesis, AttentionMatrix]]:
    """Beam search; returns the completed pool, best first.

    Each expansion keeps the top ``beam_size - len(pool)`` candidates;
    those ending in EOS retire to the pool. Without length normalization
    the search stops once the best completed score reaches the best live
    score, since appending tokens can only lower a score. Hypotheses still
    live after ``max_out_len`` tokens are retired unfinished.
    """
    if beam_size < 1:
        raise InputError("beam_size must be at least 1")
    dec = _Stepper(params, src)
    limit = default_max_out_len(dec.src_len) if max_out_len is None else max_out_len
    if limit < 1:
        raise InputError("max_out_len must be at least 1")

    live = [Hypothesis((), 0.0, dec.initial_state())]
    pool: list[Hypothesis] = []
    for step in range(limit):
        states = np.stack([h.state for h in live])
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live], dtype=np.int64)
        logp, new_states, alpha = dec.step(states, prev)
        base = np.array([h.logprob for h in live])
        cand = base[:, None] + logp
        width = beam_size - len(pool)
        rows, toks = np.nonzero(np.isfinite(cand))
        scores = cand[rows, toks]
        order = np.lexsort((toks, rows, -scores))
        chosen, rest = order[:width], order[width:]
        if trace is not None:
            trace.append(BeamStep([float(scores[i]) for i in chosen],
                                  float(scores[rest[0]]) if rest.size else None))

        next_live = []
        for i in chosen:
            r, tok = int(rows[i]), int(toks[i])
            parent = live[r]
            hyp = Hypothesis(
                parent.tokens + (tok,),
                float(scores[i]),
                new_states[r],
                parent.attention + [alpha[r]],
                tok == EOS,
                parent.step_logprobs + (float(logp[r, tok]),),
            )
            (pool if hyp.finished else next_live).append(hyp)
        live = next_live
        if not live or len(pool) >= beam_size:
            break
        if not length_norm and pool and max(h.logprob for h in pool) >= live[0].logprob:
            break
    else:
        pool.extend(live)

    ranked = sorted(pool, key=lambda h: -h.score(length_norm))
    return [(h, h.attention_matrix()) for h in ranked]


def force_decode(params: ModelParams, src, reference_ids: Sequence[int]) -> tuple[float, AttentionMatrix]:
    """Feed ``reference_ids`` (EOS appended if missing) and record attention.

    Returns the summed negative log-likelihood and the ``T_y x T_x`` matrix.
    """
    ref = [int(t) for t in reference_ids]
    if not ref:
        raise InputError("empty reference")
    if ref[-1] != EOS:
        ref.append(EOS)
    dec = _Stepper(params, src)
    state = dec.initial_state()[None]
    prev = BOS
    nll = 0.0
    rows = []
    for tok in ref:
        logp, state, alpha = dec.step(state, np.array([prev]))
        nll = nll - logp[0, tok]
        rows.append(alpha[0])
        prev = tok
    return float(nll), AttentionMatrix(np.array(rows))


def hard_align(att: AttentionMatrix | np.ndarray) -> list[tuple[int, int]]:
    """``(target_pos, source_pos)`` per target row; lowest source index on ties."""
    m = att.matrix if isinstance(att, AttentionMatrix) else np.asarray(att)
    return [(t, int(np.argmax(m[t]))) for t in range(m.shape[0])]


# ----------------------------------------------------------- batched helpers


def _encode_batch(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray):
    tape = Tape(recording=False)
    P = bind(params, tape)
    return P, encode(P, src_ids, src_mask)


def greedy_decode_batch(params: ModelParams, batch: Batch, max_out_len: int | None = None) -> list[list[int]]:
    """Greedy decoding of every batch row at once (used for dev-set selection).

    Row-wise equal to :func:`greedy_decode` up to floating-point summation
    order inside matrix products.
    """
    P, enc = _encode_batch(params, batch.src, batch.src_mask)
    n = batch.src.shape[0]
    lengths = batch.src_mask.sum(axis=1)
    limits = (np.full(n, max_out_len) if max_out_len is not None
              else default_max_out_len(lengths)).astype(np.int64)
    s = decoder_init(P, enc)
    prev = np.full(n, BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out: list[list[int]] = [[] for _ in range(n)]
    for step in range(int(limits.max())):
        o = decoder_step(P, s, prev, enc)
        logp = T.log_softmax(o.logits.value)
        logp[:, BANNED_OUTPUTS] = -np.inf
        toks = np.argmax(logp, axis=1)
        for r in np.flatnonzero(~done):
            out[r].append(int(toks[r]))
        done |= (toks == EOS) | (step + 1 >= limits)
        if done.all():
            break
        s, prev = o.s_t, toks
    return out


def force_decode_batch(params: ModelParams, batch: Batch) -> list[tuple[float, AttentionMatrix]]:
    """Forced decoding of a whole batch; targets in ``batch.tgt`` end with EOS."""
    P, enc = _encode_batch(params, batch.src, batch.src_mask)
    n, steps = batch.tgt.shape
    s = decoder_init(P, enc)
    prev = np.full(n, BOS, dtype=np.int64)
    nll = np.zeros(n)
    alphas = []
    for t in range(steps):
        o = decoder_step(P, s, prev, enc)
        logp = T.log_softmax(o.logits.value)
        picked = logp[np.arange(n), batch.tgt[:, t]]
        nll = nll - np.where(batch.tgt_mask[:, t], picked, 0.0)
        alphas.append(o.alpha_t.value)
        s, prev = o.s_t, batch.tgt[:, t]
    src_len = batch.src_mask.sum(axis=1)
    tgt_len = batch.tgt_mask.sum(axis=1)
    stacked = np.stack(alphas)  # (T_y, T_x, B)
    return [
        (float(nll[r]), AttentionMatrix(stacked[: tgt_len[r], : src_len[r], r]))
        for r in range(n)
    ]


def strip_eos(tokens: Sequence[int]) -> list[int]:
    toks = list(tokens)
    return toks[:-1] if toks and toks[-1] == EOS else toks
