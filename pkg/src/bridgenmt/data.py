"""Vocabularies, parallel corpora, batching and the synthetic toy task."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentFileError, ConfigError, InputError
from .model import EOS, N_RESERVED, PAD, UNK

logger = logging.getLogger(__name__)

RESERVED_TOKENS = ("<pad>", "<unk>", "</s>", "<s>")
EOS_TOKEN = RESERVED_TOKENS[EOS]


class Vocabulary:
    """Bijective token/id map with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_RESERVED]) != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def coverage(self, sentences: Iterable[Sequence[str]]) -> float:
        """Fraction of running tokens that are in the vocabulary."""
        total = hit = 0
        for sent in sentences:
            total += len(sent)
            hit += sum(1 for t in sent if t in self.stoi and self.stoi[t] >= N_RESERVED)
        return hit / total if total else 0.0


def build_vocab(sentences: Iterable[Sequence[str]], cap: int) -> Vocabulary:
    """Most frequent ``cap - 4`` tokens (ties broken lexicographically)."""
    if cap < 5:
        raise ConfigError("vocabulary cap must be at least 5")
    counts = Counter()
    for sent in sentences:
        counts.update(sent)
    for tok in RESERVED_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED_TOKENS) + [t for t, _ in ranked[: cap - N_RESERVED]])


@dataclass(frozen=True)
class SentencePair:
    src: tuple[str, ...]
    tgt: tuple[str, ...]


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def read_tokenized(path) -> list[list[str]]:
    return [line.split() for line in read_lines(path)]


def write_tokenized(path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


def load_parallel(src_path, tgt_path, max_len: int = 50) -> tuple[list[SentencePair], int]:
    """Read line-aligned files; returns the kept pairs and the number dropped.

    Pairs with an empty side or a side longer than ``max_len`` tokens are dropped.
    """
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise AlignmentFileError(
            f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}"
        )
    pairs, dropped = [], 0
    for lineno, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        src, tgt = tuple(s.split()), tuple(t.split())
        if not src or not tgt:
            logger.warning("line %d: empty side, pair dropped", lineno)
            dropped += 1
            continue
        if len(src) > max_len or len(tgt) > max_len:
            dropped += 1
            continue
        pairs.append(SentencePair(src, tgt))
    return pairs, dropped


def encode_pairs(pairs: Iterable[SentencePair], src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [(tuple(src_vocab.encode(p.src)), tuple(tgt_vocab.encode(p.tgt))) for p in pairs]


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    """Padded id matrices; each row's real content ends with EOS."""

    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    def padded(self, extra_src: int = 0, extra_tgt: int = 0) -> "Batch":
        """The same batch with additional PAD columns."""
        b = len(self)
        return Batch(
            np.hstack([self.src, np.full((b, extra_src), PAD, dtype=np.int64)]),
            np.hstack([self.src_mask, np.zeros((b, extra_src), dtype=bool)]),
            np.hstack([self.tgt, np.full((b, extra_tgt), PAD, dtype=np.int64)]),
            np.hstack([self.tgt_mask, np.zeros((b, extra_tgt), dtype=bool)]),
        )

    def rows(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.src[idx], self.src_mask[idx], self.tgt[idx], self.tgt_mask[idx])


def _pad(seqs: Sequence[Sequence[int]]):
    width = max(len(s) for s in seqs) + 1
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        ids[i, len(s)] = EOS
        mask[i, : len(s) + 1] = True
    return ids, mask


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad id pairs (without EOS) into one batch, appending EOS to each side."""
    if not pairs:
        raise InputError("cannot batch zero pairs")
    src, src_mask = _pad([p[0] for p in pairs])
    tgt, tgt_mask = _pad([p[1] for p in pairs])
    return Batch(src, src_mask, tgt, tgt_mask)


def unbatch(batch: Batch) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    out = []
    for i in range(len(batch)):
        s = batch.src[i][batch.src_mask[i]]
        t = batch.tgt[i][batch.tgt_mask[i]]
        out.append((tuple(int(x) for x in s[:-1]), tuple(int(x) for x in t[:-1])))
    return out


def make_batches(pairs, batch_size: int, seed: int, bucketing: bool = False) -> list[Batch]:
    """Shuffled minibatches; with ``bucketing``, batches hold similar source lengths."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    pairs = list(pairs)
    rng = np.random.default_rng(seed)
    if bucketing:
        order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), i))
        chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        order = rng.permutation(len(pairs)).tolist()
        chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [make_batch([pairs[i] for i in chunk]) for chunk in chunks]


def padding_fraction(batches: Sequence[Batch]) -> float:
    cells = sum(b.src_mask.size + b.tgt_mask.size for b in batches)
    real = sum(int(b.src_mask.sum() + b.tgt_mask.sum()) for b in batches)
    return 1.0 - real / cells


# ---------------------------------------------------------------- alignments


Link = tuple[int, int]


@dataclass
class GoldAlignment:
    """Sure and possible (src_pos, tgt_pos) links; sure links are also possible."""

    sure: set[Link] = field(default_factory=set)
    possible: set[Link] = field(default_factory=set)

    def __post_init__(self):
        self.possible = set(self.possible) | set(self.sure)


def parse_pharaoh(line: str) -> GoldAlignment:
    """``"0-0 1?2"``: ``i-j`` is a sure link, ``i?j`` a possible one (0-indexed)."""
    sure, possible = set(), set()
    for item in line.split():
        sep = "-" if "-" in item else "?" if "?" in item else None
        if sep is None:
            raise InputError(f"bad alignment link {item!r}")
        try:
            i, j = item.split(sep)
            link = (int(i), int(j))
        except ValueError:
            raise InputError(f"bad alignment link {item!r}") from None
        if link[0] < 0 or link[1] < 0:
            raise InputError(f"negative position in alignment link {item!r}")
        (sure if sep == "-" else possible).add(link)
    return GoldAlignment(sure, possible)


def format_pharaoh(gold: GoldAlignment | Iterable[Link]) -> str:
    if isinstance(gold, GoldAlignment):
        items = [f"{i}-{j}" for i, j in sorted(gold.sure)]
        items += [f"{i}?{j}" for i, j in sorted(gold.possible - gold.sure)]
    else:
        items = [f"{i}-{j}" for i, j in sorted(gold)]
    return " ".join(items)


def read_alignments(path) -> list[GoldAlignment]:
    return [parse_pharaoh(line) for line in read_lines(path)]


def write_alignments(path, alignments) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in alignments:
            fh.write(format_pharaoh(a) + "\n")


# ----------------------------------------------------------------- toy corpus


@dataclass(frozen=True)
class ToySpec:
    """Synthetic translation task.

    Source sentences are uniform random draws from ``vocab_size`` words.
    The target is the word-by-word image under a fixed random bijective
    lexicon, with local reordering: words are split into modifiers and
    heads, and a modifier directly followed by a head swaps places with it
    (scanning left to right, swaps never overlap). The modifier share is
    chosen so that a random adjacent pair is a swap candidate with
    probability ``swap_prob``; reordering is thus a deterministic function
    of the source and the task is exactly learnable.
    """

    vocab_size: int = 50
    n_pairs: int = 5000
    min_len: int = 3
    max_len: int = 12
    swap_prob: float = 0.2
    seed: int = 1

    def __post_init__(self):
        if self.vocab_size < 10:
            raise ConfigError("toy vocab_size must be at least 10")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.swap_prob <= 0.25:
            raise ConfigError("swap_prob must lie in [0, 0.25]")
        if self.n_pairs < 0:
            raise ConfigError("n_pairs must be non-negative")

    @property
    def n_modifiers(self) -> int:
        q = (1.0 - math.sqrt(1.0 - 4.0 * self.swap_prob)) / 2.0
        return int(round(q * self.vocab_size))


@dataclass
class ToyCorpus:
    spec: ToySpec
    src: list[list[str]]
    tgt: list[list[str]]
    alignments: list[GoldAlignment]
    lexicon: dict[str, str]
    modifiers: frozenset[str]
    src_pos: list[list[str]]
    tgt_pos: list[list[str]]

    def pairs(self) -> list[SentencePair]:
        return [SentencePair(tuple(s), tuple(t)) for s, t in zip(self.src, self.tgt)]

    def split(self, sizes: Sequence[int]) -> list["ToyCorpus"]:
        """Consecutive slices of the given sizes (the last may be short)."""
        out, start = [], 0
        for n in sizes:
            sl = slice(start, start + n)
            out.append(ToyCorpus(self.spec, self.src[sl], self.tgt[sl], self.alignments[sl],
                                 self.lexicon, self.modifiers, self.src_pos[sl], self.tgt_pos[sl]))
            start += n
        return out


def toy_word(side: str, i: int) -> str:
    return f"{side}{i}"


def gen_toy_corpus(spec: ToySpec) -> ToyCorpus:
    rng = np.random.default_rng(spec.seed)
    v = spec.vocab_size
    src_words = [toy_word("s", i) for i in range(v)]
    image = rng.permutation(v)
    lexicon = {src_words[i]: toy_word("t", int(image[i])) for i in range(v)}
    modifiers = frozenset(src_words[i] for i in rng.permutation(v)[: spec.n_modifiers])

    src, tgt, aligns, src_pos, tgt_pos = [], [], [], [], []
    for _ in range(spec.n_pairs):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = [src_words[i] for i in rng.integers(0, v, size=n)]
        order = list(range(n))
        i = 0
        while i < n - 1:
            if sent[i] in modifiers and sent[i + 1] not in modifiers:
                order[i], order[i + 1] = order[i + 1], order[i]
                i += 2
            else:
                i += 1
        tags = ["JJ" if w in modifiers else "NN" for w in sent]
        src.append(sent)
        tgt.append([lexicon[sent[k]] for k in order])
        src_pos.append(tags)
        tgt_pos.append([tags[k] for k in order])
        aligns.append(GoldAlignment(sure={(k, j) for j, k in enumerate(order)}))
    return ToyCorpus(spec, src, tgt, aligns, lexicon, modifiers, src_pos, tgt_pos)


def write_pos(path, sentences, tags) -> None:
    write_tokenized(path, ([f"{w}_{t}" for w, t in zip(s, g)] for s, g in zip(sentences, tags)))


def split_pos_token(item: str) -> tuple[str, str]:
    word, sep, tag = item.rpartition("_")
    if not sep or not word or not tag:
        raise InputError(f"POS token {item!r} is not of the form surface_TAG")
    return word, tag


def read_pos(path) -> tuple[list[list[str]], list[list[str]]]:
    """Read a ``surface_TAG`` file; returns (tokens, tags) per line."""
    words, tags = [], []
    for lineno, line in enumerate(read_lines(path), start=1):
        try:
            pairs = [split_pos_token(item) for item in line.split()]
        except InputError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
        words.append([w for w, _ in pairs])
        tags.append([t for _, t in pairs])
    return words, tags


def write_toy_corpus(corpus: ToyCorpus, out_dir, prefix: str = "toy") -> dict[str, Path]:
    """Write src/tgt/align/pos files; returns the written paths by role."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "src": out_dir / f"{prefix}.src",
        "tgt": out_dir / f"{prefix}.tgt",
        "align": out_dir / f"{prefix}.align",
        "src_pos": out_dir / f"{prefix}.src.pos",
        "tgt_pos": out_dir / f"{prefix}.tgt.pos",
    }
    write_tokenized(paths["src"], corpus.src)
    write_tokenized(paths["tgt"], corpus.tgt)
    write_alignments(paths["align"], corpus.alignments)
    write_pos(paths["src_pos"], corpus.src, corpus.src_pos)
    write_pos(paths["tgt_pos"], corpus.tgt, corpus.tgt_pos)
    return paths


def toy_manifest(spec: ToySpec, splits: dict[str, int] | None = None) -> dict:
    # splits as an ordered list: the corpus is cut in this order
    return {"format": "bnmt-toy/1", "spec": asdict(spec),
            "splits": [[name, n] for name, n in (splits or {}).items()]}


def spec_from_manifest(manifest: dict) -> tuple[ToySpec, dict[str, int]]:
    if manifest.get("format") != "bnmt-toy/1":
        raise InputError("not a toy-corpus manifest")
    try:
        return ToySpec(**manifest["spec"]), {str(k): int(n) for k, n in manifest.get("splits", [])}
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed toy-corpus manifest ({exc})") from None


def dump_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
