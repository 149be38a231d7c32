"""``bnmt`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data,
3 numeric failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis as A
from . import tensor as T
from .data import (
    EOS_TOKEN,
    ToySpec,
    build_vocab,
    dump_manifest,
    encode_pairs,
    format_pharaoh,
    gen_toy_corpus,
    load_parallel,
    make_batch,
    read_alignments,
    read_lines,
    read_pos,
    read_tokenized,
    spec_from_manifest,
    toy_manifest,
    write_toy_corpus,
)
from .decode import (
    AttentionMatrix,
    beam_search,
    force_decode,
    greedy_decode,
    hard_align,
    strip_eos,
)
from .errors import (
    AlignmentFileError,
    BridgeError,
    ConfigError,
    InputError,
    NumericError,
)
from .model import UNK, ModelConfig, Variant, init_params
from .runs import DevSet, run_training
from .train import (
    TrainConfig,
    load_checkpoint,
    new_train_state,
    pretrain_then_bridge,
)

# ------------------------------------------------------------- run config


@dataclasses.dataclass(frozen=True)
class Key:
    type: Callable
    default: object
    help: str


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


RUN_KEYS: dict[str, Key] = {
    "train_src": Key(str, "", "training source file"),
    "train_tgt": Key(str, "", "training target file"),
    "dev_src": Key(str, "", "dev source file (model selection)"),
    "dev_tgt": Key(str, "", "dev reference file"),
    "out_dir": Key(str, "run", "run directory"),
    "init_from": Key(str, "", "warm-start checkpoint (direct-bridge: pre-trained donor)"),
    "variant": Key(str, "baseline", "baseline | source-bridge | target-bridge | direct-bridge"),
    "src_vocab_size": Key(int, 30000, "source vocabulary cap"),
    "tgt_vocab_size": Key(int, 30000, "target vocabulary cap"),
    "embed_dim": Key(int, 620, "word embedding size"),
    "hidden_dim": Key(int, 1000, "GRU hidden size"),
    "attention_dim": Key(_opt_int, None, "attention size (default: hidden_dim)"),
    "readout_dim": Key(_opt_int, None, "readout size (default: embed_dim // 2)"),
    "max_len": Key(int, 50, "drop training pairs longer than this"),
    "init_scale": Key(float, 0.05, "weights start uniform in [-init_scale, init_scale]"),
    "batch_size": Key(int, 80, "sentences per minibatch"),
    "max_epochs": Key(int, 10, "training epochs"),
    "dropout_rate": Key(float, 0.5, "readout dropout"),
    "adadelta_rho": Key(float, 0.95, "Adadelta decay"),
    "adadelta_eps": Key(float, 1e-6, "Adadelta epsilon"),
    "grad_clip_norm": Key(float, 1.0, "global gradient-norm clip"),
    "seed": Key(int, 1, "initialization, shuffling and dropout seed"),
    "bucketing": Key(_bool, True, "length-bucketed minibatches"),
    "weighted_bridge": Key(_bool, False, "bridge penalty on the attention-weighted embedding"),
    "checkpoint_every": Key(int, 0, "also save epoch-NNN.bnmt every N epochs (0: off)"),
    "patience": Key(int, 0, "stop after N epochs without dev improvement (0: off)"),
    "log_wall_time": Key(_bool, False, "record wall-clock ms per step (breaks byte reproducibility)"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    resolved = {}
    for key, spec in RUN_KEYS.items():
        raw = overrides.get(key, file_values.get(key, spec.default))
        try:
            resolved[key] = spec.type(raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    resolved["variant"] = Variant.parse(resolved["variant"]).value
    return resolved


def format_config(resolved: dict) -> str:
    lines = []
    for key in RUN_KEYS:
        value = resolved[key]
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- helpers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _write_lines(path, lines: Sequence[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _eprint(*args):
    print(*args, file=sys.stderr)


def _ordered_map(fn, items, jobs: int):
    """Map preserving order; a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# worker globals, set before forking a pool
_WORK: dict = {}


# ----------------------------------------------------------------- toygen


def cmd_toygen(args) -> int:
    if args.from_manifest:
        spec, splits = spec_from_manifest(json.loads(Path(args.from_manifest).read_text()))
    else:
        spec = ToySpec(args.vocab_size, args.n_pairs, args.min_len, args.max_len,
                       args.swap_prob, args.seed)
        splits = _parse_splits(args.splits, spec.n_pairs)
    corpus = gen_toy_corpus(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if splits:
            for name, part in zip(splits, corpus.split(list(splits.values()))):
                write_toy_corpus(part, out, f"{args.prefix}.{name}")
        else:
            write_toy_corpus(corpus, out, args.prefix)
        dump_manifest(out / f"{args.prefix}.manifest.json", toy_manifest(spec, splits))
        lex = out / f"{args.prefix}.lexicon"
        lex.write_text("".join(f"{s} {t}\n" for s, t in corpus.lexicon.items()), encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    _eprint(f"wrote {spec.n_pairs} pairs to {out}")
    return 0


def _parse_splits(text: str | None, total: int) -> dict[str, int]:
    if not text:
        return {}
    splits = {}
    for item in text.split(","):
        name, _, n = item.partition("=")
        if not name or not n.isdigit():
            raise ConfigError(f"bad split {item!r}; expected name=count")
        splits[name.strip()] = int(n)
    if sum(splits.values()) != total:
        raise ConfigError(f"split sizes sum to {sum(splits.values())}, not {total}")
    return splits


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    file_values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in RUN_KEYS if getattr(args, k, None) is not None}
    cfg = resolve_config(file_values, overrides)
    for key in ("train_src", "train_tgt"):
        if not cfg[key]:
            raise ConfigError(f"{key} is required")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_config(cfg), encoding="utf-8")

    pairs, dropped = load_parallel(cfg["train_src"], cfg["train_tgt"], cfg["max_len"])
    if dropped:
        _eprint(f"dropped {dropped} training pairs (empty or longer than {cfg['max_len']})")
    variant = Variant.parse(cfg["variant"])
    donor = load_checkpoint(cfg["init_from"]) if cfg["init_from"] else None
    if donor is not None:
        if donor.src_vocab is None or donor.tgt_vocab is None:
            raise ConfigError("warm-start checkpoint carries no vocabularies")
        src_vocab, tgt_vocab = donor.src_vocab, donor.tgt_vocab
    else:
        src_vocab = build_vocab([p.src for p in pairs], cfg["src_vocab_size"])
        tgt_vocab = build_vocab([p.tgt for p in pairs], cfg["tgt_vocab_size"])
    model_cfg = ModelConfig(
        len(src_vocab), len(tgt_vocab), cfg["embed_dim"], cfg["hidden_dim"], cfg["attention_dim"],
        cfg["readout_dim"], cfg["max_len"], variant, cfg["dropout_rate"], cfg["init_scale"],
    )
    if donor is None:
        params = init_params(model_cfg, cfg["seed"])
    elif variant is Variant.DIRECT_BRIDGE:
        params = pretrain_then_bridge(donor.params, model_cfg, cfg["seed"])
    else:
        if donor.config != model_cfg:
            raise ConfigError("warm-start checkpoint config differs from the requested model")
        params = donor.params.copy()
    tc = TrainConfig(cfg["batch_size"], cfg["adadelta_rho"], cfg["adadelta_eps"], cfg["dropout_rate"],
                     cfg["max_epochs"], cfg["grad_clip_norm"], cfg["seed"], variant, cfg["bucketing"],
                     cfg["weighted_bridge"])
    dev = None
    if cfg["dev_src"]:
        if not cfg["dev_tgt"]:
            raise ConfigError("dev_src given without dev_tgt")
        dev_pairs, _ = load_parallel(cfg["dev_src"], cfg["dev_tgt"], max_len=10**9)
        dev = DevSet([src_vocab.encode(p.src) for p in dev_pairs], [list(p.tgt) for p in dev_pairs])
    ids = encode_pairs(pairs, src_vocab, tgt_vocab)
    result = run_training(new_train_state(params, tc), ids, tc, dev, src_vocab, tgt_vocab, out,
                          cfg["checkpoint_every"], cfg["patience"], cfg["log_wall_time"])
    _eprint(f"best epoch {result.best_epoch} dev BLEU {result.best_bleu:.4f}")
    return 0


# -------------------------------------------------------------- translate


def _translate_one(ids):
    params, beam, max_out, norm = _WORK["params"], _WORK["beam"], _WORK["max_out"], _WORK["norm"]
    if beam == 1:
        hyp, att = greedy_decode(params, ids, max_out)
    else:
        hyp, att = beam_search(params, ids, beam, max_out, norm)[0]
    return list(hyp.tokens), att.matrix


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
        raise ConfigError("checkpoint carries no vocabularies")
    if args.beam < 1:
        raise ConfigError("--beam must be at least 1")
    sentences = read_tokenized(args.input)
    unknown = 0
    src_ids = []
    for k, sent in enumerate(sentences, start=1):
        if not sent:
            raise InputError(f"{args.input}:{k}: empty line")
        ids = ckpt.src_vocab.encode(sent)
        unknown += sum(1 for i in ids if i == UNK)
        src_ids.append(ids)
    _WORK.update(params=ckpt.params, beam=args.beam, max_out=args.max_out_len, norm=args.length_norm)
    results = _ordered_map(_translate_one, src_ids, args.jobs)
    _write_lines(args.output, [" ".join(ckpt.tgt_vocab.decode(strip_eos(t))) for t, _ in results])
    if args.dump_attention:
        lines = []
        for sent, (toks, m) in zip(sentences, results):
            tgt_tokens = ckpt.tgt_vocab.decode(toks)
            lines.append(AttentionMatrix(m, list(sent) + [EOS_TOKEN], tgt_tokens).to_json())
        _write_lines(args.dump_attention, lines)
    if unknown:
        _eprint(f"{unknown} unknown source tokens mapped to <unk>")
    return 0


# ------------------------------------------------------------------ align


def _align_one(item):
    src_ids, tgt_ids = item
    return force_decode(_WORK["params"], src_ids, tgt_ids)


def forced_alignments(params, src_ids, tgt_ids, jobs: int = 1):
    """Forced-decoding ``(nll, AttentionMatrix)`` per sentence pair."""
    _WORK["params"] = params
    return _ordered_map(_align_one, list(zip(src_ids, tgt_ids)), jobs)


def cmd_align(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
        raise ConfigError("checkpoint carries no vocabularies")
    src = read_tokenized(args.src)
    ref = read_tokenized(args.ref)
    if len(src) != len(ref):
        raise AlignmentFileError(f"{args.src} has {len(src)} lines but {args.ref} has {len(ref)}")
    for k, (s, r) in enumerate(zip(src, ref), start=1):
        if not s or not r:
            raise InputError(f"line {k}: empty sentence")
    results = forced_alignments(ckpt.params, [ckpt.src_vocab.encode(s) for s in src],
                                [ckpt.tgt_vocab.encode(r) for r in ref], args.jobs)
    links = [format_pharaoh(A.links_from_hard(hard_align(att), len(r), len(s)))
             for (_, att), s, r in zip(results, src, ref)]
    _write_lines(args.output, links)
    if args.dump_attention:
        _write_lines(args.dump_attention, [
            AttentionMatrix(att.matrix, list(s) + [EOS_TOKEN], list(r) + [EOS_TOKEN]).to_json()
            for (_, att), s, r in zip(results, src, ref)
        ])
    if args.nll:
        _write_lines(args.nll, [repr(nll) for nll, _ in results])
    return 0


# ---------------------------------------------------------------- analyze


def _read_attention(path) -> list[AttentionMatrix]:
    out = []
    for k, line in enumerate(read_lines(path), start=1):
        try:
            out.append(AttentionMatrix.from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{k}: bad attention record ({exc})") from None
    return out


def _need(args, *names):
    for name in names:
        if not getattr(args, name):
            raise ConfigError(f"this metric needs --{name.replace('_', '-')}")


def _refs(args):
    ref_sets = [read_tokenized(p) for p in args.ref]
    n = len(ref_sets[0])
    for p, r in zip(args.ref, ref_sets):
        if len(r) != n:
            raise AlignmentFileError(f"{p} has {len(r)} lines, expected {n}")
    return [[rs[i] for rs in ref_sets] for i in range(n)]


def _labels(att: AttentionMatrix, k: int, path):
    if att.src_tokens is None or att.tgt_tokens is None:
        raise InputError(f"{path}:{k}: attention record carries no token labels")
    src = att.src_tokens[:-1] if att.src_tokens and att.src_tokens[-1] == EOS_TOKEN else att.src_tokens
    tgt = att.tgt_tokens[:-1] if att.tgt_tokens and att.tgt_tokens[-1] == EOS_TOKEN else att.tgt_tokens
    return list(src), list(tgt)


def analyze(args) -> A.MetricReport:
    metric = args.metric
    if metric in ("bleu", "bleu1"):
        _need(args, "hyp", "ref")
        hyps, refs = read_tokenized(args.hyp), _refs(args)
        if len(hyps) != len(refs):
            raise AlignmentFileError(f"{args.hyp} has {len(hyps)} lines, references {len(refs)}")
        value = A.corpus_bleu(hyps, refs, 1 if metric == "bleu1" else 4, smooth=args.smooth)
        return A.MetricReport(metric, value, {}, len(hyps))
    if metric == "length-bleu":
        _need(args, "hyp", "ref", "src")
        hyps, refs, src = read_tokenized(args.hyp), _refs(args), read_tokenized(args.src)
        edges = [int(e) for e in args.edges.split(",")]
        buckets = A.length_bucket_bleu(hyps, refs, [len(s) for s in src], edges, smooth=args.smooth)
        total = A.corpus_bleu(hyps, refs, smooth=args.smooth)
        breakdown = {k: {"bleu": v["bleu"], "count": v["count"]} for k, v in buckets.items()}
        return A.MetricReport(metric, total, breakdown, len(hyps))
    if metric == "eos-rate":
        _need(args, "attention")
        mats = _read_attention(args.attention)
        return A.MetricReport(metric, A.eos_alignment_rate(mats), {}, len(mats))
    if metric in ("aer", "saer"):
        _need(args, "gold_align")
        gold = read_alignments(args.gold_align)
        if metric == "aer" and args.pred_align:
            preds = [g.sure for g in read_alignments(args.pred_align)]
        else:
            _need(args, "attention")
            mats = _read_attention(args.attention)
            if metric == "saer":
                if len(mats) != len(gold):
                    raise AlignmentFileError(f"{len(mats)} matrices but {len(gold)} gold lines")
                value = A.corpus_saer([A.strip_eos_matrix(m) for m in mats], gold)
                return A.MetricReport(metric, value, {}, len(gold))
            preds = [A.links_from_hard(hard_align(m), m.shape[0] - 1, m.shape[1] - 1) for m in mats]
        if len(preds) != len(gold):
            raise AlignmentFileError(f"{len(preds)} predicted but {len(gold)} gold lines")
        return A.MetricReport(metric, A.corpus_aer(preds, gold), {}, len(gold))
    if metric == "rot":
        _need(args, "attention")
        mats = _read_attention(args.attention)
        labels = [_labels(m, k, args.attention) for k, m in enumerate(mats, start=1)]
        tags, filt = None, None
        if args.tag_filter:
            _need(args, "src_pos")
            _, tags = read_pos(args.src_pos)
            filt = set(args.tag_filter.split(","))
        value = A.rot([hard_align(m) for m in mats], [s for s, _ in labels], [t for _, t in labels],
                      tags, filt)
        return A.MetricReport(metric, value, {"filter": sorted(filt) if filt else "ALL"}, len(mats))
    if metric == "pos-confusion":
        _need(args, "attention", "src_pos", "tgt_pos")
        mats = _read_attention(args.attention)
        labels = [_labels(m, k, args.attention) for k, m in enumerate(mats, start=1)]
        _, src_tags = read_pos(args.src_pos)
        _, tgt_tags = read_pos(args.tgt_pos)
        table = A.pos_confusion([hard_align(m) for m in mats], src_tags, tgt_tags, None,
                                [len(s) for s, _ in labels], [len(t) for _, t in labels])
        return A.MetricReport(metric, float(len(table)), table, len(mats))
    if metric == "nearest":
        _need(args, "checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
            raise ConfigError("checkpoint carries no vocabularies")
        if args.words:
            words = args.words.split(",")
        else:
            _need(args, "src")
            words = _most_frequent(read_tokenized(args.src), args.top_frequent)
        rows = A.nearest_target_words(ckpt.params, [ckpt.src_vocab.id(w) for w in words], args.k)
        breakdown = {w: [[ckpt.tgt_vocab.token(t), d] for t, d in near]
                     for w, (_, near) in zip(words, rows)}
        return A.MetricReport(metric, float(len(words)), breakdown, 0)
    raise ConfigError(f"unknown metric {metric!r}")


def _most_frequent(sentences, n: int) -> list[str]:
    from collections import Counter
    counts = Counter(w for s in sentences for w in s)
    return [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def _table(report: A.MetricReport) -> str:
    lines = [f"{report.name}: {report.value:.6g} (n={report.n_sentences})"]
    for key, val in report.breakdown.items():
        lines.append(f"  {key:>12}  {json.dumps(val)}")
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    report = analyze(args)
    print(report.to_json())
    _eprint(_table(report))
    if args.figure:
        from . import plotting
        if report.name == "length-bleu":
            plotting.length_bleu_figure(report.breakdown, args.figure)
        elif report.name == "pos-confusion":
            plotting.confusion_figure(report.breakdown, args.figure)
        elif report.name in ("eos-rate", "aer", "saer") and args.attention:
            first = _read_attention(args.attention)[0]
            plotting.attention_figure(first.matrix, args.figure, first.src_tokens, first.tgt_tokens)
        else:
            plotting.metric_bar_figure({report.name: report.value}, args.figure, report.name)
    return 0


# -------------------------------------------------------------- gradcheck


def gradcheck_model(variant, embed_dim=8, hidden_dim=12, vocab=20, length=5, tolerance=1e-4,
                    seed=0, max_coords=20, step=1e-4):
    """Finite-difference check of the full teacher-forced loss for one variant."""
    from .model import bind_nodes
    from .train import sentence_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab, vocab, embed_dim, hidden_dim, variant=variant,
                      readout_dim=max(1, embed_dim // 2))
    params = init_params(cfg, seed)
    for a in params.arrays.values():
        a += rng.uniform(-0.3, 0.3, size=a.shape)
    pairs = [(tuple(rng.integers(4, vocab, size=length - 1)), tuple(rng.integers(4, vocab, size=length - 1)))
             for _ in range(2)]
    batch = make_batch(pairs)

    def loss(nodes):
        return sentence_loss(bind_nodes(params, nodes), batch, True, np.random.default_rng(seed + 1)).loss

    return T.grad_check(loss, params.arrays, step=step, tolerance=tolerance, floor=1e-6,
                        max_coords=max_coords, seed=seed)


def gradcheck_ops(tolerance=1e-6, seed=0) -> dict[str, T.GradCheckReport]:
    """Finite-difference check of each differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)
    mask = np.array([[1, 1], [1, 0], [1, 0]], dtype=bool)
    drop_seed = int(rng.integers(1 << 30))
    cases = {
        "add": (lambda n: T.sum_all(T.mul(T.add(n["a"], n["b"]), n["c"])), {"a": r(3, 2), "b": r(3, 2), "c": r(3, 2)}),
        "sub": (lambda n: T.sum_all(T.mul(T.sub(n["a"], n["b"]), n["c"])), {"a": r(3, 2), "b": r(3, 2), "c": r(3, 2)}),
        "mul": (lambda n: T.sum_all(T.mul(n["a"], n["b"])), {"a": r(3, 2), "b": r(3, 2)}),
        "tanh": (lambda n: T.squared_l2(T.tanh(n["a"])), {"a": r(3, 2)}),
        "sigmoid": (lambda n: T.squared_l2(T.sigmoid(n["a"])), {"a": r(3, 2)}),
        "matmul": (lambda n: T.squared_l2(T.matmul(n["a"], n["b"])), {"a": r(2, 3, 4), "b": r(4, 2)}),
        "linear": (lambda n: T.squared_l2(T.linear(n["a"], n["w"], n["b"])), {"a": r(3, 4), "w": r(4, 2), "b": r(2)}),
        "transpose": (lambda n: T.squared_l2(T.matmul(T.transpose(n["a"]), n["b"])), {"a": r(3, 2), "b": r(3, 2)}),
        "concat": (lambda n: T.squared_l2(T.concat([n["a"], n["b"]], axis=1) * 1.5), {"a": r(2, 3), "b": r(2, 1)}),
        "stack": (lambda n: T.squared_l2(T.tanh(T.stack([n["a"], n["b"]], axis=0))), {"a": r(2, 3), "b": r(2, 3)}),
        "take_cols": (lambda n: T.squared_l2(T.take_cols(n["a"], 1, 3)), {"a": r(2, 4)}),
        "gather_rows": (lambda n: T.squared_l2(T.gather_rows(n["a"], np.array([2, 0, 2]))), {"a": r(4, 3)}),
        "where": (lambda n: T.squared_l2(T.where(mask, n["a"], n["b"])), {"a": r(3, 2), "b": r(3, 2)}),
        "squared_l2": (lambda n: T.sum_all(T.mul(T.squared_l2(n["a"], axis=1), n["w"])), {"a": r(3, 2), "w": r(3)}),
        "dropout": (lambda n: T.squared_l2(T.dropout(n["a"], 0.5, np.random.default_rng(drop_seed), True)), {"a": r(3, 4)}),
        "masked_softmax": (lambda n: T.sum_all(T.mul(T.masked_softmax(n["a"], mask, axis=0), n["w"])), {"a": r(3, 2), "w": r(3, 2)}),
        "additive_scores": (lambda n: T.squared_l2(T.additive_scores(n["k"], n["q"], n["v"])), {"k": r(3, 2, 4), "q": r(2, 4), "v": r(4)}),
        "weighted_time_sum": (lambda n: T.squared_l2(T.weighted_time_sum(n["w"], n["x"])), {"w": r(3, 2), "x": r(3, 2, 4)}),
        "softmax_nll": (lambda n: T.sum_all(T.softmax_nll(n["a"], np.array([1, 0, 3]))), {"a": r(3, 4)}),
        "gru_cell": (lambda n: T.squared_l2(T.gru_cell(n["x"], n["h"], n["w"], n["b"], n["u"], n["ux"])),
                     {"x": r(2, 3), "h": r(2, 4), "w": r(3, 12), "b": r(12), "u": r(4, 8), "ux": r(4, 4)}),
    }
    return {op: T.grad_check(fn, point, step=1e-5, tolerance=tolerance) for op, (fn, point) in cases.items()}


def cmd_gradcheck(args) -> int:
    variants = list(Variant) if args.variant == "all" else [Variant.parse(args.variant)]
    failed = []
    import contextlib
    ctx = T.inject_adjoint_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with ctx:
        for op, rep in gradcheck_ops(seed=args.seed).items():
            status = "ok" if rep.passed else "FAIL"
            print(f"op {op:<18} max_rel_err {rep.overall:.3e}  {status}")
            if not rep.passed:
                failed.append(f"op {op}")
        for v in variants:
            rep = gradcheck_model(v, args.embed_dim, args.hidden_dim, args.vocab, args.length,
                                  args.tolerance, args.seed)
            groups: dict[str, float] = {}
            for name, err in rep.max_rel_error.items():
                g = name.split(".")[0]
                groups[g] = max(groups.get(g, 0.0), err)
            print(f"variant {v.value}: max_rel_err {rep.overall:.3e}  {'ok' if rep.passed else 'FAIL'}")
            for g, err in groups.items():
                print(f"  {g:<10} {err:.3e}")
            if not rep.passed:
                worst = max(rep.max_rel_error, key=rep.max_rel_error.get)
                failed.append(f"variant {v.value} (worst {worst}{list(rep.worst_index[worst])})")
    if failed:
        if args.inject_fault:
            _eprint(f"adjoint fault injected into op {args.inject_fault!r}")
        raise NumericError("gradient check failed: " + ", ".join(failed))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bnmt", description="Attention NMT with source/target/direct embedding bridging.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("toygen", help="generate the synthetic toy corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--prefix", default="toy")
    g.add_argument("--vocab-size", type=int, default=50)
    g.add_argument("--n-pairs", type=int, default=5000)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=12)
    g.add_argument("--swap-prob", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--splits", default=None, help="e.g. train=4500,dev=250,test=250")
    g.add_argument("--from-manifest", default=None, help="regenerate from a manifest file")
    g.set_defaults(func=cmd_toygen)

    t = sub.add_parser("train", help="train a model (best checkpoint by dev BLEU)",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--config", default=None, help="key = value file; flags override it")
    for key, spec in RUN_KEYS.items():
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       help=f"{spec.help} (default: {spec.default})")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a tokenized file",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", default="-")
    tr.add_argument("--beam", type=int, default=10)
    tr.add_argument("--max-out-len", type=int, default=None, help="default: 2 * source length + 5")
    tr.add_argument("--length-norm", action="store_true", help="rank by score per token")
    tr.add_argument("--dump-attention", default=None, help="JSON-lines attention output")
    tr.add_argument("--jobs", type=int, default=1)
    tr.set_defaults(func=cmd_translate)

    al = sub.add_parser("align", help="forced-decoding attention and hard alignments",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    al.add_argument("--checkpoint", required=True)
    al.add_argument("--src", required=True)
    al.add_argument("--ref", required=True)
    al.add_argument("--output", default="-", help="Pharaoh hard alignments (EOS links dropped)")
    al.add_argument("--dump-attention", default=None)
    al.add_argument("--nll", default=None, help="per-sentence negative log-likelihood")
    al.add_argument("--jobs", type=int, default=1)
    al.set_defaults(func=cmd_align)

    an = sub.add_parser("analyze", help="compute a metric; JSON to stdout, table to stderr",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    an.add_argument("metric", choices=["bleu", "bleu1", "eos-rate", "aer", "saer", "rot",
                                       "pos-confusion", "length-bleu", "nearest"])
    an.add_argument("--hyp")
    an.add_argument("--ref", action="append", help="repeat for multiple references")
    an.add_argument("--src")
    an.add_argument("--attention", help="attention dump from translate or align")
    an.add_argument("--pred-align", help="predicted Pharaoh alignments")
    an.add_argument("--gold-align", help="gold Pharaoh alignments")
    an.add_argument("--src-pos")
    an.add_argument("--tgt-pos")
    an.add_argument("--tag-filter", help="comma-separated source tags for rot")
    an.add_argument("--edges", default="10,20,30,40,50")
    an.add_argument("--smooth", action="store_true", help="add-one smoothing for n >= 2")
    an.add_argument("--checkpoint")
    an.add_argument("--words", help="comma-separated source words for nearest")
    an.add_argument("--top-frequent", type=int, default=10)
    an.add_argument("--k", type=int, default=5)
    an.add_argument("--figure", help="also render a figure to this file")
    an.set_defaults(func=cmd_analyze)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gc.add_argument("--variant", default="all")
    gc.add_argument("--embed-dim", type=int, default=8)
    gc.add_argument("--hidden-dim", type=int, default=12)
    gc.add_argument("--vocab", type=int, default=20)
    gc.add_argument("--length", type=int, default=5)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-fault", default=None, help="negate this op's adjoint")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except BridgeError as exc:
        _eprint(f"error: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _eprint(f"error: {exc}")
        return 2
    except OSError as exc:
        _eprint(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
