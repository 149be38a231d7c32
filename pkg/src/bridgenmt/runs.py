"""Training runs with dev-set model selection and on-disk artifacts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .analysis import corpus_bleu
from .data import Vocabulary, make_batch
from .decode import greedy_decode_batch, strip_eos
from .model import ModelParams
from .train import (
    Checkpoint,
    LogRecord,
    TrainConfig,
    TrainState,
    checkpoint_from_state,
    save_checkpoint,
    train_loop,
)


@dataclass
class DevSet:
    src_ids: list[list[int]]
    refs: list[list[str]]

    def __post_init__(self):
        if len(self.src_ids) != len(self.refs):
            raise ValueError("dev sources and references differ in count")


def translate_greedy(params: ModelParams, src_ids: Sequence[Sequence[int]], tgt_vocab: Vocabulary,
                     batch_size: int = 250) -> list[list[str]]:
    """Batched greedy translations as token lists (EOS removed)."""
    out = []
    for start in range(0, len(src_ids), batch_size):
        chunk = [(s, (0,)) for s in src_ids[start:start + batch_size]]
        for ids in greedy_decode_batch(params, make_batch(chunk)):
            out.append(tgt_vocab.decode(strip_eos(ids)))
    return out


def dev_bleu(params: ModelParams, dev: DevSet, tgt_vocab: Vocabulary) -> float:
    return corpus_bleu(translate_greedy(params, dev.src_ids, tgt_vocab), dev.refs)


@dataclass
class RunResult:
    best_params: ModelParams
    best_epoch: int
    best_bleu: float
    dev_history: list[tuple[int, float]] = field(default_factory=list)
    log: list[LogRecord] = field(default_factory=list)


def run_training(
    state: TrainState,
    train_ids,
    config: TrainConfig,
    dev: DevSet | None = None,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
    out_dir=None,
    checkpoint_every: int = 0,
    patience: int = 0,
    log_wall_time: bool = False,
) -> RunResult:
    """Train, scoring greedy dev BLEU after every epoch.

    The best epoch (earliest on ties) is kept. With ``out_dir`` the run
    writes ``train.log.jsonl``, ``dev.jsonl``, ``best.bnmt``, ``last.bnmt``
    and every ``checkpoint_every`` epochs ``epoch-NNN.bnmt``. ``patience``
    > 0 stops after that many epochs without improvement.
    """
    if dev is not None and tgt_vocab is None:
        raise ValueError("dev scoring needs the target vocabulary")
    out = Path(out_dir) if out_dir is not None else None
    log_fh = dev_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log.jsonl", "w", encoding="utf-8", newline="\n")
        dev_fh = open(out / "dev.jsonl", "w", encoding="utf-8", newline="\n")

    result = RunResult(state.params.copy(), state.epoch, -1.0)
    stale = 0

    class _Stop(Exception):
        pass

    def on_epoch(st: TrainState, records):
        nonlocal stale
        bleu = dev_bleu(st.params, dev, tgt_vocab) if dev is not None else 0.0
        result.dev_history.append((st.epoch, bleu))
        improved = bleu > result.best_bleu
        if improved:
            result.best_params, result.best_epoch, result.best_bleu = st.params.copy(), st.epoch, bleu
            stale = 0
        else:
            stale += 1
        if out is not None:
            dev_fh.write(json.dumps({"epoch": st.epoch, "dev_bleu": bleu}) + "\n")
            dev_fh.flush()
            extra = {"dev_bleu": bleu}
            if improved:
                save_checkpoint(out / "best.bnmt", checkpoint_from_state(st, src_vocab, tgt_vocab, extra))
            if checkpoint_every and st.epoch % checkpoint_every == 0:
                save_checkpoint(out / f"epoch-{st.epoch:03d}.bnmt",
                                checkpoint_from_state(st, src_vocab, tgt_vocab, extra))
        if patience and stale >= patience:
            raise _Stop

    def on_record(rec: LogRecord):
        result.log.append(rec)
        if log_fh is not None:
            log_fh.write(rec.to_json() + "\n")

    try:
        train_loop(state, train_ids, config, [on_epoch], on_record, log_wall_time)
    except _Stop:
        pass
    finally:
        if log_fh is not None:
            log_fh.close()
            dev_fh.close()
    if out is not None:
        save_checkpoint(out / "last.bnmt", checkpoint_from_state(state, src_vocab, tgt_vocab))
        if result.best_bleu < 0:
            save_checkpoint(out / "best.bnmt", checkpoint_from_state(state, src_vocab, tgt_vocab))
    return result


def best_checkpoint(result: RunResult, src_vocab, tgt_vocab) -> Checkpoint:
    return Checkpoint(result.best_params, src_vocab, tgt_vocab, epoch=result.best_epoch,
                      extra={"dev_bleu": result.best_bleu})
