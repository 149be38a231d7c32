"""Training: losses, Adadelta, the minibatch loop, warm starts and checkpoints."""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Vocabulary, make_batches
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    IncompatibilityError,
    InputError,
    NumericError,
)
from .model import (
    BOS,
    Bound,
    ModelConfig,
    ModelParams,
    Variant,
    _init_tensor,
    bind,
    decoder_init,
    decoder_step,
    encode,
    param_shapes,
)
from .tensor import Tape, TensorNode


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 80
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    dropout_rate: float = 0.5
    max_epochs: int = 10
    grad_clip_norm: float = 1.0
    seed: int = 1
    variant: Variant = Variant.BASELINE
    bucketing: bool = True
    weighted_bridge: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not 0.0 < self.adadelta_rho < 1.0:
            raise ConfigError("adadelta_rho must lie in (0, 1)")
        if self.adadelta_eps <= 0:
            raise ConfigError("adadelta_eps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive (use inf to disable)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")


# -------------------------------------------------------------------- losses


@dataclass
class LossOutput:
    """Batch loss (mean over sentences) plus its pieces.

    ``per_sentence`` holds each row's summed loss; ``alphas`` is one
    ``(T_x, B)`` attention array per target step.
    """

    loss: TensorNode
    nll: float
    bridge_penalty: float
    per_sentence: np.ndarray
    alphas: list[np.ndarray]


def sentence_loss(
    P: Bound,
    batch: Batch,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    weighted_bridge: bool = False,
) -> LossOutput:
    """Teacher-forced loss: summed NLL over target steps, plus for direct
    bridging the summed ``||W x_{t*} - y_t||^2`` with equal weight.
    """
    enc = encode(P, batch.src, batch.src_mask)
    s = decoder_init(P, enc)
    n_rows, n_steps = batch.tgt.shape
    direct = P.variant.has_bridge_matrix
    bridge_t = T.transpose(P["bridge.W"]) if direct else None

    nll_acc = pen_acc = None
    alphas = []
    y_prev = np.full(n_rows, BOS, dtype=np.int64)
    for t in range(n_steps):
        mask_t = batch.tgt_mask[:, t]
        out = decoder_step(P, s, y_prev, enc, train_mode, rng)
        nll_t = T.softmax_nll(out.logits, batch.tgt[:, t])
        if not np.isfinite(nll_t.value[mask_t]).all():
            raise NumericError(f"non-finite loss at target step {t}")
        nll_t = T.where(mask_t, nll_t, 0.0)
        nll_acc = nll_t if nll_acc is None else nll_acc + nll_t
        if direct:
            if weighted_bridge:
                source = T.weighted_time_sum(out.alpha_t, enc.src_embeds)
            else:
                source = out.x_star
            target = T.gather_rows(P["tgt_embed"], batch.tgt[:, t])
            pen_t = T.where(mask_t, T.squared_l2(T.matmul(source, bridge_t) - target, axis=1), 0.0)
            pen_acc = pen_t if pen_acc is None else pen_acc + pen_t
        alphas.append(out.alpha_t.value)
        s = out.s_t
        y_prev = batch.tgt[:, t]

    per_sentence = nll_acc if pen_acc is None else nll_acc + pen_acc
    loss = T.sum_all(per_sentence) * (1.0 / n_rows)
    nll = float(T.ordered_sum(nll_acc.value, 0)) / n_rows
    penalty = float(T.ordered_sum(pen_acc.value, 0)) / n_rows if direct else 0.0
    return LossOutput(loss, nll, penalty, per_sentence.value.copy(), alphas)


def evaluate_loss(params: ModelParams, batch: Batch, weighted_bridge: bool = False) -> LossOutput:
    """Eval-mode loss without recording a tape."""
    return sentence_loss(bind(params), batch, weighted_bridge=weighted_bridge)


def loss_and_grads(params: ModelParams, batch: Batch, rng=None, train_mode=False,
                   weighted_bridge=False):
    tape = Tape()
    P = bind(params, tape)
    out = sentence_loss(P, batch, train_mode, rng, weighted_bridge)
    tape.backward(out.loss)
    return out, P.grads()


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Adadelta running averages E[g^2] and E[dx^2] per parameter."""

    sq_grad: dict[str, np.ndarray]
    sq_delta: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.arrays.items()},
            {k: np.zeros_like(v) for k, v in params.arrays.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if math.isinf(max_norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adadelta_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                  rho: float = 0.95, eps: float = 1e-6) -> None:
    """In-place Adadelta update of ``params`` and ``state``."""
    for name, x in params.arrays.items():
        g = grads[name]
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        if not np.isfinite(delta).all():
            raise NumericError(f"non-finite Adadelta update for {name}")
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        x += delta


# ---------------------------------------------------------------- train loop


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


@dataclass
class LogRecord:
    epoch: int
    step: int
    loss: float
    nll: float
    bridge_penalty: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


EpochCallback = Callable[[TrainState, list[LogRecord]], None]


def new_train_state(params: ModelParams, config: TrainConfig) -> TrainState:
    return TrainState(params, OptimizerState.zeros_like(params), np.random.default_rng(config.seed))


def train_loop(
    state: TrainState,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    config: TrainConfig,
    callbacks: Sequence[EpochCallback] = (),
    on_record: Callable[[LogRecord], None] | None = None,
    record_wall_time: bool = False,
) -> list[LogRecord]:
    """Run epochs ``state.epoch + 1 .. config.max_epochs`` over id pairs.

    Shuffling depends only on ``(seed, epoch)``; dropout draws from
    ``state.rng``. ``wall_ms`` is reported as 0 unless ``record_wall_time``,
    so that logs are byte-reproducible.
    """
    if not pairs:
        raise InputError("cannot train on an empty corpus")
    if state.params.config.variant is not config.variant:
        raise ConfigError(
            f"train config variant {config.variant.value} does not match "
            f"model variant {state.params.config.variant.value}"
        )
    log: list[LogRecord] = []
    while state.epoch < config.max_epochs:
        state.epoch += 1
        epoch_records = []
        batches = make_batches(pairs, config.batch_size, _epoch_seed(config.seed, state.epoch),
                               config.bucketing)
        for batch in batches:
            t0 = time.perf_counter()
            out, grads = loss_and_grads(state.params, batch, state.rng, True, config.weighted_bridge)
            grads, _ = clip_grads(grads, config.grad_clip_norm)
            adadelta_step(state.params, grads, state.opt, config.adadelta_rho, config.adadelta_eps)
            state.step += 1
            wall = (time.perf_counter() - t0) * 1000.0 if record_wall_time else 0.0
            rec = LogRecord(state.epoch, state.step, float(out.loss.value), out.nll,
                            out.bridge_penalty, round(wall, 3))
            epoch_records.append(rec)
            if on_record is not None:
                on_record(rec)
        log.extend(epoch_records)
        for cb in callbacks:
            cb(state, epoch_records)
    return log


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def epoch_means(log: Sequence[LogRecord]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for rec in log:
        sums.setdefault(rec.epoch, []).append(rec.loss)
    return {e: float(np.mean(v)) for e, v in sums.items()}


# ------------------------------------------------------------ warm starting


def pretrain_then_bridge(donor: ModelParams, config: ModelConfig | None = None,
                         seed: int = 0) -> ModelParams:
    """Direct-bridging parameters warm-started from a trained donor.

    Every tensor whose name and shape exist in the donor is copied
    verbatim; the rest (at least the bridge matrix) is freshly initialized.
    A source-bridge donor shares every shape; a baseline donor transfers
    only the shape-compatible tensors.
    """
    if config is None:
        config = donor.config.with_variant(Variant.DIRECT_BRIDGE)
    if not config.variant.has_bridge_matrix:
        raise IncompatibilityError(f"target variant {config.variant.value} is not direct-bridge")
    diffs = [
        f"{k}: {getattr(donor.config, k)} != {getattr(config, k)}"
        for k in ("src_vocab_size", "tgt_vocab_size", "embed_dim", "hidden_dim",
                  "attention_dim", "readout_dim")
        if getattr(donor.config, k) != getattr(config, k)
    ]
    if diffs:
        raise IncompatibilityError("donor and target configs differ: " + "; ".join(diffs))
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        src = donor.arrays.get(name)
        if src is not None and src.shape == shape:
            arrays[name] = src.copy()
        else:
            arrays[name] = _init_tensor(name, shape, rng, config.init_scale)
    return ModelParams(config, arrays)


def transferred_names(donor: ModelParams, target: ModelParams) -> list[str]:
    return [k for k, v in target.arrays.items()
            if k in donor.arrays and donor.arrays[k].shape == v.shape]


# --------------------------------------------------------------- checkpoints

MAGIC = b"BNMT"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Everything needed to resume training or to translate."""

    params: ModelParams
    src_vocab: Vocabulary | None = None
    tgt_vocab: Vocabulary | None = None
    opt: OptimizerState | None = None
    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _canonical_header(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "src_vocab": ckpt.src_vocab.itos if ckpt.src_vocab else None,
        "tgt_vocab": ckpt.tgt_vocab.itos if ckpt.tgt_vocab else None,
        "has_optimizer": ckpt.opt is not None,
        "extra": ckpt.extra,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(ckpt.params.arrays.items())
    if ckpt.opt is not None:
        items += [(f"opt.sq_grad/{k}", v) for k, v in ckpt.opt.sq_grad.items()]
        items += [(f"opt.sq_delta/{k}", v) for k, v in ckpt.opt.sq_delta.items()]
    return items


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialized layout: magic, u32 version, u64-length JSON header,
    u32 tensor count, manifest entries (name, dtype code, shape), then
    raw little-endian float64 payloads in manifest order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = _canonical_header(ckpt)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    tensors = _tensors(ckpt)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from None
    config = ModelConfig.from_dict(header["config"])
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        manifest.append((name, tuple(int(s) for s in shape)))
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after payload")

    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"{name}: stored shape {tensors[name].shape} disagrees with config {shape}"
            )
    params = ModelParams(config, {k: tensors[k] for k in expected})
    opt = None
    if header.get("has_optimizer"):
        try:
            opt = OptimizerState(
                {k: tensors[f"opt.sq_grad/{k}"] for k in expected},
                {k: tensors[f"opt.sq_delta/{k}"] for k in expected},
            )
        except KeyError as exc:
            raise CheckpointShapeError(f"checkpoint lacks optimizer tensor {exc}") from None
    src_vocab = Vocabulary(header["src_vocab"]) if header.get("src_vocab") else None
    tgt_vocab = Vocabulary(header["tgt_vocab"]) if header.get("tgt_vocab") else None
    return Checkpoint(params, src_vocab, tgt_vocab, opt, header["epoch"], header["step"],
                      header.get("rng_state"), header.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_from_state(state: TrainState, src_vocab=None, tgt_vocab=None, extra=None) -> Checkpoint:
    return Checkpoint(state.params.copy(), src_vocab, tgt_vocab,
                      OptimizerState({k: v.copy() for k, v in state.opt.sq_grad.items()},
                                     {k: v.copy() for k, v in state.opt.sq_delta.items()}),
                      state.epoch, state.step, _rng_state(state.rng), dict(extra or {}))


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    opt = ckpt.opt if ckpt.opt is not None else OptimizerState.zeros_like(ckpt.params)
    return TrainState(ckpt.params.copy(), opt, rng, ckpt.epoch, ckpt.step)


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))
