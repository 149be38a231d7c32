"""Attention encoder-decoder with the three embedding-bridging variants.

Layout conventions: encoder tensors are time-major, ``(T_x, B, ...)``;
decoder tensors are batch-major, ``(B, ...)``. A single sentence is simply
``B = 1``.

The decoder is the two-step conditional GRU: ``GRU1`` reads the previous
target word, attention looks at the source with that intermediate state, and
``GRU2`` reads the context (plus, for target-side bridging, the embedding of
the most-attended source word).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InputError, VariantError
from .tensor import Tape, TensorNode

PAD, UNK, EOS, BOS = 0, 1, 2, 3
N_RESERVED = 4


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    SOURCE_BRIDGE = "source-bridge"
    TARGET_BRIDGE = "target-bridge"
    DIRECT_BRIDGE = "direct-bridge"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"source": "source-bridge", "target": "target-bridge", "direct": "direct-bridge"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown variant {value!r} (choose from {choices})") from None

    @property
    def annotates_embeddings(self) -> bool:
        """Source-side wiring: annotations carry the word embedding."""
        return self in (Variant.SOURCE_BRIDGE, Variant.DIRECT_BRIDGE)

    @property
    def feeds_aligned_embedding(self) -> bool:
        return self is Variant.TARGET_BRIDGE

    @property
    def has_bridge_matrix(self) -> bool:
        return self is Variant.DIRECT_BRIDGE


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int = 30000
    tgt_vocab_size: int = 30000
    embed_dim: int = 620
    hidden_dim: int = 1000
    attention_dim: int | None = None
    readout_dim: int | None = None
    max_len: int = 50
    variant: Variant = Variant.BASELINE
    dropout_rate: float = 0.5
    init_scale: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        if self.attention_dim is None:
            object.__setattr__(self, "attention_dim", self.hidden_dim)
        if self.readout_dim is None:
            object.__setattr__(self, "readout_dim", max(1, self.embed_dim // 2))
        for name in ("embed_dim", "hidden_dim", "attention_dim", "readout_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("src_vocab_size", "tgt_vocab_size"):
            if getattr(self, name) <= N_RESERVED:
                raise ConfigError(f"{name} must exceed the {N_RESERVED} reserved tokens")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def annotation_dim(self) -> int:
        extra = self.embed_dim if self.variant.annotates_embeddings else 0
        return 2 * self.hidden_dim + extra

    @property
    def gru2_input_dim(self) -> int:
        extra = self.embed_dim if self.variant.feeds_aligned_embedding else 0
        return self.annotation_dim + extra

    def with_variant(self, variant) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "variant": Variant.parse(variant)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _gru_shapes(prefix: str, in_dim: int, hid: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W": (in_dim, 3 * hid),
        f"{prefix}.b": (3 * hid,),
        f"{prefix}.U": (hid, 2 * hid),
        f"{prefix}.Ux": (hid, hid),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor of ``config``'s variant, in canonical order."""
    e, h, a, r = config.embed_dim, config.hidden_dim, config.attention_dim, config.readout_dim
    d = config.annotation_dim
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (config.src_vocab_size, e),
        "tgt_embed": (config.tgt_vocab_size, e),
    }
    shapes.update(_gru_shapes("enc_fwd", e, h))
    shapes.update(_gru_shapes("enc_bwd", e, h))
    shapes.update({"init.W": (d, h), "init.b": (h,)})
    shapes.update(_gru_shapes("dec1", e, h))
    shapes.update({"att.W": (h, a), "att.b": (a,), "att.U": (d, a), "att.v": (a,)})
    shapes.update(_gru_shapes("dec2", config.gru2_input_dim, h))
    shapes.update({
        "readout.U": (h, r),
        "readout.V": (e, r),
        "readout.C": (d, r),
        "readout.b": (r,),
        "out.W": (r, config.tgt_vocab_size),
        "out.b": (config.tgt_vocab_size,),
    })
    if config.variant.has_bridge_matrix:
        shapes["bridge.W"] = (e, e)
    return shapes


def _is_bias(name: str) -> bool:
    return name.endswith(".b")


def count_params(config: ModelConfig, variant=None) -> int:
    if variant is not None:
        config = config.with_variant(variant)
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


@dataclass
class ModelParams:
    """Named parameter arrays for one variant. Treated as an immutable snapshot."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.arrays) != list(expected):
            missing = set(expected) ^ set(self.arrays)
            if missing:
                raise ConfigError(f"parameter set mismatch: {sorted(missing)}")
            self.arrays = {k: self.arrays[k] for k in expected}
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.arrays[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def init_params(config: ModelConfig, rng_seed: int) -> ModelParams:
    """Uniform(-init_scale, init_scale) weights (0.05 by default), zero
    biases, identity plus Uniform(-0.01, 0.01) bridge matrix."""
    rng = np.random.default_rng(rng_seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        arrays[name] = _init_tensor(name, shape, rng, config.init_scale)
    return ModelParams(config, arrays)


def _init_tensor(name: str, shape, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    if name == "bridge.W":
        return np.eye(shape[0]) + rng.uniform(-0.01, 0.01, size=shape)
    if _is_bias(name):
        return np.zeros(shape)
    return rng.uniform(-scale, scale, size=shape)


class Bound:
    """Parameters placed on a tape as leaf nodes."""

    def __init__(self, params: ModelParams, tape: Tape):
        self.params = params
        self.config = params.config
        self.variant = params.config.variant
        self.tape = tape
        self.nodes = {k: tape.leaf(v, name=k) if tape.recording else tape.constant(v, name=k)
                      for k, v in params.arrays.items()}

    def __getitem__(self, name: str) -> TensorNode:
        return self.nodes[name]

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for k, n in self.nodes.items()
        }


def bind(params: ModelParams, tape: Tape | None = None) -> Bound:
    return Bound(params, tape if tape is not None else Tape(recording=False))


def bind_nodes(params: ModelParams, leaves: dict[str, TensorNode]) -> Bound:
    """Use the given nodes for some parameters and constants for the rest.

    This is how a gradient checker substitutes its own leaves.
    """
    tape = next(iter(leaves.values())).tape
    P = Bound.__new__(Bound)
    P.params, P.config, P.variant, P.tape = params, params.config, params.config.variant, tape
    P.nodes = {k: leaves[k] if k in leaves else tape.constant(v, name=k)
               for k, v in params.arrays.items()}
    return P


def gru(P: Bound, prefix: str, x: TensorNode, h: TensorNode) -> TensorNode:
    """One GRU update ``h' = h + z * (candidate - h)`` (fused op)."""
    return T.gru_cell(x, h, P[f"{prefix}.W"], P[f"{prefix}.b"], P[f"{prefix}.U"], P[f"{prefix}.Ux"])


def gru_from_primitives(P: Bound, prefix: str, x: TensorNode, h: TensorNode) -> TensorNode:
    """The same update as :func:`gru`, spelled out in elementary ops."""
    hid = h.shape[-1]
    xp = T.linear(x, P[f"{prefix}.W"], P[f"{prefix}.b"])
    gates = T.sigmoid(T.take_cols(xp, 0, 2 * hid) + T.matmul(h, P[f"{prefix}.U"]))
    reset = T.take_cols(gates, 0, hid)
    update = T.take_cols(gates, hid, 2 * hid)
    cand = T.tanh(T.take_cols(xp, 2 * hid, 3 * hid) + T.matmul(reset * h, P[f"{prefix}.Ux"]))
    return h + update * (cand - h)


# ------------------------------------------------------------------- encoder


@dataclass
class EncoderOutput:
    """Time-major encoder results for a batch.

    annotations: (T_x, B, d_ann), zero at masked positions
    src_embeds:  (T_x, B, e)
    src_mask:    (T_x, B) bool
    src_ids:     (T_x, B) int
    keys:        (T_x, B, attention_dim), attention projection of annotations
    """

    annotations: TensorNode
    src_embeds: TensorNode
    src_mask: np.ndarray
    src_ids: np.ndarray
    keys: TensorNode

    @property
    def length(self) -> int:
        return self.src_mask.shape[0]

    @property
    def batch_size(self) -> int:
        return self.src_mask.shape[1]

    def select(self, rows) -> "EncoderOutput":
        """Batch rows ``rows`` as constants on a fresh non-recording tape (inference)."""
        rows = np.asarray(rows, dtype=np.int64)
        tape = Tape(recording=False)
        return EncoderOutput(
            tape.constant(self.annotations.value[:, rows]),
            tape.constant(self.src_embeds.value[:, rows]),
            self.src_mask[:, rows],
            self.src_ids[:, rows],
            tape.constant(self.keys.value[:, rows]),
        )


def _check_src(src_ids: np.ndarray, src_mask: np.ndarray, vocab: int):
    if src_ids.shape != src_mask.shape or src_ids.ndim != 2:
        raise InputError(f"src ids {src_ids.shape} and mask {src_mask.shape} must be equal 2-D")
    lengths = src_mask.sum(axis=1)
    if (lengths == 0).any():
        raise InputError("empty source sentence (mask all zero)")
    # trailing padding only: the mask must be a prefix of ones
    prefix = np.arange(src_mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(prefix, src_mask):
        raise InputError("source mask must mark trailing padding only")
    real = src_ids[src_mask]
    if real.size and (real.min() < 0 or real.max() >= vocab):
        raise DataError(f"source id outside vocabulary of {vocab}")


def encode(P: Bound, src_ids, src_mask) -> EncoderOutput:
    """Bidirectional GRU encoder over a batch-major ``(B, T_x)`` id matrix."""
    src_ids = np.asarray(src_ids, dtype=np.int64)
    src_mask = np.asarray(src_mask).astype(bool)
    if src_ids.ndim == 1:
        src_ids, src_mask = src_ids[None], src_mask[None]
    _check_src(src_ids, src_mask, P.config.src_vocab_size)
    ids_t = src_ids.T.copy()
    mask_t = src_mask.T.copy()
    n_steps, batch = ids_t.shape
    hid = P.config.hidden_dim
    tape = P.tape

    embeds = [T.gather_rows(P["src_embed"], ids_t[t]) for t in range(n_steps)]
    zero = tape.constant(np.zeros((batch, hid)))

    fwd: list[TensorNode] = []
    h = zero
    for t in range(n_steps):
        h = T.where(mask_t[t], gru(P, "enc_fwd", embeds[t], h), h)
        fwd.append(h)
    bwd: list[TensorNode] = [None] * n_steps  # type: ignore[list-item]
    h = zero
    for t in reversed(range(n_steps)):
        h = T.where(mask_t[t], gru(P, "enc_bwd", embeds[t], h), h)
        bwd[t] = h

    src_embeds = T.stack(embeds, axis=0)
    parts = [T.stack(fwd, axis=0), T.stack(bwd, axis=0)]
    if P.variant.annotates_embeddings:
        parts.append(src_embeds)
    annotations = T.where(mask_t, T.concat(parts, axis=2), 0.0)
    keys = T.matmul(annotations, P["att.U"])
    return EncoderOutput(annotations, src_embeds, mask_t, ids_t, keys)


def decoder_init(P: Bound, enc: EncoderOutput) -> TensorNode:
    """``s_0 = tanh(W_init . masked mean of annotations + b)``."""
    counts = enc.src_mask.sum(axis=0)
    weights = enc.annotations.tape.constant(enc.src_mask / counts[None, :])
    mean = T.weighted_time_sum(weights, enc.annotations)
    return T.tanh(T.linear(mean, P["init.W"], P["init.b"]))


def attend(P: Bound, s_tilde: TensorNode, enc: EncoderOutput):
    """Additive attention; returns ``(alpha (T_x, B), context (B, d_ann))``."""
    query = T.linear(s_tilde, P["att.W"], P["att.b"])
    energies = T.additive_scores(enc.keys, query, P["att.v"])
    alpha = T.masked_softmax(energies, enc.src_mask, axis=0)
    context = T.weighted_time_sum(alpha, enc.annotations)
    return alpha, context


def argmax_source(alpha: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Most-attended unmasked source position per batch row, lowest index on ties."""
    return np.argmax(np.where(mask, alpha, -np.inf), axis=0)


@dataclass
class DecoderStepOutput:
    s_t: TensorNode
    alpha_t: TensorNode
    c_t: TensorNode
    logits: TensorNode
    t_star: np.ndarray
    y_embed: TensorNode
    x_star: TensorNode | None = None


def decoder_step(
    P: Bound,
    s_prev: TensorNode,
    y_prev_ids,
    enc: EncoderOutput,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> DecoderStepOutput:
    y_prev_ids = np.asarray(y_prev_ids, dtype=np.int64).reshape(-1)
    y_embed = T.gather_rows(P["tgt_embed"], y_prev_ids)
    s_tilde = gru(P, "dec1", y_embed, s_prev)
    alpha, context = attend(P, s_tilde, enc)
    t_star = argmax_source(alpha.value, enc.src_mask)

    x_star = None
    if P.variant.feeds_aligned_embedding or P.variant.has_bridge_matrix:
        aligned_ids = enc.src_ids[t_star, np.arange(enc.batch_size)]
        x_star = T.gather_rows(P["src_embed"], aligned_ids)
    gru2_in = T.concat([context, x_star], axis=1) if P.variant.feeds_aligned_embedding else context
    s_t = gru(P, "dec2", gru2_in, s_tilde)

    readout = T.tanh(
        T.matmul(s_t, P["readout.U"])
        + T.matmul(y_embed, P["readout.V"])
        + T.linear(context, P["readout.C"], P["readout.b"])
    )
    readout = T.dropout(readout, P.config.dropout_rate, rng, train_mode)
    logits = T.linear(readout, P["out.W"], P["out.b"])
    return DecoderStepOutput(s_t, alpha, context, logits, t_star, y_embed, x_star)


def bridge_transform(params: ModelParams, src_word_id: int) -> np.ndarray:
    """``W . src_embed[id]``, the source embedding mapped into target space."""
    if not params.config.variant.has_bridge_matrix:
        raise VariantError(f"{params.config.variant.value} has no bridge matrix")
    table = params["src_embed"]
    if not 0 <= src_word_id < table.shape[0]:
        raise DataError(f"source id {src_word_id} outside vocabulary of {table.shape[0]}")
    return params["bridge.W"] @ table[src_word_id]
