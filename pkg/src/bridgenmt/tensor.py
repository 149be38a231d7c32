"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the translation model needs are provided. Elementwise
operations accept equal shapes or a scalar on either side; anything wider
(bias rows, time broadcasting) has a dedicated op with an explicit contract.

Reductions over the time axis are accumulated sequentially, one position at
a time. Adding masked (all-zero) positions at the end therefore leaves every
result at the real positions bit-for-bit unchanged.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0])
    >>> loss = squared_l2(x)
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateMaskError,
    DimensionError,
    NumericError,
    TokenLookupError,
)

DTYPE = np.float64

# Ops whose adjoint is deliberately negated (fault injection for the checker).
_FAULTY_OPS: set[str] = set()


@contextlib.contextmanager
def inject_adjoint_fault(op_name: str) -> Iterator[None]:
    """Flip the sign of one op's adjoint while the context is active."""
    _FAULTY_OPS.add(op_name)
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op_name)


class TensorNode:
    """A value recorded on a :class:`Tape`.

    ``grad`` stays ``None`` until backward reaches the node; gradients
    accumulate additively across backward calls.
    """

    __slots__ = ("value", "grad", "id", "tape", "requires_grad", "name")

    def __init__(self, tape: Tape, value: np.ndarray, requires_grad: bool, name: str | None = None):
        self.tape = tape
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"TensorNode(id={self.id}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered node list plus the operation records needed for backward.

    With ``recording=False`` ops still compute values but nothing is stored
    for differentiation, which is what inference uses.
    """

    recording: bool = True
    nodes: list[TensorNode] = field(default_factory=list)
    records: list[OpRecord] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> TensorNode:
        """A differentiable input (parameter or checked point)."""
        return TensorNode(self, np.array(value, dtype=DTYPE), self.recording, name)

    def constant(self, value, name: str | None = None) -> TensorNode:
        return TensorNode(self, np.asarray(value, dtype=DTYPE), False, name)

    def backward(self, loss: TensorNode) -> None:
        """Propagate d(loss)/d(node) to every node the loss depends on."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        nodes = self.nodes
        # intermediate adjoints restart each pass; only leaves accumulate
        for rec in self.records:
            nodes[rec.output].grad = None
        seed = np.ones_like(loss.value)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for rec in reversed(self.records):
            g = nodes[rec.output].grad
            if g is None:
                continue
            if rec.op in _FAULTY_OPS:
                g = -g
            for idx, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                node = nodes[idx]
                if not node.requires_grad:
                    continue
                node.grad = gi if node.grad is None else node.grad + gi


def _tape_of(*items) -> Tape:
    tape = None
    for item in items:
        if isinstance(item, TensorNode):
            if tape is None:
                tape = item.tape
            elif item.tape is not tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a TensorNode")
    return tape


def _emit(op: str, value: np.ndarray, inputs: Sequence[TensorNode], backward) -> TensorNode:
    tape = inputs[0].tape
    needs = tape.recording and any(n.requires_grad for n in inputs)
    out = TensorNode(tape, value, needs)
    if needs:
        tape.records.append(OpRecord(op, tuple(n.id for n in inputs), out.id, backward))
    return out


def ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` strictly left to right."""
    x = np.moveaxis(x, axis, 0)
    acc = x[0].copy()
    for i in range(1, x.shape[0]):
        acc += x[i]
    return acc


# ---------------------------------------------------------------- elementwise


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating)) or (
        isinstance(x, TensorNode) and x.value.ndim == 0
    )


def _binary(op: str, a, b, fwd, grad_a, grad_b) -> TensorNode:
    tape = _tape_of(a, b)
    if not isinstance(a, TensorNode):
        a = tape.constant(a)
    if not isinstance(b, TensorNode):
        b = tape.constant(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    out = fwd(av, bv)

    def backward(g):
        ga = grad_a(g, av, bv)
        gb = grad_b(g, av, bv)
        if av.ndim == 0 and ga.ndim:
            ga = np.asarray(ga.sum())
        if bv.ndim == 0 and gb.ndim:
            gb = np.asarray(gb.sum())
        return ga, gb

    return _emit(op, out, (a, b), backward)


def add(a, b) -> TensorNode:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> TensorNode:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> TensorNode:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def tanh(a: TensorNode) -> TensorNode:
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: TensorNode) -> TensorNode:
    y = _sigmoid(a.value)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def elementwise(op_kind: str, *inputs) -> TensorNode:
    """Dispatch by name: ``tanh``, ``sigmoid``, ``add``, ``mul`` or ``sub``."""
    table = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul, "sub": sub}
    try:
        fn = table[op_kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*inputs)


def where(cond, a: TensorNode, b) -> TensorNode:
    """Select ``a`` where ``cond`` holds, else ``b`` (a node or ``0.0``).

    ``cond`` is a boolean array matching the leading axes of ``a``; it is
    broadcast over the trailing ones.
    """
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape[: cond.ndim]:
        raise DimensionError(f"where: condition {cond.shape} does not lead {a.shape}")
    c = cond.reshape(cond.shape + (1,) * (a.value.ndim - cond.ndim))
    if isinstance(b, TensorNode):
        if b.shape != a.shape:
            raise DimensionError(f"where: incompatible shapes {a.shape} and {b.shape}")
        out = np.where(c, a.value, b.value)
        return _emit(
            "where", out, (a, b), lambda g: (np.where(c, g, 0.0), np.where(c, 0.0, g))
        )
    out = np.where(c, a.value, float(b))
    return _emit("where", out, (a,), lambda g: (np.where(c, g, 0.0),))


# ------------------------------------------------------------------- algebra


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    """``a @ b`` for 2-D ``b``; ``a`` may carry extra leading (stack) axes."""
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    out = np.matmul(av, bv)

    def backward(g):
        ga = np.matmul(g, bv.T)
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x: TensorNode, w: TensorNode, b: TensorNode | None = None) -> TensorNode:
    """``x @ w + b`` with the bias row added to every row of the product."""
    if w.value.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match {w.shape}")
    xv, wv = x.value, w.value
    out = np.matmul(xv, wv)
    if b is None:
        inputs = (x, w)
    else:
        out = out + b.value
        inputs = (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, wv.T)
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", out, inputs, backward)


def transpose(a: TensorNode) -> TensorNode:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[TensorNode], axis: int = -1) -> TensorNode:
    if not parts:
        raise DimensionError("concat of nothing")
    ndim = parts[0].value.ndim
    ax = axis % ndim
    for p in parts:
        if p.value.ndim != ndim or p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise DimensionError(
                f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}"
            )
    sizes = [p.shape[ax] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=ax)

    return _emit("concat", out, tuple(parts), backward)


def stack(parts: Sequence[TensorNode], axis: int = 0) -> TensorNode:
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shapes {[q.shape for q in parts]} differ")
    out = np.stack([p.value for p in parts], axis=axis)
    n = len(parts)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(n)]

    return _emit("stack", out, tuple(parts), backward)


def take_cols(a: TensorNode, start: int, stop: int) -> TensorNode:
    """Slice ``[start:stop]`` along the last axis."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"take_cols: [{start}:{stop}] outside width {width}")
    out = a.value[..., start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _emit("take_cols", out, (a,), backward)


def gather_rows(table: TensorNode, ids) -> TensorNode:
    """Rows of ``table`` in the order given by ``ids`` (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise TokenLookupError(f"id {int(bad)} outside table of {n} rows")
    out = table.value[ids]

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("gather_rows", out, (table,), backward)


def squared_l2(a: TensorNode, axis: int | None = None) -> TensorNode:
    """Sum of squares over everything, or per slice along ``axis``."""
    av = a.value
    if axis is None:
        out = np.asarray(np.dot(av.ravel(), av.ravel()))
        return _emit("squared_l2", out, (a,), lambda g: (2.0 * g * av,))
    out = np.sum(av * av, axis=axis)
    return _emit(
        "squared_l2", out, (a,), lambda g: (2.0 * np.expand_dims(g, axis) * av,)
    )


def sum_all(a: TensorNode) -> TensorNode:
    av = a.value
    out = np.asarray(ordered_sum(av.reshape(-1), 0))
    return _emit("sum_all", out, (a,), lambda g: (np.full_like(av, g),))


def dropout(a: TensorNode, rate: float, rng: np.random.Generator | None, train_mode: bool) -> TensorNode:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.value * keep, (a,), lambda g: (g * keep,))


def gru_cell(x: TensorNode, h: TensorNode, w: TensorNode, b: TensorNode,
             u: TensorNode, ux: TensorNode) -> TensorNode:
    """Fused GRU update.

    With ``p = x @ w + b`` split as ``[p_r, p_z, p_c]``::

        r, z = sigmoid([p_r, p_z] + h @ u)
        c = tanh(p_c + (r * h) @ ux)
        h' = h + z * (c - h)

    x: (B, I), h: (B, H), w: (I, 3H), b: (3H,), u: (H, 2H), ux: (H, H)
    """
    hid = h.shape[-1]
    if (w.shape != (x.shape[-1], 3 * hid) or b.shape != (3 * hid,)
            or u.shape != (hid, 2 * hid) or ux.shape != (hid, hid) or x.shape[0] != h.shape[0]):
        raise DimensionError(
            f"gru_cell: x {x.shape}, h {h.shape}, w {w.shape}, b {b.shape}, "
            f"u {u.shape}, ux {ux.shape}"
        )
    xv, hv = x.value, h.value
    xp = np.matmul(xv, w.value) + b.value
    gates = _sigmoid(xp[:, : 2 * hid] + np.matmul(hv, u.value))
    r, z = gates[:, :hid], gates[:, hid:]
    rh = r * hv
    cand = np.tanh(xp[:, 2 * hid :] + np.matmul(rh, ux.value))
    out = hv + z * (cand - hv)

    def backward(g):
        d_c = g * z * (1.0 - cand * cand)
        d_rh = np.matmul(d_c, ux.value.T)
        d_gates = np.concatenate([d_rh * hv, g * (cand - hv)], axis=1) * gates * (1.0 - gates)
        d_xp = np.concatenate([d_gates, d_c], axis=1)
        d_h = g * (1.0 - z) + d_rh * r + np.matmul(d_gates, u.value.T)
        return (
            np.matmul(d_xp, w.value.T),
            d_h,
            xv.T @ d_xp,
            d_xp.sum(axis=0),
            hv.T @ d_gates,
            rh.T @ d_c,
        )

    return _emit("gru_cell", out, (x, h, w, b, u, ux), backward)


# ---------------------------------------------------------- attention pieces


def masked_softmax(logits: TensorNode, mask, axis: int = -1) -> TensorNode:
    """Softmax along ``axis`` restricted to positions where ``mask`` is set.

    Masked entries come out exactly zero. Every slice needs at least one
    unmasked entry.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.shape != logits.shape:
        raise DimensionError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}")
    if not mask.any(axis=axis).all():
        raise DegenerateMaskError("masked_softmax: a slice has every position masked")
    x = logits.value
    top = np.max(np.where(mask, x, -np.inf), axis=axis, keepdims=True)
    ex = np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0)
    total = np.expand_dims(ordered_sum(ex, axis), axis)
    p = ex / total

    def backward(g):
        dot = np.expand_dims(ordered_sum(g * p, axis), axis)
        return (p * (g - dot),)

    return _emit("masked_softmax", p, (logits,), backward)


def additive_scores(keys: TensorNode, query: TensorNode, v: TensorNode) -> TensorNode:
    """Energies ``tanh(keys[t] + query) @ v`` for every time step ``t``.

    keys: (T, B, A), query: (B, A), v: (A,) -> (T, B)
    """
    if keys.value.ndim != 3 or query.shape != keys.shape[1:] or v.shape != (keys.shape[2],):
        raise DimensionError(
            f"additive_scores: keys {keys.shape}, query {query.shape}, v {v.shape}"
        )
    hid = np.tanh(keys.value + query.value[None])
    vcol = v.value[:, None]
    out = np.matmul(hid, vcol)[..., 0]

    def backward(g):
        gpre = (g[..., None] * v.value) * (1.0 - hid * hid)
        gv = hid.reshape(-1, hid.shape[-1]).T @ g.reshape(-1)
        return gpre, ordered_sum(gpre, 0), gv

    return _emit("additive_scores", out, (keys, query, v), backward)


def weighted_time_sum(weights: TensorNode, values: TensorNode) -> TensorNode:
    """``sum_t weights[t, b] * values[t, b, :]`` accumulated in time order.

    weights: (T, B), values: (T, B, D) -> (B, D)
    """
    if values.value.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(
            f"weighted_time_sum: weights {weights.shape} vs values {values.shape}"
        )
    w, x = weights.value, values.value
    out = ordered_sum(w[..., None] * x, 0)

    def backward(g):
        return (x * g[None]).sum(axis=-1), w[..., None] * g[None]

    return _emit("weighted_time_sum", out, (weights, values), backward)


def softmax_nll(logits: TensorNode, targets) -> TensorNode:
    """Per-row negative log-likelihood of ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.value
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise DimensionError(f"softmax_nll: logits {x.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise TokenLookupError(f"target id outside vocabulary of {x.shape[1]}")
    rows = np.arange(x.shape[0])
    top = x.max(axis=1, keepdims=True)
    ex = np.exp(x - top)
    z = ex.sum(axis=1, keepdims=True)
    logz = np.log(z) + top
    out = logz[:, 0] - x[rows, targets]

    def backward(g):
        grad = ex / z
        grad[rows, targets] -= 1.0
        return (grad * g[:, None],)

    return _emit("softmax_nll", out, (logits,), backward)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax on plain arrays (inference only)."""
    top = x.max(axis=-1, keepdims=True)
    shifted = x - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# --------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    """Per-group maximum relative error of tape gradients vs central differences."""

    tolerance: float
    max_rel_error: dict[str, float]
    worst_index: dict[str, tuple[int, ...]]
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., TensorNode],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    *,
    floor: float = 1e-8,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``point`` is an array (``f`` receives one leaf node) or a dict of arrays
    (``f`` receives a dict of leaf nodes of the same keys). ``f`` must be
    deterministic; reseed any rng inside it. With ``max_coords`` set, only
    that many randomly chosen coordinates per group are differenced.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ConfigError("grad_check step must be positive")
    single = not isinstance(point, dict)
    base = {"x": np.array(point, dtype=DTYPE)} if single else {
        k: np.array(v, dtype=DTYPE) for k, v in point.items()
    }

    def evaluate(values: dict[str, np.ndarray], record: bool):
        tape = Tape(recording=record)
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        out = f(leaves["x"]) if single else f(leaves)
        return tape, leaves, out

    tape, leaves, out = evaluate(base, True)
    if out.value.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got {out.shape}")
    if not np.isfinite(out.value).all():
        raise NumericError("grad_check: function value is not finite at the base point")
    tape.backward(out)
    rng = np.random.default_rng(seed)
    errors, worst, analytic, numeric = {}, {}, {}, {}
    for key, arr in base.items():
        g = leaves[key].grad
        g = np.zeros_like(arr) if g is None else g
        flat_count = arr.size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        a_vals = np.empty(len(coords))
        n_vals = np.empty(len(coords))
        for i, c in enumerate(coords):
            idx = np.unravel_index(c, arr.shape)
            shifted = dict(base)
            plus = arr.copy()
            plus[idx] += step
            shifted[key] = plus
            fp = float(evaluate(shifted, False)[2].value)
            minus = arr.copy()
            minus[idx] -= step
            shifted[key] = minus
            fm = float(evaluate(shifted, False)[2].value)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value at {key}{list(map(int, idx))}")
            n_vals[i] = (fp - fm) / (2.0 * step)
            a_vals[i] = g[idx]
            if not np.isfinite(a_vals[i]):
                raise NumericError(f"grad_check: non-finite gradient at {key}{list(map(int, idx))}")
        rel = relative_error(a_vals, n_vals, floor)
        name = "x" if single else key
        if len(coords):
            j = int(np.argmax(rel))
            errors[name] = float(rel[j])
            worst[name] = tuple(int(i) for i in np.unravel_index(coords[j], arr.shape))
        else:
            errors[name] = 0.0
            worst[name] = ()
        analytic[name] = a_vals
        numeric[name] = n_vals
    return GradCheckReport(tolerance, errors, worst, analytic, numeric)
