"""Tape-based reverse-mode differentiation over dense float64 numpy arrays.

A graph is any callable ``graph(inputs, params) -> Tensor`` composed of the op
functions in this module. :func:`forward` runs it once and returns the tape;
:func:`backward` may then be called once per loss on the same tape, which is
how per-task gradients are obtained from a single forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

DTYPE = np.float64

SHARED = None  # ParameterGroup.task value for shared-scope groups


@dataclass(frozen=True, eq=False)
class ParameterGroup:
    """One named parameter tensor. ``task`` is None for shared parameters."""

    name: str
    value: np.ndarray
    task: int | None = SHARED

    @property
    def shared(self) -> bool:
        return self.task is None

    @property
    def scope(self) -> str:
        return "shared" if self.task is None else f"task-{self.task}"


class GradientSet(dict):
    """Mapping ``group name -> gradient array`` for one task (or a sum of tasks)."""

    def __init__(self, grads: Mapping[str, np.ndarray] | Iterable = (), task=None):
        super().__init__(grads)
        self.task = task

    def norm(self, name: str) -> float:
        return float(np.linalg.norm(self[name].ravel()))

    def copy(self) -> "GradientSet":
        return GradientSet({k: v.copy() for k, v in self.items()}, task=self.task)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int | None, ...]
    saved: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: "Tape | None" = None, index: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.index is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.tape), -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


class Tape:
    """Records differentiable ops in execution order (so the list is topologically sorted)."""

    def __init__(self, seed: int | None = None, train: bool = True, record: bool = True):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, tuple[int, ParameterGroup]] = {}
        self.rng = np.random.default_rng(seed)
        self.train = train
        self.record = record

    def watch(self, group: ParameterGroup) -> Tensor:
        if group.name in self.params:
            idx, _ = self.params[group.name]
            return Tensor(group.value, self, idx)
        if not self.record:
            return Tensor(group.value, self, None)
        idx = len(self.nodes)
        self.nodes.append(TapeNode("param", (), {"name": group.name}, group.value.shape))
        self.params[group.name] = (idx, group)
        return Tensor(group.value, self, idx)

    def constant(self, value) -> Tensor:
        return Tensor(value, self, None)

    def _record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, **saved) -> Tensor:
        idx_in = tuple(t.index for t in inputs)
        if not self.record or all(i is None for i in idx_in):
            return Tensor(value, self, None)
        idx = len(self.nodes)
        self.nodes.append(TapeNode(kind, idx_in, saved, value.shape))
        return Tensor(value, self, idx)


def _as_tensor(x, tape: Tape | None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, tape, None)


def _tape_of(*tensors: Tensor) -> Tape:
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return Tape(record=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ConfigurationError(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigurationError(f"embedding: ids outside [0, {table.shape[0]})")
    tape = _tape_of(table)
    return tape._record("embedding", (table,), table.data[ids], ids=ids, rows=table.shape[0])


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"affine: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    ins: tuple = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ConfigurationError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        ins = (x, weight, bias)
    tape = _tape_of(x, weight)
    return tape._record("affine", ins, out, x=x.data, w=weight.data)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check("add", a, b)
    return tape._record("add", (a, b), a.data + b.data, sa=a.shape, sb=b.shape)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_check("mul", a, b)
    return tape._record("mul", (a, b), a.data * b.data, a=a.data, b=b.data)


def scale(x: Tensor, c: float) -> Tensor:
    return _tape_of(x)._record("scale", (x,), x.data * c, c=float(c))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    return tape._record("concat", tuple(tensors), out, axis=axis, sizes=sizes)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"reshape: {exc}") from None
    return _tape_of(x)._record("reshape", (x,), out, shape=x.shape)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _tape_of(x)._record("relu", (x,), np.where(mask, x.data, 0.0), mask=mask)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _tape_of(x)._record("sigmoid", (x,), out, out=out)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _tape_of(x)._record("exp", (x,), out, out=out)


def dropout(x: Tensor, rate: float) -> Tensor:
    """Inverted dropout; identity when the tape is in eval mode or rate is 0."""
    tape = _tape_of(x)
    if not tape.train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigurationError(f"dropout: rate must be < 1, got {rate}")
    keep = tape.rng.random(x.shape) >= rate
    mult = keep / (1.0 - rate)
    return tape._record("dropout", (x,), x.data * mult, mult=mult)


def sum_all(x: Tensor) -> Tensor:
    return _tape_of(x)._record("sum", (x,), np.asarray(x.data.sum()), shape=x.shape)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.data.size, 1))


def bce_with_logits(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean binary cross-entropy over records with ``mask == 1``.

    A mask with no selected record yields an exact 0 loss and zero gradient.
    """
    z = logits.data
    y = np.asarray(labels, dtype=DTYPE)
    m = np.ones_like(z) if mask is None else np.asarray(mask, dtype=DTYPE)
    if y.shape != z.shape or m.shape != z.shape:
        raise ConfigurationError(f"bce_with_logits: logits {z.shape}, labels {y.shape}, mask {m.shape}")
    count = m.sum()
    if count == 0:
        value = np.asarray(0.0)
    else:
        value = np.asarray(((np.logaddexp(0.0, z) - y * z) * m).sum() / count)
    return _tape_of(logits)._record("bce", (logits,), value, z=z, y=y, m=m, count=count)


# ---------------------------------------------------------------------------
# backward rules: (node, upstream gradient) -> one gradient per input


def _bw_embedding(node, g):
    # scatter-add of repeated rows; bincount over flat (row, col) slots beats np.add.at
    rows, d = node.saved["rows"], g.shape[-1]
    slots = (node.saved["ids"][:, None] * d + np.arange(d)).ravel()
    return (np.bincount(slots, weights=g.ravel(), minlength=rows * d).reshape(rows, d),)


def _bw_affine(node, g):
    x, w = node.saved["x"], node.saved["w"]
    grads = [g @ w.T, x.T @ g]
    if len(node.inputs) == 3:
        grads.append(g.sum(axis=0))
    return tuple(grads)


def _bw_add(node, g):
    return _unbroadcast(g, node.saved["sa"]), _unbroadcast(g, node.saved["sb"])


def _bw_mul(node, g):
    a, b = node.saved["a"], node.saved["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_scale(node, g):
    return (g * node.saved["c"],)


def _bw_concat(node, g):
    bounds = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=node.saved["axis"]))


def _bw_reshape(node, g):
    return (g.reshape(node.saved["shape"]),)


def _bw_relu(node, g):
    # subgradient 0 at exactly 0
    return (g * node.saved["mask"],)


def _bw_sigmoid(node, g):
    s = node.saved["out"]
    return (g * s * (1.0 - s),)


def _bw_exp(node, g):
    return (g * node.saved["out"],)


def _bw_dropout(node, g):
    return (g * node.saved["mult"],)


def _bw_sum(node, g):
    return (np.broadcast_to(g, node.saved["shape"]).copy(),)


def _bw_bce(node, g):
    s = node.saved
    if s["count"] == 0:
        return (np.zeros_like(s["z"]),)
    return (g * (_sigmoid(s["z"]) - s["y"]) * s["m"] / s["count"],)


BACKWARD_RULES: dict[str, Callable] = {
    "embedding": _bw_embedding,
    "affine": _bw_affine,
    "add": _bw_add,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "concat": _bw_concat,
    "reshape": _bw_reshape,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "exp": _bw_exp,
    "dropout": _bw_dropout,
    "sum": _bw_sum,
    "bce": _bw_bce,
}


# ---------------------------------------------------------------------------


Graph = Callable[[dict[str, Tensor], dict[str, Tensor]], Tensor]


def forward(
    graph: Graph,
    inputs: Mapping[str, object],
    parameters: Iterable[ParameterGroup],
    seed: int | None = None,
    train: bool = True,
) -> tuple[Tensor, Tape]:
    tape = Tape(seed=seed, train=train)
    params = {g.name: tape.watch(g) for g in parameters}
    xs = {k: v if isinstance(v, Tensor) else tape.constant(v) for k, v in inputs.items()}
    return graph(xs, params), tape


def backward(tape: Tape, loss: Tensor, task=None) -> GradientSet:
    """Gradients of ``loss`` w.r.t. every parameter watched on ``tape``.

    The tape is read-only here, so calling this once per task loss after one
    forward pass is safe. Unreached groups get explicit zero arrays.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractViolation("backward: loss was not recorded on this tape")
    grads: dict[str, np.ndarray] = {}
    if loss.index is not None:
        adj: dict[int, np.ndarray] = {loss.index: np.ones(loss.shape, dtype=DTYPE)}
        for i in range(loss.index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = tape.nodes[i]
            if node.kind == "param":
                grads[node.saved["name"]] = g
                continue
            for j, gi in zip(node.inputs, BACKWARD_RULES[node.kind](node, g)):
                if j is None:
                    continue
                adj[j] = adj[j] + gi if j in adj else gi
    out = GradientSet(task=task)
    for name, (_, group) in tape.params.items():
        g = grads.get(name)
        out[name] = np.zeros_like(group.value, dtype=DTYPE) if g is None else np.array(g, dtype=DTYPE)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    checked: int
    skipped: int
    tolerance: float
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and self.checked > 0 and self.max_rel_error < self.tolerance


def _relu_masks(tape: Tape) -> list[np.ndarray]:
    return [n.saved["mask"] for n in tape.nodes if n.kind == "relu"]


def grad_check(
    graph: Graph,
    parameters: Sequence[ParameterGroup],
    tolerance: float = 1e-4,
    inputs: Mapping[str, object] | None = None,
    seed: int | None = 0,
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences entry by entry.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Entries whose two
    perturbed forwards disagree on any ReLU activation pattern straddle a kink
    and are skipped. Parameters are restored on exit.
    """
    inputs = inputs or {}
    loss, tape = forward(graph, inputs, parameters, seed=seed)
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        return GradCheckReport(float("inf"), {}, 0, 0, tolerance, finite=False)
    analytic = backward(tape, loss)
    rng = np.random.default_rng(0)
    per_group: dict[str, float] = {}
    checked = skipped = 0
    finite = True
    for group in parameters:
        flat = group.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            lp, tp = forward(graph, inputs, parameters, seed=seed)
            flat[k] = orig - h
            lm, tm = forward(graph, inputs, parameters, seed=seed)
            flat[k] = orig
            if not (np.isfinite(lp.data).all() and np.isfinite(lm.data).all()):
                finite = False
                continue
            if any((a != b).any() for a, b in zip(_relu_masks(tp), _relu_masks(tm))):
                skipped += 1
                continue
            num = (lp.item() - lm.item()) / (2 * h)
            ana = analytic[group.name].reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            checked += 1
        per_group[group.name] = worst
    max_err = max(per_group.values(), default=0.0)
    return GradCheckReport(max_err, per_group, checked, skipped, tolerance, finite)
