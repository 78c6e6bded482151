"""Reverse-mode differentiation over a small, closed set of array operations.

Values are plain numpy arrays.  A :class:`Tape` records every operation in
execution order; :meth:`Tape.backward` replays the records in reverse and
sums the contributions reaching each node, so a parameter that is used at
several time steps receives the sum of its per-step gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class DegenerateStatisticsError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} #{self.index} shape={self.value.shape}>"


@dataclass
class _Record:
    kind: str
    inputs: tuple[Node, ...]
    outputs: tuple[Node, ...]
    # maps output gradients (None for outputs nobody used) to input gradients
    backward: Callable[[list[np.ndarray | None]], Sequence[np.ndarray | None]] | None


@dataclass
class Gradients:
    """Gradient map returned by :meth:`Tape.backward`, keyed by node."""

    _by_index: dict[int, np.ndarray] = field(default_factory=dict)
    _nodes: dict[int, Node] = field(default_factory=dict)

    def __getitem__(self, node: Node) -> np.ndarray:
        if node.index not in self._nodes or self._nodes[node.index] is not node:
            raise TapeError(f"{node!r} is not on the differentiated tape")
        g = self._by_index.get(node.index)
        # nodes the loss does not depend on get zeros, built on demand
        return np.zeros_like(node.value) if g is None else g

    def __contains__(self, node: Node) -> bool:
        return self._nodes.get(node.index) is node

    def items(self):
        for node in self._nodes.values():
            yield node, self[node]


class Tape:
    """Ordered record of operations for one training stream."""

    def __init__(self, enabled: bool = True) -> None:
        # a disabled tape computes values but keeps no history (inference)
        self.enabled = enabled
        self._nodes: list[Node] = []
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def nodes(self) -> list[Node]:
        return list(self._nodes)

    def _new_node(self, value: np.ndarray, name: str | None = None) -> Node:
        if not self.enabled:
            return Node(value, self, -1, name)
        node = Node(value, self, len(self._nodes), name)
        self._nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None, dtype=None) -> Node:
        arr = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        node = self._new_node(arr, name)
        if self.enabled:
            self._records.append(_Record("leaf", (), (node,), None))
        return node

    def record(self, kind: str, inputs: Sequence[Node], values: Sequence[np.ndarray], backward) -> tuple[Node, ...]:
        for node in inputs:
            self.check_owns(node)
        outputs = tuple(self._new_node(v) for v in values)
        if self.enabled:
            self._records.append(_Record(kind, tuple(inputs), outputs, backward))
        return outputs

    def check_owns(self, node: Node) -> None:
        if not self.enabled and node.tape is self:
            return
        if node.tape is not self or node.index >= len(self._nodes) or self._nodes[node.index] is not node:
            raise TapeError(f"{node!r} does not belong to this tape")

    def kinds(self) -> list[str]:
        return [r.kind for r in self._records]

    def backward(self, loss: Node) -> Gradients:
        """Gradient of the scalar ``loss`` with respect to every node on the tape."""
        if not self.enabled:
            raise TapeError("cannot differentiate through a disabled tape")
        self.check_owns(loss)
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")

        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for rec in reversed(self._records):
            if rec.backward is None:
                continue
            upstream = [grads.get(out.index) for out in rec.outputs]
            if all(g is None for g in upstream):
                continue
            contributions = rec.backward(upstream)
            for node, g in zip(rec.inputs, contributions):
                if g is None:
                    continue
                if g.shape != node.value.shape:
                    raise DimensionError(
                        f"{rec.kind} backward produced gradient {g.shape} for input {node.value.shape}"
                    )
                if node.index in grads:
                    grads[node.index] = grads[node.index] + g
                else:
                    grads[node.index] = g

        out = Gradients(grads)
        for node in self._nodes:
            out._nodes[node.index] = node
        return out

    def release(self) -> None:
        """Drop the recorded history.

        Nodes point back at their tape and backward closures hold nodes, so
        a finished tape is a reference cycle; releasing it lets the large
        saved activations be freed right away instead of at the next
        cyclic garbage collection.
        """
        self._records = []
        self._nodes = []


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


# --------------------------------------------------------------------------
# operations


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """``x @ weight.T + bias`` applied over the trailing axis."""
    in_dim = weight.shape[1]
    if x.value.ndim < 1 or x.shape[-1] != in_dim or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}"
        )
    tape = _same_tape(x, weight, bias)
    xv, wv = x.value, weight.value
    out = xv @ wv.T + bias.value

    def backward(g):
        (gy,) = g
        g2 = gy.reshape(-1, gy.shape[-1])
        x2 = xv.reshape(-1, in_dim)
        return gy @ wv, g2.T @ x2, g2.sum(axis=0)

    return tape.record("linear", (x, weight, bias), (out,), backward)[0]


def batch_norm(
    x: Node,
    gain: Node,
    shift: Node,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Node:
    """Per-feature normalization over every axis except the last.

    In training mode the running statistics are updated in place.  The
    variance is clamped from below at ``eps`` rather than offset by it.
    """
    features = x.shape[-1]
    if gain.shape != (features,) or shift.shape != (features,) or running_mean.shape != (features,):
        raise DimensionError(f"batch_norm: input {x.shape} vs {features}-feature params {gain.shape}")
    tape = _same_tape(x, gain, shift)
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    count = xv.size // features

    if training:
        if count < 2:
            raise DegenerateStatisticsError(
                "batch_norm: training statistics need at least two samples per feature"
            )
        mean = xv.mean(axis=axes)
        centered = xv - mean
        var = (centered * centered).mean(axis=axes)
        clamped = var < eps
        std = np.sqrt(np.maximum(var, eps))
        xhat = centered / std
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        clamped = None
        std = np.sqrt(np.maximum(running_var, eps)).astype(xv.dtype)
        xhat = (xv - running_mean.astype(xv.dtype)) / std
    gv = gain.value
    out = xhat * gv + shift.value

    def backward(g):
        (gy,) = g
        dgain = (gy * xhat).sum(axis=axes)
        dshift = gy.sum(axis=axes)
        gxhat = gy * gv
        if not training:
            return gxhat / std, dgain, dshift
        mean_g = gxhat.mean(axis=axes)
        mean_gx = (gxhat * xhat).mean(axis=axes)
        mean_gx = np.where(clamped, 0, mean_gx).astype(xv.dtype)
        dx = (gxhat - mean_g - xhat * mean_gx) / std
        return dx, dgain, dshift

    return tape.record("batch_norm", (x, gain, shift), (out,), backward)[0]


def relu(x: Node) -> Node:
    xv = x.value
    mask = xv > 0
    out = np.where(mask, xv, 0).astype(xv.dtype)

    def backward(g):
        return (np.where(mask, g[0], 0).astype(xv.dtype),)

    return x.tape.record("relu", (x,), (out,), backward)[0]


def max_over_points(x: Node) -> tuple[Node, np.ndarray]:
    """Max over axis 1 of a ``[batch, points, features]`` node.

    Returns the pooled node and the argmax indices; ties go to the lowest
    point index, which is also where the gradient is routed.
    """
    if x.value.ndim != 3:
        raise DimensionError(f"max_over_points expects [batch, points, features], got {x.shape}")
    if x.shape[1] == 0:
        raise EmptyInputError("max_over_points: no points")
    xv = x.value
    idx = np.argmax(xv, axis=1)
    out = np.take_along_axis(xv, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        dx = np.zeros_like(xv)
        np.put_along_axis(dx, idx[:, None, :], g[0][:, None, :], axis=1)
        return (dx,)

    return x.tape.record("max_over_points", (x,), (out,), backward)[0], idx


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    lv = logits.value
    if lv.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [batch, classes], got {lv.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = lv.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for {batch} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"labels must lie in [0, {classes})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(batch)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def backward(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1
        return (probs * (g[0] / batch),)

    return logits.tape.record("softmax_cross_entropy", (logits,), (loss,), backward)[0]


def mean_of(nodes: Sequence[Node]) -> Node:
    """Element-wise mean of equally shaped nodes."""
    if not nodes:
        raise EmptyInputError("mean_of needs at least one node")
    tape = _same_tape(*nodes)
    shape = nodes[0].shape
    for n in nodes:
        if n.shape != shape:
            raise DimensionError(f"mean_of: shape {n.shape} != {shape}")
    out = np.mean(np.stack([n.value for n in nodes]), axis=0)
    count = len(nodes)

    def backward(g):
        share = g[0] / count
        return [share] * count

    return tape.record("mean", tuple(nodes), (out,), backward)[0]


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)
    return tape.record("add", (a, b), (a.value + b.value,), lambda g: (g[0], g[0]))[0]


def scale(x: Node, factor: float) -> Node:
    return x.tape.record("scale", (x,), (x.value * factor,), lambda g: (g[0] * factor,))[0]


def masked(x: Node, mask: np.ndarray) -> Node:
    """Element-wise product with a constant mask (used for dropout)."""
    mask = np.asarray(mask, dtype=x.value.dtype)
    return x.tape.record("masked", (x,), (x.value * mask,), lambda g: (g[0] * mask,))[0]


def dropout(x: Node, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    if not training or rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    return masked(x, keep / (1.0 - rate))


# --------------------------------------------------------------------------
# verification


def finite_diff_check(fn: Callable[[Tape, Node], Node], params: np.ndarray, epsilon: float = 1e-6) -> float:
    """Largest relative disagreement between ``backward`` and central differences.

    ``fn(tape, x)`` must build a scalar loss from the leaf ``x`` on ``tape``.
    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x0 = np.array(params, dtype=VERIFY_DTYPE)

    def value_at(x):
        tape = Tape()
        return float(fn(tape, tape.leaf(x)).value)

    if value_at(x0) != value_at(x0):
        raise DeterminismError("function returned different values for identical input")

    tape = Tape()
    leaf = tape.leaf(x0.copy())
    analytic = tape.backward(fn(tape, leaf))[leaf]

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        num_flat[i] = (value_at(xp.reshape(x0.shape)) - value_at(xm.reshape(x0.shape))) / (2 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
