"""Vanilla PointNet (shared point MLP, max pool, MLP head) in ANN and SNN form."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .neuron import (
    LayerState,
    NeuronConfig,
    PerturbationConfig,
    initial_state,
    lif_step,
    perturb_init,
)
from .tensor import Node, Tape


class ModelConfigError(ValueError):
    pass


class StateError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    point_mlp_widths: tuple[int, ...] = (64, 64, 64, 128, 1024)
    head_widths: tuple[int, ...] = (512, 256)
    num_classes: int = 40
    mode: Literal["ann", "snn"] = "snn"
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    dropout_rate: float = 0.3
    in_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "point_mlp_widths", tuple(int(w) for w in self.point_mlp_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if not self.point_mlp_widths or min(self.point_mlp_widths) < 1:
            raise ModelConfigError(f"point_mlp_widths must be nonempty and positive: {self.point_mlp_widths}")
        if self.head_widths and min(self.head_widths) < 1:
            raise ModelConfigError(f"head widths must be positive: {self.head_widths}")
        if self.num_classes < 2:
            raise ModelConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mode not in ("ann", "snn"):
            raise ModelConfigError(f"mode must be 'ann' or 'snn', got {self.mode!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ModelConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def layer_shapes(self) -> list[tuple[str, int, int, bool]]:
        """(name, in, out, normalized) for every linear layer in forward order."""
        shapes = []
        prev = self.in_dim
        for i, w in enumerate(self.point_mlp_widths):
            shapes.append((f"point{i}", prev, w, True))
            prev = w
        for i, w in enumerate(self.head_widths):
            shapes.append((f"head{i}", prev, w, True))
            prev = w
        shapes.append(("classifier", prev, self.num_classes, False))
        return shapes

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["point_mlp_widths"] = list(self.point_mlp_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "neuron" in d and isinstance(d["neuron"], dict):
            d["neuron"] = NeuronConfig(**d["neuron"])
        return cls(**d)


@dataclass
class LinearParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class BatchNormParams:
    gain: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class ModelParams:
    """Learnable arrays plus batch-norm running statistics, keyed by name."""

    spec: ModelSpec
    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def linear(self, layer: str) -> LinearParams:
        return LinearParams(self.arrays[f"{layer}.weight"], self.arrays[f"{layer}.bias"])

    def norm(self, layer: str) -> BatchNormParams:
        return BatchNormParams(
            self.arrays[f"{layer}.bn_gain"],
            self.arrays[f"{layer}.bn_shift"],
            self.buffers[f"{layer}.bn_mean"],
            self.buffers[f"{layer}.bn_var"],
        )

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.spec,
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def with_spec(self, spec: ModelSpec) -> "ModelParams":
        check = build_model(spec, 0)
        for name, arr in self.arrays.items():
            if check.arrays[name].shape != arr.shape:
                raise ModelConfigError(f"{name}: {arr.shape} does not fit spec ({check.arrays[name].shape})")
        return ModelParams(spec, self.arrays, self.buffers)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.arrays.keys() == other.arrays.keys()
            and self.buffers.keys() == other.buffers.keys()
            and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
            and all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items())
        )


def build_model(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases, unit batch-norm gain."""
    rng = np.random.default_rng(np.random.SeedSequence([0x494E4954, seed]))
    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out, normalized in spec.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        arrays[f"{name}.bias"] = np.zeros(fan_out, dtype)
        if normalized:
            arrays[f"{name}.bn_gain"] = np.ones(fan_out, dtype)
            arrays[f"{name}.bn_shift"] = np.zeros(fan_out, dtype)
            buffers[f"{name}.bn_mean"] = np.zeros(fan_out, dtype)
            buffers[f"{name}.bn_var"] = np.ones(fan_out, dtype)
    return ModelParams(spec, arrays, buffers)


def bind(params: ModelParams, tape: Tape) -> dict[str, Node]:
    """Register every learnable array as a leaf of ``tape``."""
    return {name: tape.leaf(arr, name=name) for name, arr in params.arrays.items()}


def _as_points(points, tape: Tape, dtype) -> Node:
    if isinstance(points, Node):
        return points
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise T.DimensionError(f"points must be [batch, n, 3], got {arr.shape}")
    if arr.shape[1] == 0:
        raise T.EmptyInputError("point cloud has no points")
    return tape.leaf(arr, name="points")


def _affine(x: Node, nodes, params: ModelParams, layer: str, training: bool) -> Node:
    h = T.linear(x, nodes[f"{layer}.weight"], nodes[f"{layer}.bias"])
    bn = params.norm(layer)
    return T.batch_norm(
        h,
        nodes[f"{layer}.bn_gain"],
        nodes[f"{layer}.bn_shift"],
        bn.running_mean,
        bn.running_var,
        training,
        bn.momentum,
        bn.eps,
    )


def forward_ann(
    points,
    params: ModelParams,
    tape: Tape | None = None,
    *,
    nodes: dict[str, Node] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Node:
    """Logits of the ReLU network for a ``[batch, n, 3]`` array."""
    spec = params.spec
    tape = tape if tape is not None else Tape(enabled=False)
    nodes = nodes if nodes is not None else bind(params, tape)
    x = _as_points(points, tape, params.dtype)
    last = len(spec.point_mlp_widths) - 1
    for i in range(last + 1):
        x = _affine(x, nodes, params, f"point{i}", training)
        # the final point layer feeds the max pool without an activation
        if i < last:
            x = T.relu(x)
    x, _ = T.max_over_points(x)
    for i in range(len(spec.head_widths)):
        x = T.relu(_affine(x, nodes, params, f"head{i}", training))
    x = T.dropout(x, spec.dropout_rate, rng, training)
    return T.linear(x, nodes["classifier.weight"], nodes["classifier.bias"])


@dataclass
class NetworkState:
    """One LayerState per spiking layer: point layers (all but the last), then head layers."""

    layers: list[LayerState]

    @classmethod
    def fresh(cls, spec: ModelSpec, tape: Tape, batch: int, n: int, dtype, deltas=None) -> "NetworkState":
        layers = []
        for i, (shape, key) in enumerate(_state_shapes(spec, batch, n)):
            delta = None if deltas is None else deltas.get(key)
            layers.append(initial_state(tape, shape if delta is None else np.shape(delta), dtype, delta))
        return cls(layers)


def _state_shapes(spec: ModelSpec, batch: int, n: int):
    for i, w in enumerate(spec.point_mlp_widths[:-1]):
        yield (batch, n, w), f"point{i}"
    for i, w in enumerate(spec.head_widths):
        yield (batch, w), f"head{i}"


def perturbation_shapes(spec: ModelSpec, n: int) -> dict[str, tuple[int, ...]]:
    """Per-neuron perturbation shapes; point-layer offsets are per (point slot, channel)."""
    shapes = {f"point{i}": (n, w) for i, w in enumerate(spec.point_mlp_widths[:-1])}
    shapes.update({f"head{i}": (w,) for i, w in enumerate(spec.head_widths)})
    return shapes


def draw_perturbation(spec: ModelSpec, n: int, pconfig: PerturbationConfig, rng, dtype=T.DEFAULT_DTYPE):
    if not pconfig.enabled:
        pconfig.validate(spec.neuron)
        return None
    return {
        key: perturb_init(shape, pconfig, rng, spec.neuron, dtype)
        for key, shape in perturbation_shapes(spec, n).items()
    }


@dataclass
class SpikeTrace:
    """Spike statistics of an SNN run, enough to count synaptic operations.

    ``input_spikes[t, j]`` is the number of ones entering synaptic layer
    ``layer_names[j]`` (every linear layer after the first) at step t.
    ``spikes`` holds the raw binary outputs per step when requested.
    """

    layer_names: list[str]
    fan_in: list[int]
    fan_out: list[int]
    batch: int
    points: int
    input_spikes: np.ndarray
    input_slots: np.ndarray
    spike_count: np.ndarray
    spike_slots: np.ndarray
    spikes: list[list[np.ndarray]] | None = None

    @property
    def steps(self) -> int:
        return self.input_spikes.shape[0]

    @property
    def firing_rate(self) -> float:
        slots = int(self.spike_slots.sum())
        return float(self.spike_count.sum()) / slots if slots else 0.0


def synaptic_inputs(spec: ModelSpec):
    """(name, fan_in, fan_out, shared_over_points, spike_fed) for every layer after the first.

    The layer right after the max pool receives the real-valued pooled
    feature; every other one receives binary spikes.
    """
    out = []
    n_point = len(spec.point_mlp_widths)
    for j, (name, fan_in, fan_out, _) in enumerate(spec.layer_shapes()[1:], start=1):
        out.append((name, fan_in, fan_out, j < n_point, j != n_point))
    return out


def spiking_layer_count(spec: ModelSpec) -> int:
    return len(spec.point_mlp_widths) - 1 + len(spec.head_widths)


class _TraceBuilder:
    def __init__(self, spec: ModelSpec, batch: int, n: int, keep_spikes: bool):
        self.spec = spec
        self.batch = batch
        self.n = n
        self.layers = synaptic_inputs(spec)
        self.rows_in, self.rows_slots, self.counts, self.slots = [], [], [], []
        self.spikes = [] if keep_spikes else None

    def add_step(self, point_spikes, pooled, head_spikes):
        inputs = point_spikes + [pooled] + head_spikes
        self.rows_in.append([int(np.count_nonzero(s)) for s in inputs])
        self.rows_slots.append([int(s.size) for s in inputs])
        spiking = point_spikes + head_spikes
        self.counts.append(sum(int(np.count_nonzero(s)) for s in spiking))
        self.slots.append(sum(int(s.size) for s in spiking))
        if self.spikes is not None:
            self.spikes.append([s.copy() for s in inputs])

    def build(self) -> SpikeTrace:
        return SpikeTrace(
            layer_names=[l[0] for l in self.layers],
            fan_in=[l[1] for l in self.layers],
            fan_out=[l[2] for l in self.layers],
            batch=self.batch,
            points=self.n,
            input_spikes=np.array(self.rows_in, dtype=np.int64).reshape(-1, len(self.layers)),
            input_slots=np.array(self.rows_slots, dtype=np.int64).reshape(-1, len(self.layers)),
            spike_count=np.array(self.counts, dtype=np.int64),
            spike_slots=np.array(self.slots, dtype=np.int64),
            spikes=self.spikes,
        )


def forward_snn_step(
    points,
    params: ModelParams,
    state: NetworkState,
    tape: Tape,
    *,
    nodes: dict[str, Node],
    training: bool = False,
    dropout_mask: np.ndarray | None = None,
):
    """One time step of the spiking network.

    Returns ``(logits, new_state, point_spikes, pooled, head_spikes)``; the
    spike lists hold plain arrays for tracing.
    """
    spec = params.spec
    if spec.mode != "snn":
        raise ModelConfigError("forward_snn_step needs an snn-mode spec")
    n_spiking = spiking_layer_count(spec)
    if len(state.layers) != n_spiking:
        raise StateError(f"state has {len(state.layers)} layers, spec needs {n_spiking}")
    x = _as_points(points, tape, params.dtype)
    batch, n = x.shape[0], x.shape[1]
    new_layers = []
    point_spikes, head_spikes = [], []
    for (shape, key), layer_state in zip(_state_shapes(spec, batch, n), state.layers):
        try:
            fits = np.broadcast_shapes(layer_state.membrane.shape, shape) == shape
        except ValueError:
            fits = False
        if not fits:
            raise StateError(f"{key}: state {layer_state.membrane.shape} does not fit {shape}")
    offset = len(spec.point_mlp_widths) - 1
    for i in range(offset):
        current = _affine(x, nodes, params, f"point{i}", training)
        x, st = lif_step(state.layers[i], current, spec.neuron)
        new_layers.append(st)
        point_spikes.append(x.value)
    x = _affine(x, nodes, params, f"point{offset}", training)
    x, _ = T.max_over_points(x)
    pooled = x.value
    for i in range(len(spec.head_widths)):
        current = _affine(x, nodes, params, f"head{i}", training)
        x, st = lif_step(state.layers[offset + i], current, spec.neuron)
        new_layers.append(st)
        head_spikes.append(x.value)
    if dropout_mask is not None:
        x = T.masked(x, dropout_mask)
    logits = T.linear(x, nodes["classifier.weight"], nodes["classifier.bias"])
    return logits, NetworkState(new_layers), point_spikes, pooled, head_spikes


@dataclass
class SNNRun:
    averaged: np.ndarray
    per_step: list[np.ndarray]
    trace: SpikeTrace


def unroll(
    points,
    params: ModelParams,
    steps: int,
    tape: Tape,
    *,
    nodes: dict[str, Node] | None = None,
    training: bool = False,
    deltas: dict[str, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    keep_spikes: bool = False,
):
    """Run ``steps`` SNN steps with persistent state on ``tape``.

    Returns ``(averaged_logits_node, per_step_logit_nodes, trace)``.
    """
    if steps < 1:
        raise ModelConfigError(f"time steps must be >= 1, got {steps}")
    spec = params.spec
    nodes = nodes if nodes is not None else bind(params, tape)
    x = _as_points(points, tape, params.dtype)
    batch, n = x.shape[0], x.shape[1]
    state = NetworkState.fresh(spec, tape, batch, n, params.dtype, deltas)
    mask = None
    if training and spec.dropout_rate > 0 and spec.head_widths:
        # one mask per sample, shared by all steps of the unrolled run
        keep = rng.random((batch, spec.head_widths[-1])) >= spec.dropout_rate
        mask = keep / (1.0 - spec.dropout_rate)
    builder = _TraceBuilder(spec, batch, n, keep_spikes)
    step_logits = []
    for _ in range(steps):
        logits, state, ps, pooled, hs = forward_snn_step(
            x, params, state, tape, nodes=nodes, training=training, dropout_mask=mask
        )
        step_logits.append(logits)
        builder.add_step(ps, pooled, hs)
    return T.mean_of(step_logits), step_logits, builder.build()


def run_snn(
    points,
    params: ModelParams,
    steps: int,
    pconfig: PerturbationConfig | None = None,
    rng: np.random.Generator | None = None,
    *,
    keep_spikes: bool = False,
) -> SNNRun:
    """Inference: fresh state (zeros, or a perturbation draw), ``steps`` persistent steps, averaged logits."""
    if steps < 1:
        raise ModelConfigError(f"time steps must be >= 1, got {steps}")
    arr = np.asarray(points, dtype=params.dtype)
    if arr.ndim == 2:
        arr = arr[None]
    deltas = None
    if pconfig is not None and pconfig.enabled:
        rng = rng if rng is not None else np.random.default_rng(pconfig.seed)
        deltas = draw_perturbation(params.spec, arr.shape[1], pconfig, rng, params.dtype)
    tape = Tape(enabled=False)
    avg, steps_out, trace = unroll(arr, params, steps, tape, deltas=deltas, keep_spikes=keep_spikes)
    return SNNRun(avg.value, [s.value for s in steps_out], trace)


# --------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = b"SPNCKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> None:
    """Versioned header, JSON spec, then (name, kind, shape, float32 LE data) per tensor."""
    spec_bytes = json.dumps(params.spec.to_dict(), sort_keys=True).encode()
    entries = [(name, 0, arr) for name, arr in params.arrays.items()]
    entries += [(name, 1, arr) for name, arr in params.buffers.items()]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(spec_bytes)))
        fh.write(spec_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, kind, arr in entries:
            raw = name.encode()
            fh.write(struct.pack("<HBB", len(raw), kind, arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, spec_len = struct.unpack("<II", take(8))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec = ModelSpec.from_dict(json.loads(bytes(take(spec_len))))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad spec record ({exc})") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays, buffers = {}, {}
    for _ in range(count):
        name_len, kind, ndim = struct.unpack("<HBB", take(4))
        name = bytes(take(name_len)).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        (arrays if kind == 0 else buffers)[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(spec, arrays, buffers)
