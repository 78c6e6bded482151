"""Operation counts and energy estimates for ANN and SNN forward passes,
plus first-layer gradient histograms across surrogate slopes and time steps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import ModelSpec, SpikeTrace, build_model, synaptic_inputs
from .train import loss_and_grads


class TraceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = 4.6  # pJ per multiply-accumulate
    e_ac: float = 0.9  # pJ per accumulate
    technology: str = "45nm CMOS"

    def __post_init__(self):
        if not (self.e_mac > 0 and self.e_ac > 0):
            raise ValueError("energy constants must be positive")


@dataclass
class LayerCount:
    name: str
    multiplications: int | Fraction = 0
    additions: int | Fraction = 0
    comparisons: int = 0


@dataclass
class OpCounts:
    """Operation totals; ``samples`` clouds were processed for ``time_steps`` steps."""

    additions: int | Fraction
    multiplications: int | Fraction
    comparisons: int
    layers: list[LayerCount]
    time_steps: int = 1
    firing_rate: float | None = None
    samples: int = 1

    @classmethod
    def from_layers(cls, layers, **kw) -> "OpCounts":
        return cls(
            additions=sum((l.additions for l in layers), 0),
            multiplications=sum((l.multiplications for l in layers), 0),
            comparisons=sum(l.comparisons for l in layers),
            layers=layers,
            **kw,
        )

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(
            self.additions + other.additions,
            self.multiplications + other.multiplications,
            self.comparisons + other.comparisons,
            self.layers + other.layers,
            max(self.time_steps, other.time_steps),
            None,
            self.samples,
        )

    def scaled(self, factor: int) -> "OpCounts":
        layers = [
            LayerCount(l.name, l.multiplications * factor, l.additions * factor, l.comparisons * factor)
            for l in self.layers
        ]
        return OpCounts.from_layers(layers, time_steps=self.time_steps, firing_rate=self.firing_rate, samples=self.samples)

    def to_records(self) -> list[dict]:
        rows = [
            {"layer": l.name, "multiplications": _num(l.multiplications), "additions": _num(l.additions), "comparisons": l.comparisons}
            for l in self.layers
        ]
        rows.append(
            {
                "layer": "total",
                "multiplications": _num(self.multiplications),
                "additions": _num(self.additions),
                "comparisons": self.comparisons,
                "time_steps": self.time_steps,
                "firing_rate": self.firing_rate,
                "samples": self.samples,
            }
        )
        return rows


def _num(x):
    return int(x) if isinstance(x, int) or (isinstance(x, Fraction) and x.denominator == 1) else float(x)


def count_ann_ops(spec: ModelSpec, n: int) -> OpCounts:
    """Per-sample op counts of the ReLU network at inference.

    Every weight multiply pairs with one addition (MAC); each output adds
    its bias once.  Batch norm is folded into the preceding layer and
    costs nothing; max-pool comparisons are reported but not costed.
    """
    layers = []
    n_point = len(spec.point_mlp_widths)
    for j, (name, fan_in, fan_out, _) in enumerate(spec.layer_shapes()):
        rows = n if j < n_point else 1
        macs = fan_in * fan_out * rows
        layers.append(LayerCount(name, macs, macs + fan_out * rows))
    layers.append(LayerCount("max_pool", comparisons=(n - 1) * spec.point_mlp_widths[-1]))
    return OpCounts.from_layers(layers, time_steps=1)


def count_snn_ops(spec: ModelSpec, trace: SpikeTrace) -> OpCounts:
    """Op counts of a traced SNN run, totalled over its batch and steps.

    The first layer and the layer fed by the real-valued pooled feature are
    MAC-counted; every spike-fed layer costs one accumulation per input
    spike per outgoing synapse.
    """
    expected = synaptic_inputs(spec)
    if trace.layer_names != [e[0] for e in expected] or trace.fan_out != [e[2] for e in expected]:
        raise TraceMismatch(f"trace layers {trace.layer_names} do not match spec layers {[e[0] for e in expected]}")
    steps, batch, n = trace.steps, trace.batch, trace.points
    name0, fan_in0, fan_out0, _ = spec.layer_shapes()[0]
    first = fan_in0 * fan_out0 * n * batch * steps
    layers = [LayerCount(name0, first, first + fan_out0 * n * batch * steps)]
    for j, (name, fan_in, fan_out, shared, spike_fed) in enumerate(expected):
        if spike_fed:
            adds = int(trace.input_spikes[:, j].sum()) * fan_out
            layers.append(LayerCount(name, 0, adds))
        else:
            rows = (n if shared else 1) * batch * steps
            macs = fan_in * fan_out * rows
            layers.append(LayerCount(name, macs, macs + fan_out * rows))
    layers.append(LayerCount("max_pool", comparisons=(n - 1) * spec.point_mlp_widths[-1] * batch * steps))
    return OpCounts.from_layers(layers, time_steps=steps, firing_rate=trace.firing_rate, samples=batch)


def snn_ops_at_rate(spec: ModelSpec, n: int, steps: int, rate) -> OpCounts:
    """Expected per-sample SNN counts when every spike-fed input fires with probability ``rate``."""
    rate = Fraction(str(rate)) if not isinstance(rate, Fraction) else rate
    name0, fan_in0, fan_out0, _ = spec.layer_shapes()[0]
    first = fan_in0 * fan_out0 * n * steps
    layers = [LayerCount(name0, first, first + fan_out0 * n * steps)]
    for name, fan_in, fan_out, shared, spike_fed in synaptic_inputs(spec):
        rows = (n if shared else 1) * steps
        dense = fan_in * fan_out * rows
        if spike_fed:
            layers.append(LayerCount(name, 0, rate * dense))
        else:
            layers.append(LayerCount(name, dense, dense + fan_out * rows))
    layers.append(LayerCount("max_pool", comparisons=(n - 1) * spec.point_mlp_widths[-1] * steps))
    return OpCounts.from_layers(layers, time_steps=steps, firing_rate=float(rate))


@dataclass
class EnergyReport:
    picojoules: Fraction
    mac_ops: int | Fraction
    ac_ops: int | Fraction
    samples: int = 1
    technology: str = ""

    @property
    def per_sample(self) -> Fraction:
        return self.picojoules / self.samples


def estimate_energy(counts: OpCounts, constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Energy = MACs * e_mac + remaining additions * e_ac, in exact arithmetic."""
    e_mac = Fraction(str(constants.e_mac))
    e_ac = Fraction(str(constants.e_ac))
    macs = counts.multiplications
    acs = counts.additions - counts.multiplications
    return EnergyReport(macs * e_mac + acs * e_ac, macs, acs, counts.samples, constants.technology)


def energy_ratio(ann: EnergyReport, snn: EnergyReport) -> float:
    return float(ann.per_sample / snn.per_sample)


# --------------------------------------------------------------------------
# gradient distributions


@dataclass
class GradientHistogram:
    layer: str
    k: float
    time_steps: int
    edges: np.ndarray  # log10 |g| bin edges
    counts: np.ndarray
    zero_count: int
    summary: dict
    gradients: np.ndarray = field(repr=False)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.zero_count

    def to_records(self) -> list[dict]:
        rows = [{"bin": "zero", "count": self.zero_count}]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            rows.append({"log10_lo": float(lo), "log10_hi": float(hi), "count": int(c)})
        return rows


def histogram_of(values: np.ndarray, layer: str, k: float, steps: int, lo=-12.0, hi=4.0, bins=64) -> GradientHistogram:
    g = np.asarray(values, dtype=np.float64).reshape(-1)
    mag = np.abs(g)
    nonzero = mag[mag > 0]
    edges = np.linspace(lo, hi, bins + 1)
    # out-of-range magnitudes land in the end bins so counts cover every element
    logs = np.clip(np.log10(nonzero), lo, hi)
    counts, _ = np.histogram(logs, bins=edges)
    q25, q75 = np.percentile(g, [25, 75])
    summary = {
        "count": int(g.size),
        "frac_below_1e-6": float(np.mean(mag < 1e-6)),
        "frac_above_1e+1": float(np.mean(mag > 10)),
        "abs_p50": float(np.percentile(mag, 50)),
        "abs_p99": float(np.percentile(mag, 99)),
        "abs_max": float(mag.max()),
        "iqr": float(q75 - q25),
        "flatness": flatness(g),
    }
    return GradientHistogram(layer, k, steps, edges, counts, int(g.size - nonzero.size), summary, g)


def flatness(values: np.ndarray) -> float:
    """Interquartile range over peak magnitude; larger means a flatter, less peaked spread."""
    g = np.asarray(values, dtype=np.float64).reshape(-1)
    peak = np.abs(g).max()
    if peak == 0:
        return 0.0
    q25, q75 = np.percentile(g, [25, 75])
    return float((q75 - q25) / peak)


def extreme_mass(values: np.ndarray, threshold: float) -> float:
    return float(np.mean(np.abs(np.asarray(values)) > threshold))


def gradient_histogram(
    spec: ModelSpec,
    points: np.ndarray,
    labels: np.ndarray,
    k_values=(0.5, 5.0, 20.0),
    t_values=(1, 4),
    seed: int = 0,
    layer: str = "point0.weight",
) -> list[GradientHistogram]:
    """First-layer weight-gradient histograms of a fresh model for every (k, T)."""
    out = []
    for steps in t_values:
        if steps < 1:
            raise ValueError(f"time steps must be >= 1, got {steps}")
        for k in k_values:
            if not k > 0:
                raise ValueError(f"k must be positive, got {k}")
            cell = dataclasses.replace(spec, mode="snn", neuron=dataclasses.replace(spec.neuron, k=float(k)))
            params = build_model(cell, seed)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x44524F50]))
            _, grads, _, _ = loss_and_grads(params, points, labels, steps=steps, training=True, rng=rng)
            out.append(histogram_of(grads[layer], layer, float(k), steps))
    return out
