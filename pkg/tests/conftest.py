"""Shared fixtures and independent reference implementations used as oracles.

Everything here is written with explicit Python loops over scalars so it
shares no code path with the vectorized package internals.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from spiking_pointnet.model import ModelSpec, build_model
from spiking_pointnet.neuron import NeuronConfig

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


def small_spec(mode="snn", classes=4, point=(4, 6, 8), head=(5,), **kw) -> ModelSpec:
    return ModelSpec(point_mlp_widths=point, head_widths=head, num_classes=classes, mode=mode, **kw)


def with_running_stats(params, seed=7):
    """Give every batch-norm layer non-trivial running statistics (64-bit friendly)."""
    rng = np.random.default_rng(seed)
    for key in params.buffers:
        if key.endswith("bn_mean"):
            params.buffers[key][:] = rng.normal(0, 0.3, params.buffers[key].shape)
        else:
            params.buffers[key][:] = rng.uniform(0.5, 2.0, params.buffers[key].shape)
    for key in params.arrays:
        if key.endswith("bn_gain"):
            params.arrays[key][:] = rng.uniform(0.5, 1.5, params.arrays[key].shape)
        elif key.endswith("bn_shift") or key.endswith(".bias"):
            params.arrays[key][:] = rng.normal(0, 0.2, params.arrays[key].shape)
    return params


# --------------------------------------------------------------------------
# scalar-loop reference forward passes (eval mode)


def ref_linear_row(x, W, b):
    out = []
    for o in range(len(W)):
        acc = 0.0
        for j in range(len(x)):
            acc += float(W[o][j]) * float(x[j])
        out.append(acc + float(b[o]))
    return out


def ref_bn_row(h, params, layer):
    mean = params.buffers[f"{layer}.bn_mean"]
    var = params.buffers[f"{layer}.bn_var"]
    gain = params.arrays[f"{layer}.bn_gain"]
    shift = params.arrays[f"{layer}.bn_shift"]
    return [
        (v - float(mean[f])) / math.sqrt(max(float(var[f]), 1e-5)) * float(gain[f]) + float(shift[f])
        for f, v in enumerate(h)
    ]


def ref_layer(x, params, layer, normalized=True):
    W = params.arrays[f"{layer}.weight"]
    b = params.arrays[f"{layer}.bias"]
    h = ref_linear_row(x, W, b)
    return ref_bn_row(h, params, layer) if normalized else h


def ref_forward_ann(cloud, params):
    """Logits for one [n, 3] cloud, eval mode."""
    spec = params.spec
    last = len(spec.point_mlp_widths) - 1
    feats = []
    for p in cloud:
        x = [float(v) for v in p]
        for i in range(last + 1):
            x = ref_layer(x, params, f"point{i}")
            if i < last:
                x = [v if v > 0 else 0.0 for v in x]
        feats.append(x)
    pooled = [max(f[c] for f in feats) for c in range(len(feats[0]))]
    x = pooled
    for i in range(len(spec.head_widths)):
        x = [v if v > 0 else 0.0 for v in ref_layer(x, params, f"head{i}")]
    return ref_linear_row(x, params.arrays["classifier.weight"], params.arrays["classifier.bias"])


def ref_lif(u, s, current, leak, v_th):
    u2 = leak * (u - v_th * s) + current
    return u2, (1.0 if u2 >= v_th else 0.0)


def ref_forward_snn(cloud, params, steps, deltas=None):
    """Per-step logits for one cloud, each neuron simulated as a scalar."""
    spec = params.spec
    nc = spec.neuron
    n = len(cloud)
    last = len(spec.point_mlp_widths) - 1
    # membrane and spike per (layer, point, channel) / (layer, channel)
    mem, spk = {}, {}
    for i, w in enumerate(spec.point_mlp_widths[:-1]):
        for p in range(n):
            for c in range(w):
                mem[(f"point{i}", p, c)] = 0.0 if deltas is None else float(deltas[f"point{i}"][p][c])
                spk[(f"point{i}", p, c)] = 0.0
    for i, w in enumerate(spec.head_widths):
        for c in range(w):
            mem[(f"head{i}", c)] = 0.0 if deltas is None else float(deltas[f"head{i}"][c])
            spk[(f"head{i}", c)] = 0.0
    logits = []
    for _ in range(steps):
        feats = []
        for p in range(n):
            x = [float(v) for v in cloud[p]]
            for i in range(last):
                cur = ref_layer(x, params, f"point{i}")
                out = []
                for c, I in enumerate(cur):
                    key = (f"point{i}", p, c)
                    mem[key], spk[key] = ref_lif(mem[key], spk[key], I, nc.leak, nc.v_th)
                    out.append(spk[key])
                x = out
            feats.append(ref_layer(x, params, f"point{last}"))
        x = [max(f[c] for f in feats) for c in range(len(feats[0]))]
        for i in range(len(spec.head_widths)):
            cur = ref_layer(x, params, f"head{i}")
            out = []
            for c, I in enumerate(cur):
                key = (f"head{i}", c)
                mem[key], spk[key] = ref_lif(mem[key], spk[key], I, nc.leak, nc.v_th)
                out.append(spk[key])
            x = out
        logits.append(ref_linear_row(x, params.arrays["classifier.weight"], params.arrays["classifier.bias"]))
    return logits


# --------------------------------------------------------------------------
# instrumented counters: every scalar multiply / add inside the kernel bumps a counter


class Counter:
    def __init__(self):
        self.mult = 0
        self.add = 0
        self.cmp = 0


def counted_linear(x, W, b, ctr: Counter, spike_input=False):
    """Dense linear layer on one row. With ``spike_input`` a zero input is skipped
    and a one is accumulated without multiplying (and bias is not re-added)."""
    out = []
    for o in range(len(W)):
        acc = 0.0
        for j in range(len(x)):
            if spike_input:
                if x[j] != 0:
                    acc += W[o][j]
                    ctr.add += 1
            else:
                acc += W[o][j] * x[j]
                ctr.mult += 1
                ctr.add += 1
        if not spike_input:
            acc += b[o]
            ctr.add += 1
        else:
            acc += b[o]
        out.append(acc)
    return out


def count_ann_bruteforce(spec: ModelSpec, n: int) -> Counter:
    """Run a folded-BN dense forward on an arbitrary cloud and count scalar ops."""
    ctr = Counter()
    rng = np.random.default_rng(0)
    shapes = spec.layer_shapes()
    Ws = {name: rng.normal(size=(o, i)).tolist() for name, i, o, _ in shapes}
    bs = {name: [0.0] * o for name, i, o, _ in shapes}
    n_point = len(spec.point_mlp_widths)
    feats = []
    for _ in range(n):
        x = rng.normal(size=spec.in_dim).tolist()
        for name, *_ in shapes[:n_point]:
            x = counted_linear(x, Ws[name], bs[name], ctr)
        feats.append(x)
    pooled = list(feats[0])
    for f in feats[1:]:
        for c in range(len(pooled)):
            ctr.cmp += 1
            pooled[c] = max(pooled[c], f[c])
    x = pooled
    for name, *_ in shapes[n_point:]:
        x = counted_linear(x, Ws[name], bs[name], ctr)
    return ctr


def count_snn_bruteforce(spec: ModelSpec, spikes_per_step, n: int) -> Counter:
    """Replay recorded layer inputs through counting kernels.

    ``spikes_per_step[t][j]`` is the input array of synaptic layer j+1
    (every layer after the first), as stored in a kept spike trace.
    """
    ctr = Counter()
    shapes = spec.layer_shapes()
    n_point = len(spec.point_mlp_widths)
    zeros = {name: [[0.0] * i for _ in range(o)] for name, i, o, _ in shapes}
    zb = {name: [0.0] * o for name, i, o, _ in shapes}
    for inputs in spikes_per_step:
        batch = inputs[0].shape[0] if inputs else 1
        name0, fi0, fo0, _ = shapes[0]
        for _ in range(batch * n):
            counted_linear([1.0] * fi0, zeros[name0], zb[name0], ctr)
        for j, arr in enumerate(inputs, start=1):
            name = shapes[j][0]
            rows = arr.reshape(-1, arr.shape[-1])
            spike_fed = j != n_point
            for row in rows:
                counted_linear(row.tolist(), zeros[name], zb[name], ctr, spike_input=spike_fed)
        for _ in range(batch):
            ctr.cmp += (n - 1) * spec.point_mlp_widths[-1]
    return ctr


@pytest.fixture
def default_neuron():
    return NeuronConfig()


@pytest.fixture
def tiny_snn():
    spec = small_spec("snn")
    return with_running_stats(build_model(spec, 3, np.float64))


@pytest.fixture
def tiny_ann():
    spec = small_spec("ann")
    return with_running_stats(build_model(spec, 3, np.float64))


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
