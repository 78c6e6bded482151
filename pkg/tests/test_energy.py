from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiking_pointnet import energy as E
from spiking_pointnet.model import ModelSpec, _TraceBuilder, build_model, run_snn, synaptic_inputs

from conftest import count_ann_bruteforce, count_snn_bruteforce, small_spec


def random_spec(rng) -> ModelSpec:
    point = tuple(int(w) for w in rng.integers(1, 7, size=rng.integers(1, 4)))
    head = tuple(int(w) for w in rng.integers(1, 7, size=rng.integers(0, 3)))
    return ModelSpec(point_mlp_widths=point, head_widths=head, num_classes=int(rng.integers(2, 5)))


def random_trace(spec, rng, batch, n, steps, rate=None):
    """Trace built from arbitrary binary layer inputs (not from a forward pass)."""
    builder = _TraceBuilder(spec, batch, n, keep_spikes=True)
    for _ in range(steps):
        p = rng.uniform() if rate is None else rate
        point = [(rng.uniform(size=(batch, n, w)) < p).astype(np.float32) for w in spec.point_mlp_widths[:-1]]
        pooled = rng.normal(size=(batch, spec.point_mlp_widths[-1])).astype(np.float32)
        head = [(rng.uniform(size=(batch, w)) < p).astype(np.float32) for w in spec.head_widths]
        builder.add_step(point, pooled, head)
    return builder.build()


def dense_additions(spec, n, steps, batch=1):
    """Per spike-fed layer: in * out * rows * steps, the count when every input fires."""
    out = {}
    for name, fan_in, fan_out, shared, spike_fed in synaptic_inputs(spec):
        if spike_fed:
            out[name] = fan_in * fan_out * (n if shared else 1) * steps * batch
    return out


# --------------------------------------------------------------------------
# ANN counts


def test_single_shared_layer_multiplications():
    spec = ModelSpec(point_mlp_widths=(64,), head_widths=(), num_classes=2)
    counts = E.count_ann_ops(spec, 1024)
    first = counts.layers[0]
    assert first.name == "point0" and first.multiplications == 3 * 64 * 1024 == 196_608
    assert first.additions == 196_608 + 64 * 1024


def test_zero_width_head_contributes_nothing():
    with_head = E.count_ann_ops(ModelSpec(point_mlp_widths=(8, 16), head_widths=(), num_classes=3), 10)
    names = [l.name for l in with_head.layers]
    assert not any(n.startswith("head") for n in names)
    classifier = next(l for l in with_head.layers if l.name == "classifier")
    assert classifier.multiplications == 16 * 3


def test_ann_counts_match_bruteforce_on_random_specs():
    rng = np.random.default_rng(0)
    for _ in range(10):
        spec = random_spec(rng)
        n = int(rng.integers(1, 6))
        counts = E.count_ann_ops(spec, n)
        brute = count_ann_bruteforce(spec, n)
        assert (counts.multiplications, counts.additions, counts.comparisons) == (brute.mult, brute.add, brute.cmp)


def test_reference_spec_ann_magnitude():
    counts = E.count_ann_ops(ModelSpec(num_classes=40), 1024)
    # closed form: per-point MACs times points plus the head
    per_point = 3 * 64 + 64 * 64 + 64 * 64 + 64 * 128 + 128 * 1024
    head = 1024 * 512 + 512 * 256 + 256 * 40
    assert counts.multiplications == per_point * 1024 + head


# --------------------------------------------------------------------------
# SNN counts


def test_snn_counts_match_bruteforce_on_random_traces():
    rng = np.random.default_rng(1)
    for _ in range(10):
        spec = random_spec(rng)
        batch, n, steps = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        trace = random_trace(spec, rng, batch, n, steps)
        counts = E.count_snn_ops(spec, trace)
        brute = count_snn_bruteforce(spec, trace.spikes, n)
        assert (counts.multiplications, counts.additions, counts.comparisons) == (brute.mult, brute.add, brute.cmp)


def test_snn_counts_match_bruteforce_on_real_runs():
    rng = np.random.default_rng(2)
    for seed in range(4):
        spec = small_spec()
        params = build_model(spec, seed)
        cloud = rng.normal(size=(2, 5, 3))
        run = run_snn(cloud, params, 3, keep_spikes=True)
        counts = E.count_snn_ops(spec, run.trace)
        brute = count_snn_bruteforce(spec, run.trace.spikes, 5)
        assert (counts.multiplications, counts.additions) == (brute.mult, brute.add)


def test_zero_spikes_leave_only_mac_layers():
    spec = small_spec()
    trace = random_trace(spec, np.random.default_rng(3), 1, 4, 2, rate=0.0)
    counts = E.count_snn_ops(spec, trace)
    for layer, (name, _, _, _, spike_fed) in zip(counts.layers[1:], synaptic_inputs(spec)):
        if spike_fed:
            assert layer.additions == 0 and layer.multiplications == 0


def test_all_ones_trace_equals_dense_count():
    spec = small_spec()
    trace = random_trace(spec, np.random.default_rng(4), 2, 4, 3, rate=1.0)
    counts = E.count_snn_ops(spec, trace)
    dense = dense_additions(spec, 4, 3, batch=2)
    for layer in counts.layers:
        if layer.name in dense:
            assert layer.additions == dense[layer.name]


def test_additions_equal_rate_times_dense():
    spec = small_spec()
    trace = random_trace(spec, np.random.default_rng(5), 2, 5, 3)
    counts = E.count_snn_ops(spec, trace)
    dense = dense_additions(spec, 5, 3, batch=2)
    for j, (name, *_rest) in enumerate(synaptic_inputs(spec)):
        if name in dense:
            rate = Fraction(int(trace.input_spikes[:, j].sum()), int(trace.input_slots[:, j].sum()))
            layer = next(l for l in counts.layers if l.name == name)
            assert Fraction(layer.additions) == rate * dense[name]


def test_additions_monotone_in_steps():
    spec = small_spec()
    full = random_trace(spec, np.random.default_rng(6), 1, 4, 5)
    prev = -1
    for t in range(1, 6):
        builder = _TraceBuilder(spec, 1, 4, keep_spikes=False)
        for step in full.spikes[:t]:
            n_point = len(spec.point_mlp_widths) - 1
            builder.add_step(step[:n_point], step[n_point], step[n_point + 1 :])
        adds = E.count_snn_ops(spec, builder.build()).additions
        assert adds >= prev
        prev = adds


def test_multi_step_energy_decomposes_per_step():
    spec = small_spec()
    params = build_model(spec, 1)
    cloud = np.random.default_rng(7).normal(size=(1, 6, 3))
    trace = run_snn(cloud, params, 4, keep_spikes=True).trace
    counts = E.count_snn_ops(spec, trace)
    first_layer = 3 * 4 * 6 + 4 * 6
    gated = sum(int(trace.input_spikes[:, j].sum()) * fo for j, (_, _, fo, _, sf) in enumerate(synaptic_inputs(spec)) if sf)
    pooled_layer = next(l for l in E.count_ann_ops(spec, 6).layers if l.name == "head0")
    assert counts.additions == 4 * first_layer + gated + 4 * pooled_layer.additions


def test_trace_mismatch():
    trace = random_trace(small_spec(), np.random.default_rng(8), 1, 3, 1)
    with pytest.raises(E.TraceMismatch):
        E.count_snn_ops(small_spec(point=(4, 6)), trace)


def test_snn_ops_at_rate_is_exact_fraction():
    spec = small_spec()
    c = E.snn_ops_at_rate(spec, 8, 2, 0.187)
    dense = dense_additions(spec, 8, 2)
    for layer in c.layers:
        if layer.name in dense:
            assert layer.additions == Fraction(187, 1000) * dense[layer.name]


# --------------------------------------------------------------------------
# energy


def test_energy_arithmetic():
    zero = E.OpCounts.from_layers([E.LayerCount("x")])
    assert E.estimate_energy(zero).picojoules == 0
    synth = E.OpCounts.from_layers([E.LayerCount("x", multiplications=1000, additions=2000)])
    assert E.estimate_energy(synth).picojoules == 5500


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9), st.integers(1, 50))
def test_energy_linearity(m1, a1, m2, a2, k):
    c1 = E.OpCounts.from_layers([E.LayerCount("x", m1, m1 + a1)])
    c2 = E.OpCounts.from_layers([E.LayerCount("y", m2, m2 + a2)])
    e = lambda c: E.estimate_energy(c).picojoules
    assert e(c1 + c2) == e(c1) + e(c2)
    assert e(c1.scaled(k)) == k * e(c1)


def test_energy_constants_positive():
    with pytest.raises(ValueError):
        E.EnergyConstants(e_mac=0.0)
    assert E.EnergyConstants().technology == "45nm CMOS"


def test_records_are_plain_numbers():
    counts = E.snn_ops_at_rate(small_spec(), 4, 1, 0.5)
    for row in counts.to_records():
        for key in ("multiplications", "additions"):
            assert isinstance(row[key], (int, float))


# --------------------------------------------------------------------------
# gradient histograms


def test_histogram_counts_cover_first_layer():
    spec = small_spec(point=(8, 8))
    ds_pts = np.random.default_rng(9).normal(size=(6, 10, 3)).astype(np.float32)
    labels = np.array([0, 1, 2, 3, 0, 1])
    hists = E.gradient_histogram(spec, ds_pts, labels, (0.5, 5.0, 20.0), (1, 4), seed=0)
    assert [(h.k, h.time_steps) for h in hists] == [(0.5, 1), (5.0, 1), (20.0, 1), (0.5, 4), (5.0, 4), (20.0, 4)]
    for h in hists:
        assert h.total == 3 * 8 == h.gradients.size
        assert 0 <= h.summary["frac_below_1e-6"] <= 1
    again = E.gradient_histogram(spec, ds_pts, labels, (0.5, 5.0, 20.0), (1, 4), seed=0)
    for a, b in zip(hists, again):
        assert np.array_equal(a.gradients, b.gradients)


def test_histogram_bins_and_zero_bin():
    h = E.histogram_of(np.array([0.0, 0.0, 1e-20, 1e-3, 1e-3, 5.0, 1e9]), "x", 1.0, 1)
    assert h.zero_count == 2 and h.total == 7
    assert h.counts[0] == 1 and h.counts[-1] == 1


@pytest.mark.parametrize("bad", [dict(k_values=(0.0,)), dict(t_values=(0,))])
def test_histogram_argument_validation(bad):
    args = dict(k_values=(5.0,), t_values=(1,))
    args.update(bad)
    with pytest.raises(ValueError):
        E.gradient_histogram(small_spec(), np.zeros((2, 3, 3)), np.array([0, 1]), **args)


def test_flatness_and_extreme_mass():
    peaked = np.concatenate([np.zeros(98), [1.0, -1.0]])
    flat = np.linspace(-1, 1, 100)
    assert E.flatness(flat) > E.flatness(peaked)
    assert E.extreme_mass(flat, 0.5) == pytest.approx(0.5)
    assert E.flatness(np.zeros(4)) == 0.0
