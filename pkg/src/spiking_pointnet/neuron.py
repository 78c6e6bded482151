"""Leaky integrate-and-fire neurons with a tanh-shaped surrogate gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import DimensionError, Node, TapeError


class NeuronConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronConfig:
    v_th: float = 0.5
    leak: float = 0.25
    k: float = 5.0
    spike_at_threshold: bool = True
    # keep the gradient path through the soft reset (u - v_th * s)
    detach_reset: bool = False
    # forward emits surrogate_value instead of hard spikes; gradient checks only
    relaxed: bool = False

    def __post_init__(self):
        if not self.v_th > 0:
            raise NeuronConfigError(f"v_th must be positive, got {self.v_th}")
        # leak = 0 is accepted as the memoryless limit
        if not 0 <= self.leak < 1:
            raise NeuronConfigError(f"leak must lie in [0, 1), got {self.leak}")
        if not self.k > 0:
            raise NeuronConfigError(f"k must be positive, got {self.k}")


@dataclass(frozen=True)
class PerturbationConfig:
    delta_max: float = 0.5
    enabled: bool = False
    resample_policy: Literal["per_epoch", "per_batch"] = "per_epoch"
    seed: int = 0

    def validate(self, neuron: NeuronConfig) -> None:
        # the offset enters scaled by the leak, so delta_max == v_th still cannot fire alone
        if self.delta_max < 0 or self.delta_max > neuron.v_th:
            raise NeuronConfigError(
                f"delta_max={self.delta_max} must lie in [0, v_th={neuron.v_th}]"
            )
        if self.resample_policy not in ("per_epoch", "per_batch"):
            raise NeuronConfigError(f"unknown resample policy {self.resample_policy!r}")


@dataclass
class LayerState:
    membrane: Node
    last_spikes: Node


def surrogate_value(x, config: NeuronConfig) -> np.ndarray:
    return 0.5 * np.tanh(config.k * (np.asarray(x) - config.v_th)) + 0.5


def surrogate_grad(x, config: NeuronConfig) -> np.ndarray:
    t = np.tanh(config.k * (np.asarray(x) - config.v_th))
    return 0.5 * config.k * (1.0 - t * t)


def fire(u: np.ndarray, config: NeuronConfig) -> np.ndarray:
    if config.relaxed:
        return surrogate_value(u, config).astype(u.dtype)
    hit = u >= config.v_th if config.spike_at_threshold else u > config.v_th
    return hit.astype(u.dtype)


def lif_backward(membrane, grad_spikes, grad_membrane, config: NeuronConfig):
    """Gradients of one LIF update with respect to (current, u_prev, s_prev).

    ``membrane`` is the saved post-update potential.  Either upstream
    gradient may be None when that output was not used downstream.
    """
    if membrane is None:
        raise TapeError("lif_backward: saved membrane potential missing")
    total = np.zeros_like(membrane)
    if grad_spikes is not None:
        total = total + grad_spikes * surrogate_grad(membrane, config).astype(membrane.dtype)
    if grad_membrane is not None:
        total = total + grad_membrane
    grad_u_prev = total * config.leak
    if config.detach_reset:
        grad_s_prev = np.zeros_like(total)
    else:
        grad_s_prev = total * (-config.leak * config.v_th)
    return total, grad_u_prev, grad_s_prev


def lif_step(state: LayerState, current: Node, config: NeuronConfig) -> tuple[Node, LayerState]:
    """One soft-reset LIF update: ``u' = leak * (u - v_th * s) + current``."""
    u, s = state.membrane, state.last_spikes
    # u and s may broadcast (e.g. a per-point perturbation shared over the batch)
    try:
        fits = np.broadcast_shapes(u.shape, current.shape) == current.shape
    except ValueError:
        fits = False
    if not fits or s.shape != u.shape:
        raise DimensionError(
            f"lif_step: current {current.shape} vs membrane {u.shape} / spikes {s.shape}"
        )
    tape = current.tape
    new_u = config.leak * (u.value - config.v_th * s.value) + current.value
    new_u = new_u.astype(current.value.dtype, copy=False)
    spikes = fire(new_u, config)

    def backward(g):
        g_u, g_s = g
        d_current, d_u, d_s = lif_backward(new_u, g_s, g_u, config)
        return d_current, _unbroadcast(d_u, u.shape), _unbroadcast(d_s, s.shape)

    out_u, out_s = tape.record("lif", (current, u, s), (new_u, spikes), backward)
    return out_s, LayerState(out_u, out_s)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def initial_state(tape, shape, dtype, delta: np.ndarray | None = None) -> LayerState:
    """Resting state, optionally starting the membrane at ``delta``."""
    membrane = np.zeros(shape, dtype) if delta is None else np.asarray(delta, dtype)
    return LayerState(tape.leaf(membrane), tape.leaf(np.zeros(membrane.shape, dtype)))


def perturb_init(
    shape,
    pconfig: PerturbationConfig,
    rng: np.random.Generator,
    neuron: NeuronConfig = NeuronConfig(),
    dtype=np.float32,
) -> np.ndarray:
    """Initial membrane offsets drawn i.i.d. from ``U[0, delta_max]``."""
    pconfig.validate(neuron)
    if not pconfig.enabled:
        return np.zeros(shape, dtype)
    return rng.uniform(0.0, pconfig.delta_max, size=shape).astype(dtype)


def perturbation_stream(pconfig: PerturbationConfig, epoch: int, batch: int = 0) -> np.random.Generator:
    """Random stream keyed by (seed, epoch[, batch]) so a given epoch always draws the same offsets."""
    key = [pconfig.seed, epoch]
    if pconfig.resample_policy == "per_batch":
        key.append(batch)
    return np.random.default_rng(np.random.SeedSequence([0x4D5050, *key]))
