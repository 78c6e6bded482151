"""Training and evaluation: single-step training with perturbation, multi-step ensemble inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentConfig, Dataset, augment
from .model import (
    ModelParams,
    ModelSpec,
    bind,
    build_model,
    draw_perturbation,
    forward_ann,
    unroll,
)
from .neuron import PerturbationConfig, perturbation_stream
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.7
    lr_step: int = 20
    t_train: int = 1
    seed: int = 0
    pconfig: PerturbationConfig = field(default_factory=PerturbationConfig)
    augment: bool = True
    eval_steps: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.t_train < 1:
            raise ValueError(f"t_train must be >= 1, got {self.t_train}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step) if self.lr_step > 0 else self.lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("pconfig"), dict):
            d["pconfig"] = PerturbationConfig(**d["pconfig"])
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, config: TrainConfig, lr=None):
    """Adaptive-moment update with decoupled weight decay; returns new arrays, advances ``state``."""
    lr = config.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - config.beta1**t
    c2 = 1 - config.beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1 - config.beta1) * g
        v *= config.beta2
        v += (1 - config.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        out[name] = (p - lr * (update + config.weight_decay * p)).astype(p.dtype)
    return out


def _batch_loss(params: ModelParams, points, labels, tape, nodes, training, rng, steps, deltas):
    if params.spec.mode == "ann":
        logits = forward_ann(points, params, tape, nodes=nodes, training=training, rng=rng)
        return T.softmax_cross_entropy(logits, labels), logits, None
    avg, _, trace = unroll(
        points, params, steps, tape, nodes=nodes, training=training, deltas=deltas, rng=rng
    )
    return T.softmax_cross_entropy(avg, labels), avg, trace


def loss_and_grads(params: ModelParams, points, labels, *, steps=1, training=True, rng=None, deltas=None):
    """Loss on the time-averaged logits and its gradient for every learnable array."""
    tape = Tape()
    nodes = bind(params, tape)
    loss, logits, trace = _batch_loss(params, points, labels, tape, nodes, training, rng, steps, deltas)
    grads = tape.backward(loss)
    out = {k: grads[n] for k, n in nodes.items()}
    tape.release()
    return float(loss.value), out, logits.value, trace


def train(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    test_set: Dataset | None = None,
    init: ModelParams | None = None,
    on_epoch=None,
):
    """Train from ``build_model(spec, config.seed)``; returns ``(params, log_records)``."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    params = init.copy() if init is not None else build_model(spec, config.seed)
    if params.spec != spec:
        params = params.with_spec(spec)
    if spec.mode == "snn":
        config.pconfig.validate(spec.neuron)
    n = dataset.points.shape[1]
    data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x44415441]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x44524F50]))
    opt = OptimizerState.zeros_like(params.arrays)
    aug = AugmentConfig()
    records = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = config.lr_at(epoch)
        deltas = None
        if spec.mode == "snn" and config.pconfig.enabled and config.pconfig.resample_policy == "per_epoch":
            deltas = draw_perturbation(spec, n, config.pconfig, perturbation_stream(config.pconfig, epoch), params.dtype)
        order = data_rng.permutation(len(dataset))
        total_loss = 0.0
        correct = 0
        spikes = slots = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            pts = dataset.points[idx]
            if config.augment:
                pts = augment(pts, data_rng, aug)
            labels = dataset.labels[idx]
            if spec.mode == "snn" and config.pconfig.enabled and config.pconfig.resample_policy == "per_batch":
                stream = perturbation_stream(config.pconfig, epoch, b)
                deltas = draw_perturbation(spec, n, config.pconfig, stream, params.dtype)
            loss, grads, logits, trace = loss_and_grads(
                params, pts, labels, steps=config.t_train, training=True, rng=drop_rng, deltas=deltas
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            try:
                params.arrays.update(adam_step(params.arrays, grads, opt, config, lr))
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch {b}") from exc
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels).sum())
            if trace is not None:
                spikes += int(trace.spike_count.sum())
                slots += int(trace.spike_slots.sum())
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / len(dataset),
            "train_accuracy": correct / len(dataset),
            "firing_rate": spikes / slots if slots else None,
        }
        if test_set is not None and config.eval_every > 0 and (
            (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
        ):
            report = evaluate(params, test_set, config.eval_steps)
            record["test_accuracy"] = report.ensemble_accuracy[-1]
            record["test_loss"] = report.loss
        records.append(record)
        log.info(
            "epoch %d loss %.4f acc %.4f (%.1fs)",
            epoch,
            record["train_loss"],
            record["train_accuracy"],
            time.perf_counter() - started,
        )
        if on_epoch is not None:
            on_epoch(record)
    return params, records


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_step_accuracy: list[float]
    ensemble_accuracy: list[float]
    firing_rate: float | None
    loss: float
    step_logits: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    def to_records(self) -> list[dict]:
        rows = []
        for t, (p, e) in enumerate(zip(self.per_step_accuracy, self.ensemble_accuracy), start=1):
            rows.append({"time_step": t, "per_step_accuracy": p, "ensemble_accuracy": e})
        rows.append({"firing_rate": self.firing_rate, "loss": self.loss, "steps": len(self.per_step_accuracy)})
        return rows


def prefix_mean(step_logits: np.ndarray, t: int) -> np.ndarray:
    """Mean of the logits of steps ``1..t``."""
    return np.mean(step_logits[:t], axis=0)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def evaluate(params: ModelParams, dataset: Dataset, steps: int, batch_size: int = 100) -> EvalReport:
    """Per-step and running-ensemble accuracy over ``steps`` inference steps.

    No perturbation, no dropout, batch-norm running statistics.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    chunks = []
    spikes = slots = 0
    for start in range(0, len(dataset), batch_size):
        pts = dataset.points[start : start + batch_size]
        tape = Tape(enabled=False)
        if params.spec.mode == "ann":
            logits = forward_ann(pts, params, tape).value
            chunks.append(np.stack([logits] * steps))
        else:
            _, per_step, trace = unroll(pts, params, steps, tape)
            chunks.append(np.stack([s.value for s in per_step]))
            spikes += int(trace.spike_count.sum())
            slots += int(trace.spike_slots.sum())
    step_logits = np.concatenate(chunks, axis=1)
    labels = np.asarray(dataset.labels)
    per_step = [float((step_logits[t].argmax(axis=1) == labels).mean()) for t in range(steps)]
    ensemble = [float((prefix_mean(step_logits, t).argmax(axis=1) == labels).mean()) for t in range(1, steps + 1)]
    firing = spikes / slots if slots else None
    loss = _cross_entropy(prefix_mean(step_logits, steps), labels)
    return EvalReport(per_step, ensemble, firing, loss, step_logits, labels)


# --------------------------------------------------------------------------
# paradigm comparison

PARADIGMS = {
    "vanilla_T4": dict(t_train=4, mpp=False),
    "single_step": dict(t_train=1, mpp=False),
    "single_step_mpp": dict(t_train=1, mpp=True),
}


@dataclass
class ComparisonTable:
    eval_steps: list[int]
    rows: dict[str, list[float]]
    metadata: dict

    def to_records(self) -> list[dict]:
        out = [{"record": "metadata", **self.metadata}]
        for name, accs in self.rows.items():
            for t, acc in zip(self.eval_steps, accs):
                out.append({"record": "cell", "method": name, "t_train": PARADIGMS[name]["t_train"], "t_eval": t, "accuracy": acc})
        return out


def paradigm_config(base: TrainConfig, name: str) -> TrainConfig:
    p = PARADIGMS[name]
    pconfig = dataclasses.replace(base.pconfig, enabled=p["mpp"])
    return dataclasses.replace(base, t_train=p["t_train"], pconfig=pconfig)


def compare_paradigms(spec: ModelSpec, train_set: Dataset, test_set: Dataset, config: TrainConfig, eval_steps=(1, 2, 3, 4)):
    """Train the three paradigms from one init seed and cross-evaluate at each ``eval_steps``."""
    eval_steps = list(eval_steps)
    rows = {}
    for name in PARADIGMS:
        params, _ = train(spec, train_set, paradigm_config(config, name))
        report = evaluate(params, test_set, max(eval_steps))
        rows[name] = [report.ensemble_accuracy[t - 1] for t in eval_steps]
    meta = {"seed": config.seed, "spec": spec.to_dict(), "train": config.to_dict(), "train_size": len(train_set), "test_size": len(test_set)}
    return ComparisonTable(eval_steps, rows, meta)


def median_table(tables: list[ComparisonTable]) -> ComparisonTable:
    """Per-cell medians over a seed sweep."""
    first = tables[0]
    rows = {name: [float(np.median([t.rows[name][j] for t in tables])) for j in range(len(first.eval_steps))] for name in first.rows}
    meta = dict(first.metadata)
    meta["seeds"] = [t.metadata["seed"] for t in tables]
    meta.pop("seed", None)
    return ComparisonTable(first.eval_steps, rows, meta)


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
