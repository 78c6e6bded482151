"""Command-line entry point: ``spiking-pointnet <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import energy as E
from .model import ModelSpec, load_checkpoint, run_snn, save_checkpoint
from .neuron import NeuronConfig, NeuronConfigError, PerturbationConfig
from .train import (
    TrainConfig,
    TrainingDiverged,
    compare_paradigms,
    evaluate,
    median_table,
    train,
    write_jsonl,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("spiking_pointnet")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"train_cache": "data/train.bin", "test_cache": "data/test.bin"},
    "model": {
        "point_mlp_widths": [64, 64, 64, 128, 1024],
        "head_widths": [512, 256],
        "num_classes": None,  # taken from the dataset manifest
        "mode": "snn",
        "dropout_rate": 0.3,
    },
    "neuron": {"v_th": 0.5, "leak": 0.25, "k": 5.0, "spike_at_threshold": True, "detach_reset": False},
    "perturbation": {"enabled": True, "delta_max": 0.5, "resample_policy": "per_epoch"},
    "train": {
        "epochs": 200,
        "batch_size": 32,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "lr_decay": 0.7,
        "lr_step": 20,
        "t_train": 1,
        "augment": True,
        "eval_steps": 1,
        "eval_every": 1,
    },
    "eval": {"t_eval": 4},
    "compare": {"seeds": 1, "t_eval": [1, 2, 3, 4]},
    "gradhist": {"k": [0.5, 5.0, 20.0], "t": [1, 4], "batch": 32},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULTS, raw)


def _set(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def model_spec(cfg: dict, num_classes: int | None = None) -> ModelSpec:
    m = cfg["model"]
    classes = m["num_classes"] if m["num_classes"] is not None else num_classes
    if classes is None:
        raise ConfigError("model.num_classes is unset and no dataset provides it")
    neuron = NeuronConfig(**cfg["neuron"])
    return ModelSpec(
        point_mlp_widths=tuple(m["point_mlp_widths"]),
        head_widths=tuple(m["head_widths"]),
        num_classes=int(classes),
        mode=m["mode"],
        neuron=neuron,
        dropout_rate=m["dropout_rate"],
    )


def train_config(cfg: dict) -> TrainConfig:
    p = cfg["perturbation"]
    pconfig = PerturbationConfig(
        delta_max=p["delta_max"], enabled=p["enabled"], resample_policy=p["resample_policy"], seed=cfg["seed"]
    )
    return TrainConfig(**cfg["train"], seed=cfg["seed"], pconfig=pconfig)


def _echo(cfg: dict) -> None:
    print(json.dumps(cfg, indent=2, sort_keys=True))


def _prepare_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_file(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise ConfigError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _read_cache(path) -> D.Dataset:
    try:
        return D.cache_read(path)
    except OSError as exc:
        raise DataError(f"cannot read cache {path}: {exc}") from None
    except D.CacheError as exc:
        raise DataError(str(exc)) from None


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    resolved = {"data_root": str(args.data_root), "out": str(args.out), "points": args.points, "seed": args.seed, "strict": args.strict}
    _echo(resolved)
    layout = D.scan_modelnet(args.data_root)
    class_names = sorted(set(layout["train"]) | set(layout["test"]))
    if not class_names:
        raise DataError(f"no class_name/{{train,test}}/*.off files under {args.data_root}")
    out = _prepare_dir(args.out, args.force)
    manifests = {}
    for split in ("train", "test"):
        try:
            ds, failures = D.load_modelnet_split(layout[split], class_names, args.points, args.seed, split, args.strict)
        except (D.ParseError, D.DegenerateMeshError) as exc:
            raise DataError(f"{split}: {exc}") from None
        for path, msg in failures:
            print(f"warning: skipped {path}: {msg}", file=sys.stderr)
        D.cache_write(ds, out / f"{split}.bin")
        manifests[split] = ds.manifest.to_dict()
        counts = np.bincount(ds.labels, minlength=len(class_names))
        for name, c in zip(class_names, counts):
            print(f"{split}\t{name}\t{c}")
    (out / "manifest.json").write_text(json.dumps(manifests, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    resolved = {
        "classes": classes,
        "per_class": args.per_class,
        "test_per_class": args.test_per_class,
        "points": args.points,
        "seed": args.seed,
        "out": str(args.out),
    }
    _echo(resolved)
    if args.per_class < 1 or args.test_per_class < 1:
        raise ConfigError("--per-class and --test-per-class must be >= 1")
    if args.points < 1:
        raise ConfigError("--points must be >= 1")
    unknown = set(classes) - set(D.SHAPES)
    if unknown or not classes:
        raise ConfigError(f"unknown classes {sorted(unknown)}; choose from {','.join(D.SHAPES)}")
    out = _prepare_dir(args.out, args.force)
    seeds = np.random.SeedSequence([args.seed, 0x53594E]).spawn(2)
    train_set = D.synth_shapes(classes, args.per_class, args.points, np.random.default_rng(seeds[0]), split="train")
    test_set = D.synth_shapes(classes, args.test_per_class, args.points, np.random.default_rng(seeds[1]), split="test")
    D.cache_write(train_set, out / "train.bin")
    D.cache_write(test_set, out / "test.bin")
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    for split, ds in (("train", train_set), ("test", test_set)):
        counts = np.bincount(ds.labels, minlength=len(ds.manifest.class_names))
        for name, c in zip(ds.manifest.class_names, counts):
            print(f"{split}\t{name}\t{c}")
    return EXIT_OK


def _resolve_train(args) -> dict:
    cfg = load_config(args.config)
    _set(cfg, "seed", args.seed)
    _set(cfg, "model.mode", args.mode)
    _set(cfg, "train.t_train", args.t_train)
    _set(cfg, "train.epochs", getattr(args, "epochs", None))
    _set(cfg, "data.train_cache", getattr(args, "train_cache", None))
    _set(cfg, "data.test_cache", getattr(args, "test_cache", None))
    _set(cfg, "output_dir", getattr(args, "out", None))
    if getattr(args, "mpp", None) is not None:
        cfg["perturbation"]["enabled"] = args.mpp == "on"
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_train(args)
    _echo(cfg)
    train_set = _read_cache(cfg["data"]["train_cache"])
    test_path = cfg["data"]["test_cache"]
    test_set = _read_cache(test_path) if test_path and Path(test_path).exists() else None
    spec = model_spec(cfg, len(train_set.manifest.class_names))
    tcfg = train_config(cfg)
    out = _prepare_dir(cfg["output_dir"], args.force)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def append(record):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        print(json.dumps(record, sort_keys=True))

    try:
        params, records = train(spec, train_set, tcfg, test_set, on_epoch=append)
    except TrainingDiverged as exc:
        append({"diverged": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(out / "model.ckpt", params)
    final = {"final_train_accuracy": records[-1]["train_accuracy"], "final_train_loss": records[-1]["train_loss"]}
    if "test_accuracy" in records[-1]:
        final["final_test_accuracy"] = records[-1]["test_accuracy"]
    (out / "metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = {"checkpoint": str(args.checkpoint), "cache": str(args.cache), "t_eval": args.t_eval, "out": args.out}
    _echo(resolved)
    if args.t_eval < 1:
        raise ConfigError("--t-eval must be >= 1")
    params = _load_params(args.checkpoint)
    ds = _read_cache(args.cache)
    report = evaluate(params, ds, args.t_eval)
    records = report.to_records()
    for r in records:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        write_jsonl(records, _check_file(args.out, args.force))
    return EXIT_OK


def _load_params(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_compare(args) -> int:
    cfg = _resolve_train(args)
    _set(cfg, "compare.seeds", args.seeds)
    _echo(cfg)
    train_set = _read_cache(cfg["data"]["train_cache"])
    test_set = _read_cache(cfg["data"]["test_cache"])
    spec = model_spec(cfg, len(train_set.manifest.class_names))
    if spec.mode != "snn":
        raise ConfigError("compare needs model.mode = snn")
    out = _prepare_dir(cfg["output_dir"], args.force)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    tables = []
    for i in range(cfg["compare"]["seeds"]):
        seed_cfg = copy.deepcopy(cfg)
        seed_cfg["seed"] = cfg["seed"] + i
        table = compare_paradigms(spec, train_set, test_set, train_config(seed_cfg), cfg["compare"]["t_eval"])
        write_jsonl(table.to_records(), out / f"compare_seed{seed_cfg['seed']}.jsonl")
        tables.append(table)
    final = tables[0] if len(tables) == 1 else median_table(tables)
    records = final.to_records()
    write_jsonl(records, out / "compare.jsonl")
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_profile(args) -> int:
    resolved = {"checkpoint": str(args.checkpoint), "cache": str(args.cache), "t_eval": args.t_eval, "samples": args.samples, "out": args.out}
    _echo(resolved)
    if args.t_eval < 1:
        raise ConfigError("--t-eval must be >= 1")
    params = _load_params(args.checkpoint)
    ds = _read_cache(args.cache)
    n = ds.manifest.points_per_cloud
    constants = E.EnergyConstants()
    ann_counts = E.count_ann_ops(params.spec, n)
    ann = E.estimate_energy(ann_counts, constants)
    records = [{"model": "ann", **r} for r in ann_counts.to_records()]
    summary = {"record": "summary", "ann_energy_pj": float(ann.per_sample), "technology": constants.technology}
    if params.spec.mode == "snn":
        pts = ds.points[: args.samples]
        run = run_snn(pts, params, args.t_eval)
        counts = E.count_snn_ops(params.spec, run.trace)
        snn = E.estimate_energy(counts, constants)
        records += [{"model": "snn", **r} for r in counts.to_records()]
        summary.update(
            snn_energy_pj=float(snn.per_sample),
            ratio_ann_over_snn=E.energy_ratio(ann, snn),
            firing_rate=counts.firing_rate,
            time_steps=args.t_eval,
            samples=int(len(pts)),
        )
    records.append(summary)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        write_jsonl(records, _check_file(args.out, args.force))
    return EXIT_OK


def cmd_gradhist(args) -> int:
    cfg = load_config(args.config)
    _set(cfg, "seed", args.seed)
    _set(cfg, "data.train_cache", args.train_cache)
    _set(cfg, "output_dir", args.out)
    if args.k:
        cfg["gradhist"]["k"] = _floats(args.k)
    if args.t:
        cfg["gradhist"]["t"] = _ints(args.t)
    _echo(cfg)
    ds = _read_cache(cfg["data"]["train_cache"])
    spec = model_spec(cfg, len(ds.manifest.class_names))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0x48495354]))
    idx = np.sort(rng.choice(len(ds), size=min(cfg["gradhist"]["batch"], len(ds)), replace=False))
    out = _prepare_dir(cfg["output_dir"], args.force)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    hists = E.gradient_histogram(spec, ds.points[idx], ds.labels[idx], cfg["gradhist"]["k"], cfg["gradhist"]["t"], cfg["seed"])
    for h in hists:
        path = out / f"hist_k{h.k:g}_T{h.time_steps}.jsonl"
        write_jsonl([{"record": "summary", "layer": h.layer, "k": h.k, "time_steps": h.time_steps, **h.summary}] + h.to_records(), path)
        print(json.dumps({"file": path.name, "k": h.k, "time_steps": h.time_steps, **h.summary}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spiking-pointnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="sample ModelNet-style OFF files into binary caches")
    p.add_argument("data_root")
    p.add_argument("out")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="abort on the first unparsable file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic shape dataset")
    p.add_argument("out")
    p.add_argument("--classes", default=",".join(D.SHAPES))
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--config")
        p.add_argument("--mode", choices=["ann", "snn"])
        p.add_argument("--t-train", type=int)
        p.add_argument("--mpp", choices=["on", "off"])
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--train-cache")
        p.add_argument("--test-cache")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-step and ensemble accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--t-eval", type=int, default=4)
    p.add_argument("--out", help="write the report here as JSON lines")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="vanilla T=4 vs single-step vs single-step + perturbation")
    training_flags(p)
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("profile", help="operation counts and energy estimate")
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--t-eval", type=int, default=1)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradhist", help="first-layer gradient histograms over k and T")
    p.add_argument("--config")
    p.add_argument("--k", help="comma-separated surrogate slopes")
    p.add_argument("--t", help="comma-separated time steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-cache")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gradhist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, NeuronConfigError, TypeError, ValueError) as exc:
        if isinstance(exc, (D.CacheError, D.ParseError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
