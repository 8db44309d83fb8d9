"""Command-line entry point: ``jetforge <subcommand> [flags]``.

Every subcommand writes its outputs under ``--out`` together with the
fully resolved ``config.json``. Set ``JETFORGE_LOG`` (e.g. ``INFO``) for
progress logs on stderr.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from . import cost, data, hpo, pruning, quantization, training
from .errors import JetForgeError
from .model import ModelConfig, build
from .training import TrainConfig

log = logging.getLogger("jetforge")

TINY = {"num_blocks": 4, "embed_dim": 8, "num_heads": 2}


@dataclass
class DataSection:
    num_jets: int = 5000
    num_particles: int = 8
    num_features: int = 3
    num_classes: int = 5
    noise: float = 0.6
    val_fraction: float = 0.1
    test_fraction: float = 0.0


@dataclass
class CompressionSection:
    ratio: float = 0.5
    steps: int = 5
    ft_epochs: int = 5
    ft_lr: float = 3e-3
    score_batches: int = pruning.SCORE_BATCHES
    qat_epochs: int = quantization.QAT_CONFIG.epochs
    qat_lr: float = quantization.QAT_CONFIG.lr


@dataclass
class HpoSection:
    sampler: str = "nsga2"
    trials: int = 80
    population_size: int = 20
    objective: str = "train"
    epochs: int = 25
    early_stop_patience: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: dict(TINY))
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    compression: CompressionSection = field(default_factory=CompressionSection)
    hpo: HpoSection = field(default_factory=HpoSection)

    def to_dict(self):
        return asdict(self)


SECTIONS = {
    "training": TrainConfig,
    "data": DataSection,
    "compression": CompressionSection,
    "hpo": HpoSection,
}


def _strict(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise JetForgeError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**values)


def load_run_config(path=None):
    """Read a JSON RunConfig; unknown keys at any level are rejected."""
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise JetForgeError(f"{path}: config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise JetForgeError(f"unknown keys in config: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "model" in raw:
        ModelConfig.from_dict(raw["model"])  # validates keys
        cfg.model = dict(raw["model"])
    for name, cls in SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _strict(cls, raw[name], name))
    return cfg


def _override(section, **values):
    return replace(section, **{k: v for k, v in values.items() if v is not None})


def model_config(cfg, manifest=None):
    m = dict(cfg.model)
    m.setdefault("num_particles", cfg.data.num_particles)
    m.setdefault("num_features", manifest.num_features if manifest else cfg.data.num_features)
    m.setdefault("num_classes", manifest.num_classes if manifest else cfg.data.num_classes)
    return ModelConfig.from_dict(m)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(args, cfg):
    _write_json(Path(args.out) / "config.json", cfg.to_dict())


def load_split(data_dir, cfg, num_particles, stats=None):
    """Train/validation batches of ``train.csv``, normalized with train statistics."""
    records, manifest = data.load_dir(data_dir, "train")
    batch = data.JetBatch.from_records(records, num_particles, manifest.num_features)
    tr, va = batch.split(cfg.data.val_fraction, cfg.seed)
    stats = stats or data.fit_norm_stats(tr)
    return data.normalize(tr, stats), data.normalize(va, stats), stats, manifest


def _data_meta(cfg, stats, num_particles):
    return {
        "norm": stats.to_dict(),
        "seed": cfg.seed,
        "val_fraction": cfg.data.val_fraction,
        "num_particles": num_particles,
    }


def _cfg_from_meta(meta):
    cfg = RunConfig(seed=meta["seed"])
    cfg.data = replace(cfg.data, val_fraction=meta["val_fraction"], num_particles=meta["num_particles"])
    return cfg


# ---------------------------------------------------------------------------
# Subcommands


def cmd_datagen(args, cfg):
    cfg.data = _override(
        cfg.data,
        num_jets=args.num_jets,
        num_particles=args.particles,
        num_features=args.features,
        num_classes=args.classes,
        noise=args.noise,
        test_fraction=args.test_fraction,
    )
    d = cfg.data
    out = _out_dir(args)
    names = list(data.DEFAULT_CLASS_NAMES) if d.num_classes == 5 else None
    manifest = data.Manifest(d.num_features, d.num_classes, names)
    records = data.synth_gen(cfg.seed, d.num_jets, d.num_particles, d.num_features, d.num_classes, d.noise)
    n_test = int(round(d.test_fraction * len(records)))
    manifest.save(out / "manifest.json")
    data.write_csv(out / "train.csv", records[n_test:], manifest)
    if n_test:
        data.write_csv(out / "test.csv", records[:n_test], manifest)
    print(f"wrote {len(records) - n_test} training jets ({n_test} test) to {out}")
    return cfg


def cmd_train(args, cfg):
    cfg.training = _override(
        cfg.training,
        scheduler=args.scheduler,
        epochs=args.epochs,
        batch_size=args.batch_size,
        early_stop_patience=args.early_stop_patience,
        seed=cfg.seed,
    )
    out = _out_dir(args)
    mcfg = model_config(cfg, data.Manifest.load(Path(args.data) / "manifest.json"))
    tr, va, stats, _ = load_split(args.data, cfg, mcfg.num_particles)
    best, history = training.train(build(mcfg, cfg.seed), tr, va, cfg.training)
    report = training.evaluate(best, va)
    training.write_history(out / "history.jsonl", history)
    _write_json(out / "eval.json", report.to_dict())
    stats.save(out / "norm.json")
    ckpt.save_checkpoint(out / "model.ckpt", best, "f64", _data_meta(cfg, stats, mcfg.num_particles))
    print(f"trained {len(history)} epochs; validation accuracy {report.accuracy:.4f}")
    return cfg


def cmd_eval(args, cfg):
    out = _out_dir(args)
    header, _ = ckpt.read_container(Path(args.checkpoint).read_bytes())
    state = ckpt.load_checkpoint(args.checkpoint)
    meta = header["meta"]
    stats = data.NormStats.from_dict(meta["norm"])
    run = _cfg_from_meta(meta)
    if args.split == "val":
        _, batch, _, _ = load_split(args.data, run, meta["num_particles"], stats)
    else:
        records, manifest = data.load_dir(args.data, args.split)
        batch = data.JetBatch.from_records(records, meta["num_particles"], manifest.num_features)
        batch = data.normalize(batch, stats)
    report = training.evaluate(state, batch)
    _write_json(out / "eval.json", report.to_dict())
    print(f"{args.split} accuracy {report.accuracy:.4f} loss {report.loss:.4f} on {len(batch)} jets")
    return run


def cmd_flops(args, cfg):
    out = _out_dir(args)
    conv = cost.COMPACT if args.convention == "compact" else cost.DEFAULT
    report = cost.cost_report(model_config(cfg), convention=conv)
    _write_json(out / "flops.json", report.to_dict())
    print(report.table())
    return cfg


def cmd_prune(args, cfg):
    cfg.compression = _override(cfg.compression, ratio=args.ratio, steps=args.steps, ft_epochs=args.ft_epochs)
    out = _out_dir(args)
    header, _ = ckpt.read_container(Path(args.checkpoint).read_bytes())
    meta = header["meta"]
    state = ckpt.load_checkpoint(args.checkpoint)
    stats = data.NormStats.from_dict(meta["norm"])
    tr, va, _, _ = load_split(args.data, _cfg_from_meta(meta), meta["num_particles"], stats)
    c = cfg.compression
    pcfg = pruning.PruneConfig(c.ratio, c.steps, c.ft_epochs, c.ft_lr, cfg.training.batch_size, c.score_batches, cfg.seed)
    pruned, report = pruning.prune_pipeline(state, tr, va, pcfg)
    ckpt.save_checkpoint(out / "pruned.ckpt", pruned, "f64", meta)
    _write_json(out / "prune_report.json", report.to_dict())
    print(report.table())
    return cfg


def cmd_quantize(args, cfg):
    cfg.compression = _override(cfg.compression, qat_epochs=args.epochs)
    out = _out_dir(args)
    mcfg = model_config(cfg, data.Manifest.load(Path(args.data) / "manifest.json"))
    tr, va, stats, _ = load_split(args.data, cfg, mcfg.num_particles)
    tcfg = replace(
        quantization.QAT_CONFIG,
        epochs=cfg.compression.qat_epochs,
        early_stop_patience=cfg.compression.qat_epochs,
        lr=cfg.compression.qat_lr,
        batch_size=cfg.training.batch_size,
        seed=cfg.seed,
    )
    best, history = quantization.quantize_model(mcfg, tr, va, cfg.seed, tcfg)
    report = training.evaluate(best, va)
    meta = _data_meta(cfg, stats, mcfg.num_particles)
    packed = ckpt.save_checkpoint(out / "quantized.ckpt", best, "packed", meta)
    full = quantization.size_report(mcfg, cfg.seed)["full_bytes"]
    sizes = {"full_bytes": full, "packed_bytes": packed, "reduction_pct": 100.0 * (1 - packed / full)}
    training.write_history(out / "history.jsonl", history)
    _write_json(out / "eval.json", report.to_dict())
    _write_json(out / "size.json", sizes)
    print(
        f"validation accuracy {report.accuracy:.4f}; {packed} bytes packed vs {full} "
        f"full precision ({sizes['reduction_pct']:.2f}% smaller)"
    )
    return cfg


def _objective(cfg, args):
    if cfg.hpo.objective in ("synthetic-linear", "synthetic-rich"):
        return hpo.synthetic_objective(cfg.hpo.objective.split("-")[1])
    if cfg.hpo.objective != "train":
        raise JetForgeError(f"unknown hpo objective {cfg.hpo.objective!r}")
    if not args.data:
        raise JetForgeError("hpo with the train objective needs --data")
    tr, va, _, _ = load_split(args.data, cfg, cfg.data.num_particles)
    tcfg = replace(
        cfg.training,
        epochs=cfg.hpo.epochs,
        early_stop_patience=cfg.hpo.early_stop_patience,
        scheduler="onecycle",
    )
    return hpo.jetformer_objective(tr, va, tcfg, cfg.seed)


def cmd_hpo(args, cfg):
    if args.action == "report":
        return cmd_report(args, cfg)
    cfg.hpo = _override(cfg.hpo, sampler=args.sampler, trials=args.trials, objective=args.objective)
    out = _out_dir(args)
    store = hpo.TrialStore(args.store or out / "study.jsonl")
    kwargs = {"population_size": cfg.hpo.population_size} if cfg.hpo.sampler == "nsga2" else {}
    sampler = hpo.make_sampler(cfg.hpo.sampler, hpo.SearchSpace(), cfg.seed, **kwargs)
    result = hpo.run_study(sampler, cfg.hpo.trials, _objective(cfg, args), store, args.workers)
    _write_json(out / "front.json", [asdict(t) | {"wall_time": None} for t in result.front])
    print(hpo.pareto_table(result.front))
    return cfg


def cmd_report(args, cfg):
    if not args.store:
        raise JetForgeError("report needs --store")
    trials = hpo.TrialStore(args.store).load()
    if not trials:
        raise JetForgeError(f"no trials in {args.store}")
    paths = hpo.write_report(trials, _out_dir(args))
    print(hpo.pareto_table(hpo.pareto_front(trials)))
    print("wrote " + ", ".join(str(p) for p in paths))
    return cfg


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "hpo": cmd_hpo,
    "prune": cmd_prune,
    "quantize": cmd_quantize,
    "flops": cmd_flops,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--config", default=None, help="JSON RunConfig file")

    parser = argparse.ArgumentParser(prog="jetforge", description="JetFormer training and compression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="write a synthetic jet dataset")
    p.add_argument("--num-jets", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train a JetFormer")
    p.add_argument("--data", required=True)
    p.add_argument("--scheduler", choices=training.SCHEDULERS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--early-stop-patience", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "train", "test"), default="val")

    p = sub.add_parser("hpo", parents=[common], help="run a study, or `hpo report`")
    p.add_argument("action", nargs="?", choices=("run", "report"), default="run")
    p.add_argument("--sampler", choices=sorted(hpo.SAMPLERS))
    p.add_argument("--trials", type=int)
    p.add_argument("--store")
    p.add_argument("--data")
    p.add_argument("--objective", choices=("train", "synthetic-linear", "synthetic-rich"))

    p = sub.add_parser("prune", parents=[common], help="structured pruning with fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--ft-epochs", type=int)

    p = sub.add_parser("quantize", parents=[common], help="1-bit quantization-aware training")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("flops", parents=[common], help="parameter and FLOP report")
    p.add_argument("--convention", choices=("default", "compact"), default="default")

    p = sub.add_parser("report", parents=[common], help="plots and tables from a study store")
    p.add_argument("--store", required=True)
    return parser


def main(argv=None):
    level = os.environ.get("JETFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg = COMMANDS[args.command](args, cfg)
        _finish(args, cfg)
    except (JetForgeError, FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"jetforge {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
