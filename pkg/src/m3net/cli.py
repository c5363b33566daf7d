"""Command-line entry point: ``m3net {train,evaluate,ablate,export-grouping,verify,convert-raw}``.

Exit codes: 0 ok, 1 verification failure, 2 input error, 3 corrupt artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import plotting, verify
from .data import (CARDS, DataError, DatasetCard, NormStats, SplitSpec, convert_npz, load_raw,
                   make_windows)
from .layers import VARIANTS, ConfigError
from .model import (CheckpointError, M3Net, ModelConfig, model_from_checkpoint, parse_kv,
                    save_checkpoint, coerce_value)
from .trainer import EpochRecord, TrainConfig, evaluate, train

log = logging.getLogger("m3net")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_CORRUPT = 0, 1, 2, 3

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"N"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SPLIT_KEYS = {f.name for f in fields(SplitSpec)}


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    card: str = ""
    out: str = "runs/m3net"
    device_threads: int = 0
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    @classmethod
    def from_mapping(cls, kv: dict) -> "RunConfig":
        unknown = set(kv) - MODEL_KEYS - TRAIN_KEYS - SPLIT_KEYS - {"dataset", "card", "out",
                                                                   "device_threads"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        tkw = {f.name: coerce_value(f.type, kv[f.name]) for f in fields(TrainConfig) if f.name in kv}
        skw = {f.name: coerce_value(f.type, kv[f.name]) for f in fields(SplitSpec) if f.name in kv}
        model = {k: v for k, v in kv.items() if k in MODEL_KEYS}
        if "seed" in kv:
            model["seed"] = kv["seed"]
        return cls(dataset=kv.get("dataset", ""), card=kv.get("card", ""),
                   out=kv.get("out", "runs/m3net"),
                   device_threads=int(kv.get("device_threads", 0)),
                   model=model, train=TrainConfig(**tkw), split=SplitSpec(**skw))

    def model_config(self, N: int, **override) -> ModelConfig:
        values = dict(self.model, N=N, **override)
        return ModelConfig.from_mapping(values)

    def to_text(self, N: int | None = None) -> str:
        lines = [f"dataset={self.dataset}", f"card={self.card}", f"out={self.out}",
                 f"device_threads={self.device_threads}"]
        if N is not None:
            cfg = self.model_config(N)
            lines += [ln for ln in cfg.to_text().splitlines() if not ln.startswith("N=")]
        else:
            lines += [f"{k}={v}" for k, v in self.model.items()]
        lines += [f"{k}={_fmt(v)}" for k, v in asdict(self.train).items() if k != "seed"]
        lines += [f"{k}={v}" for k, v in asdict(self.split).items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def resolve_card(spec: str, dataset: Path) -> DatasetCard | None:
    if spec:
        if spec.upper() in CARDS:
            return CARDS[spec.upper()]
        path = Path(spec)
        if not path.exists():
            raise InputError(f"dataset card not found: {spec}")
        return DatasetCard.read(path)
    sibling = dataset.with_suffix(".card")
    if sibling.exists():
        return DatasetCard.read(sibling)
    return CARDS.get(dataset.stem.upper())


def build_run_config(args) -> RunConfig:
    kv = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        kv.update(parse_kv(path.read_text()))
    for key in ("dataset", "card", "out", "seed", "variant"):
        val = getattr(args, key, None)
        if val is not None:
            kv[key] = str(val)
    if getattr(args, "epochs", None) is not None:
        kv["max_epochs"] = str(args.epochs)
    if getattr(args, "device_threads", None) is not None:
        kv["device_threads"] = str(args.device_threads)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--set expects key=value, got {item!r}")
        kv[key.strip()] = value.strip()
    run = RunConfig.from_mapping(kv)
    if not run.dataset:
        raise InputError("no dataset given (use --dataset or dataset= in the config)")
    return run


def thread_limit(n: int):
    if n and n > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    return nullcontext()


def load_splits(run: RunConfig, L: int, F: int, C: int = 1, stats=None):
    """Load the container and window it; only the first ``C`` channels are used."""
    path = Path(run.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    series = load_raw(path, resolve_card(run.card, path))
    if series.channels < C:
        raise DataError(f"model expects {C} channels, {path} has {series.channels}")
    series = replace(series, data=series.data[..., :C])
    return series, make_windows(series, L, F, stats, run.split)


def _meta(series, splits, run: RunConfig) -> dict:
    return {"dataset": series.name,
            "norm_mean": ",".join(repr(float(v)) for v in splits.stats.mean),
            "norm_std": ",".join(repr(float(v)) for v in splits.stats.std),
            "train_frac": run.split.train_frac, "val_frac": run.split.val_frac,
            "test_frac": run.split.test_frac,
            "mape_mask_threshold": run.train.mape_mask_threshold}


def run_training(run: RunConfig, out: Path, variant: str | None = None, seed: int | None = None,
                 echo=print):
    """Train one model, write its artifacts under ``out``; return the test report."""
    out.mkdir(parents=True, exist_ok=True)
    override = {}
    if variant:
        override["variant"] = variant
    if seed is not None:
        override["seed"] = seed
    probe = run.model_config(1, **override)
    series, splits = load_splits(run, probe.L, probe.F, probe.C)
    cfg = run.model_config(series.nodes, **override)
    tcfg = run.train if seed is None else TrainConfig(**dict(asdict(run.train), seed=seed))
    resolved = replace(run, model=dict(run.model, **override), train=tcfg)
    (out / "run_config.txt").write_text(resolved.to_text(series.nodes))
    model = M3Net(cfg)
    hist_path = out / "history.jsonl"
    hist_path.write_text("")

    def on_epoch(rec: EpochRecord):
        with hist_path.open("a") as fh:
            fh.write(rec.to_json() + "\n")
        echo(f"epoch {rec.epoch:4d}  lr {rec.lr:.3g}  train_loss {rec.train_loss:.4f}  "
             f"val_mae {rec.val_mae:.4f}  epoch_seconds {rec.epoch_seconds:.2f}  "
             f"peak_bytes {rec.peak_bytes}")

    result = train(model, splits, tcfg, on_epoch=on_epoch)
    save_checkpoint(model.store, cfg, out / "checkpoint.m3ckpt", _meta(series, splits, run))
    report = evaluate(model, splits.test, splits.stats, tcfg.mape_mask_threshold, tcfg.batch_size)
    title = f"{series.name} test split, variant={cfg.variant}, best epoch {result.best_epoch}"
    (out / "report.txt").write_text(report.to_text(title))
    (out / "report.csv").write_text(report.to_csv())
    (out / "costs.csv").write_text("epoch,epoch_seconds,peak_bytes\n" + "".join(
        f"{r.epoch},{r.epoch_seconds:.6f},{r.peak_bytes}\n" for r in result.history))
    plotting.training_curves(result.history, out / "figures" / "training_curves.png")
    plotting.cost_per_epoch(result.history, out / "figures" / "cost_per_epoch.png")
    return report, result


def cmd_train(args) -> int:
    run = build_run_config(args)
    with thread_limit(run.device_threads):
        report, _ = run_training(run, Path(run.out))
    print(report.to_text())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt}")
    model, meta = model_from_checkpoint(ckpt)
    split = SplitSpec(float(meta.get("train_frac", 0.6)), float(meta.get("val_frac", 0.2)),
                      float(meta.get("test_frac", 0.2)))
    run = RunConfig(dataset=args.dataset, card=args.card or "", split=split)
    stats = None
    if "norm_mean" in meta:
        stats = NormStats(np.array([float(v) for v in meta["norm_mean"].split(",")]),
                          np.array([float(v) for v in meta["norm_std"].split(",")]))
    c = model.config
    series, splits = load_splits(run, c.L, c.F, c.C, stats)
    threshold = float(meta.get("mape_mask_threshold", 1.0))
    part = getattr(splits, args.split)
    report = evaluate(model, part, splits.stats, threshold)
    text = report.to_text(f"{series.name} {args.split} split, variant={model.config.variant}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{args.split}.txt").write_text(text)
        (out / f"report_{args.split}.csv").write_text(report.to_csv())
    print(text)
    return EXIT_OK


def ablation_table(rows) -> str:
    head = f"{'Variant':<14}{'MAE':>9}{'RMSE':>9}{'MAPE':>9}"
    body = [f"{v:<14}{mae:>9.2f}{rmse:>9.2f}{mape:>8.2f}%" for v, mae, rmse, mape in rows]
    return "\n".join([head] + body) + "\n"


def cmd_ablate(args) -> int:
    run = build_run_config(args)
    out = Path(run.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    per_variant = {}
    with thread_limit(run.device_threads):
        for variant in VARIANTS:
            for seed in seeds:
                sub = out / variant if seed is None else out / variant / f"seed{seed}"
                print(f"== {variant}" + ("" if seed is None else f" seed {seed}"))
                report, _ = run_training(run, sub, variant=variant, seed=seed)
                per_variant.setdefault(variant, []).append(report.avg)
    rows = [(v, float(np.mean([m.mae for m in ms])), float(np.mean([m.rmse for m in ms])),
             float(np.mean([m.mape for m in ms]))) for v, ms in per_variant.items()]
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.csv").write_text("variant,mae,rmse,mape\n" + "".join(
        f"{v},{a:.6f},{b:.6f},{c:.6f}\n" for v, a, b, c in rows))
    plotting.ablation_bars(rows, out / "figures" / "ablation.png")
    print(table)
    return EXIT_OK


def cmd_export_grouping(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt}")
    model, meta = model_from_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mats = model.grouping_matrices()
    if not mats:
        print(f"variant {model.config.variant} has no grouping matrix", file=sys.stderr)
    name = meta.get("dataset", ckpt.stem)
    for i, G in enumerate(mats):
        np.savetxt(out / f"grouping_layer{i}.csv", G, delimiter=",", fmt="%.9g")
        title = f"{name} layer {i} grouping matrix ({G.shape[0]} nodes x {G.shape[1]} groups)"
        (out / f"grouping_layer{i}.svg").write_text(plotting.heatmap_svg(G, title))
        plotting.grouping_heatmap(G, out / f"grouping_layer{i}.png", title)
        print(f"layer {i}: {G.shape[0]}x{G.shape[1]} -> {out / f'grouping_layer{i}.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    groups = args.group or None
    ok = verify.run(groups, out=sys.stdout)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_convert_raw(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise InputError(f"input not found: {src}")
    card = resolve_card(args.card or "", src) if args.card else None
    series = convert_npz(src, args.output, card, key=args.key, channels=args.channels,
                         start_weekday=args.start_weekday)
    if card is not None:
        load_raw(args.output, card)
    T, N, C = series.data.shape
    print(f"wrote {args.output}: T={T} N={N} C={C}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3net", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--dataset", help="M3RAW1 container")
        p.add_argument("--card", help="built-in card name (PEMS08) or card file")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--out")
        p.add_argument("--epochs", type=int)
        p.add_argument("--device-threads", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")

    p = sub.add_parser("train", help="train one model and report test metrics")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train full, no_moe, no_spatial, no_grouping")
    run_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds; the table reports means")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--card")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-grouping", help="write grouping matrices as CSV, SVG and PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_grouping)

    p = sub.add_parser("verify", help="run the built-in property checks")
    p.add_argument("--group", action="append", choices=list(verify.GROUPS))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("convert-raw", help="convert an .npz dump to an M3RAW1 container")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--card")
    p.add_argument("--key", default="data")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--start-weekday", type=int, default=0)
    p.set_defaults(func=cmd_convert_raw)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, DataError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
