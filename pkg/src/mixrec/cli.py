"""``mixrec`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .ablation import run_ablation
from .bench import growth_ratios, sweep, write_csv
from .config import FORMAT_VERSION, RunConfig, load_run_config, resolve_data_path
from .data import FEATURE_KINDS, FeatureSchema, SequenceDataset, describe, prepare
from .errors import ConfigError, DataError, NumericalError
from .evaluation import dump_ranks, evaluate, mean_report, seed_table
from .model import (
    VARIANTS,
    count_params,
    layout_of,
    load_checkpoint,
    make_variant,
    parameter_shapes,
    space_complexity_note,
)
from .synthetic import synth_generate
from .training import fit

log = logging.getLogger("mixrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="single seed (replaces [run] seeds)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--workers", type=int, help="evaluation worker processes")
    p.add_argument("--deterministic", action="store_true", help="force a single worker")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config field")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="mixrec", description="MLP mixing sequential recommender", parents=[common])
    parser.add_argument("--version", action="version", version=f"mixrec {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("prepare", parents=[common], help="ingest TSVs into a prepared dataset")
    p.add_argument("--interactions")
    p.add_argument("--features")
    p.add_argument("--schema", help="name:kind,... with kind in " + "/".join(FEATURE_KINDS[1:]))
    p.add_argument("--out")
    p.add_argument("--max-len", type=int)
    p.add_argument("--k-core", type=int)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic Markov dataset")
    p.add_argument("--out")
    p.add_argument("--n-items", type=int)
    p.add_argument("--n-users", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", parents=[common], help="train one model per seed")
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or train output directory")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("validation", "test"))
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--dump-ranks", help="directory for per-user rank dumps")

    p = sub.add_parser("ablate", parents=[common], help="train and compare variants")
    p.add_argument("--dataset")
    p.add_argument("--variants", help="comma-separated variant tags")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("count-params", parents=[common], help="itemized parameter count")
    p.add_argument("--dataset")

    p = sub.add_parser("bench", parents=[common], help="forward timing sweep")
    p.add_argument("--axis", choices=("s", "C", "K"))
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", help="CSV path")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), name.strip(), value)
    if hasattr(args, "seeds"):
        cfg.set("run", "seeds", args.seeds)
    if hasattr(args, "seed"):
        cfg.set("run", "seeds", (args.seed,))
        cfg.set("synth", "seed", args.seed)
    if hasattr(args, "workers"):
        cfg.set("run", "workers", args.workers)
    if getattr(args, "deterministic", False):
        cfg.set("run", "deterministic", True)
    if cfg.run.deterministic:
        cfg.set("run", "workers", 1)
    flag_map = {
        "max_len": ("data", "max_len"), "k_core": ("data", "k_core"), "interactions": ("data", "interactions"),
        "features": ("data", "features"), "schema": ("data", "schema"), "n_items": ("synth", "n_items"),
        "n_users": ("synth", "n_users"), "order": ("synth", "order"), "noise": ("synth", "noise"),
        "variant": ("model", "variant"), "epochs": ("train", "epochs"), "split": ("eval", "split"),
        "variants": ("run", "variants"), "axis": ("bench", "axis"), "values": ("bench", "values"),
        "runs": ("bench", "runs"),
    }
    for flag, (section, key) in flag_map.items():
        if hasattr(args, flag) and getattr(args, flag) is not None:
            cfg.set(section, key, getattr(args, flag))
    if hasattr(args, "dataset") and args.dataset is not None:
        cfg.set("data", "dataset", args.dataset)
    cfg.validate()
    return cfg


def _load_dataset(cfg: RunConfig) -> SequenceDataset:
    path = resolve_data_path(cfg.data.dataset)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return SequenceDataset.load(path)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig, args) -> int:
    if not cfg.data.schema and cfg.data.features:
        raise ConfigError("a features file needs --schema")
    schema = FeatureSchema.parse(cfg.data.schema) if cfg.data.schema else FeatureSchema.from_pairs([])
    inter = resolve_data_path(cfg.data.interactions)
    feats = resolve_data_path(cfg.data.features) if cfg.data.features else None
    ds = prepare(inter, feats, schema, max_len=cfg.data.max_len, k=cfg.data.k_core)
    out = getattr(args, "out", None) or cfg.data.dataset
    ds.save(out, {"run_config": cfg.to_json(), "format_version": FORMAT_VERSION})
    print(describe(ds.stats))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    synth = replace(cfg.synth, seq_len=cfg.data.max_len)
    ds = synth_generate(synth)
    out = getattr(args, "out", None) or cfg.data.dataset
    ds.save(out, {"run_config": cfg.to_json(), "format_version": FORMAT_VERSION})
    print(describe(ds.stats))
    print(f"requested {synth.n_users} users x {synth.n_items} items (order {synth.order}, noise {synth.noise})")
    print(f"wrote {out}")
    return EXIT_OK


def _model_config(cfg: RunConfig, ds: SequenceDataset):
    return replace(cfg.model, max_len=ds.max_len)


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    out = Path(getattr(args, "out", None) or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())
    mc = _model_config(cfg, ds)
    for seed in cfg.run.seeds:
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(exist_ok=True)
        model = make_variant(mc, ds.features, seed=seed)
        meta = {"run_config": cfg.to_json(), "seed": seed, "variant": mc.variant, "format_version": FORMAT_VERSION}
        result = fit(model, ds, replace(cfg.train, seed=seed), log_path=run_dir / "log.jsonl",
                     checkpoint_path=run_dir / "model.mxrd", run_meta=meta)
        print(f"seed {seed}: variant {mc.variant}, {result.epochs_run} epochs, stopped by {result.stopped}, "
              f"best epoch {result.best_epoch} (valid {cfg.train.monitor} {result.best_value:.4f})")
    return EXIT_OK


def _checkpoints(path: Path, seeds) -> list[tuple[int, Path]]:
    if path.is_dir():
        found = sorted(path.glob("seed*/model.mxrd"), key=lambda p: int(p.parent.name[4:]))
        if not found:
            raise FileNotFoundError(f"no seed*/model.mxrd checkpoints under {path}")
        return [(int(p.parent.name[4:]), p) for p in found]
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return [(s, path) for s in seeds]


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    reports = []
    for seed, path in _checkpoints(Path(args.checkpoint), cfg.eval.seeds):
        model, _ = load_checkpoint(path, ds.features)
        report = evaluate(model, ds, cfg.protocol(seed), batch_size=cfg.eval.batch_size, workers=cfg.run.workers)
        reports.append(report)
        if getattr(args, "dump_ranks", None):
            Path(args.dump_ranks).mkdir(parents=True, exist_ok=True)
            dump_ranks(Path(args.dump_ranks) / f"ranks_seed{seed}.json", report)
    print(seed_table(reports, cfg.eval.k))
    if getattr(args, "out", None):
        _write_json(args.out, {"run_config": cfg.to_json(), "format_version": FORMAT_VERSION,
                               "seeds": [r.to_json() for r in reports], "mean": mean_report(reports)})
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)

    def progress(variant, seed, fr, report):
        log.info("%s seed %d: %d epochs, HR@10 %.4f", variant, seed, fr.epochs_run, report.metrics["HR@10"])

    result = run_ablation(ds, _model_config(cfg, ds), cfg.train, cfg.run.variants, cfg.run.seeds,
                          cfg.protocol(0), workers=cfg.run.workers, progress=progress)
    print(result.table(cfg.eval.k))
    if getattr(args, "out", None):
        _write_json(args.out, {"run_config": cfg.to_json(), "format_version": FORMAT_VERSION,
                               "variants": result.to_json()})
    return EXIT_OK


def _count_layout(cfg: RunConfig, args):
    if getattr(args, "dataset", None):
        ds = _load_dataset(cfg)
        return layout_of(ds.features), ds.max_len
    if cfg.count.n_items < 1:
        raise ConfigError("count-params needs --dataset or [count] n_items")
    layout = [("item_id", "id", cfg.count.n_items)]
    for entry in filter(None, (e.strip() for e in cfg.count.features.split(","))):
        parts = entry.split(":")
        if len(parts) != 3 or parts[1] not in FEATURE_KINDS[1:]:
            raise ConfigError(f"[count] features entry {entry!r} must be name:kind:vocab")
        try:
            vocab = int(parts[2])
        except ValueError:
            raise ConfigError(f"[count] features entry {entry!r}: vocab must be an integer") from None
        layout.append((parts[0], parts[1], vocab))
    return layout, cfg.data.max_len


def cmd_count_params(cfg: RunConfig, args) -> int:
    layout, s = _count_layout(cfg, args)
    mc = replace(cfg.model, max_len=s)
    report = count_params(mc, layout)
    enumerated = sum(int(_prod(shape)) for shape in parameter_shapes(mc, layout).values())
    print(f"variant {mc.variant}: s={mc.max_len} C={mc.embed_dim} K={len(layout)} L={mc.n_layers}")
    if "hidden" in report:
        h = report["hidden"]
        print(f"hidden sizes: r_s={h['seq']} r_C={h['channel']} r_K={h['feature']}")
    print(f"{'mixers':24s}{report['mixers']:>14,d}")
    print(f"{'layernorm':24s}{report['layernorm']:>14,d}")
    for name, n in report["tables"].items():
        print(f"{'embedding ' + name:24s}{n:>14,d}")
    print(f"{'total':24s}{report['total']:>14,d}")
    print(f"{'tensor enumeration':24s}{enumerated:>14,d}")
    print(space_complexity_note(mc, len(layout)))
    return EXIT_OK if enumerated == report["total"] else EXIT_NUMERIC


def _prod(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def cmd_bench(cfg: RunConfig, args) -> int:
    rows = sweep(cfg.bench, seed=cfg.run.seeds[0])
    out = getattr(args, "out", None)
    if out:
        write_csv(out, rows)
        _write_json(str(out) + ".json", {"run_config": cfg.to_json(), "format_version": FORMAT_VERSION})
    print("axis,value,median_ns,p10,p90")
    for r in rows:
        print(f"{r['axis']},{r['value']},{r['median_ns']},{r['p10']},{r['p90']}")
    ratios = growth_ratios(rows)
    print("growth per step: " + ", ".join(f"{x:.2f}" for x in ratios))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "count-params": cmd_count_params,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
