"""Command-line entry point: ``bionic <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence


if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from . import ablation as ab
from .connectome import (ConnectivityMasks, FormatError, generate_synthetic_connectome, load_connectome,
                         load_masks, load_package, mask_report, census_shaped_connectome, save_masks,
                         save_masks_csv, save_package)
from .core import RngStream
from .data import CLASS_NAMES, FerDataset, class_weights, load_dataset, stratified_subset, synthetic_expressions
from .metrics import classification_report, roc_auc_ovr, write_evaluation, write_json
from .model import BioNicConfig, load_checkpoint, read_checkpoint
from .trainer import (ExperimentResult, RunRecord, TrainConfig, evaluate, protocol_digest, run_seed, summarize)

log = logging.getLogger("bionic")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# -- configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    model: BioNicConfig
    train: TrainConfig
    data_path: Optional[Path] = None
    train_subset: Optional[int] = None
    subset_seed: int = 0
    connectome: Dict[str, object] = field(default_factory=dict)
    out_dir: Path = Path("runs")
    source: Optional[Path] = None

    def echo(self) -> dict:
        return {"version": __version__, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": {"path": str(self.data_path) if self.data_path else None, "train_subset": self.train_subset,
                         "subset_seed": self.subset_seed},
                "connectome": {k: str(v) for k, v in self.connectome.items()}, "out_dir": str(self.out_dir)}


def _coerce(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, pairs: Sequence[str]) -> dict:
    """``section.key=value`` pairs on top of the parsed TOML tree; values use TOML syntax."""
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        node = raw
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _coerce(value.strip())
    return raw


def _known(cls, section: dict, where: str) -> dict:
    names = set(cls.__dataclass_fields__)
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    return section


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{p}: {exc}") from exc
        base = p.resolve().parent
    raw = apply_overrides(raw, overrides)
    rel = lambda v: None if v in (None, "") else (Path(v) if Path(v).is_absolute() else base / v)
    try:
        model = BioNicConfig(**_known(BioNicConfig, dict(raw.get("model", {})), "model"))
        train_raw = dict(raw.get("train", {}))
        _known(TrainConfig, train_raw, "train")
        train = TrainConfig.from_dict(train_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    data = raw.get("data", {})
    conn = {k: (rel(v) if k in ("package", "cells", "synapses") else v) for k, v in raw.get("connectome", {}).items()}
    return RunConfig(model=model, train=train, data_path=rel(data.get("path")), train_subset=data.get("train_subset"),
                     subset_seed=int(data.get("subset_seed", 0)), connectome=conn,
                     out_dir=rel(raw.get("run", {}).get("out_dir", "runs")), source=Path(path) if path else None)


def load_data(cfg: RunConfig) -> FerDataset:
    if cfg.data_path is None:
        raise UsageError("no dataset configured: set [data] path")
    if not cfg.data_path.exists():
        raise UsageError(f"dataset not found: {cfg.data_path}")
    data = load_dataset(cfg.data_path)
    if cfg.train_subset:
        data = FerDataset(stratified_subset(data.train, int(cfg.train_subset), RngStream(cfg.subset_seed, "data")),
                          data.test)
    return data


def load_masks_for(cfg: RunConfig) -> ConnectivityMasks:
    c = cfg.connectome
    if c.get("package"):
        if not Path(c["package"]).exists():
            raise UsageError(f"connectome package not found: {c['package']}")
        masks = load_package(c["package"])
    elif c.get("cells") and c.get("synapses"):
        for key in ("cells", "synapses"):
            if not Path(c[key]).exists():
                raise UsageError(f"connectome {key} file not found: {c[key]}")
        masks = load_connectome(c["cells"], c["synapses"],
                                inhibitory_multiplicity=bool(c.get("inhibitory_multiplicity", False))).masks
    else:
        raise UsageError("no connectome configured: set [connectome] package, or cells and synapses")
    if tuple(masks.layer_sizes) != cfg.model.layer_sizes:
        log.info("layer sizes %s taken from the connectome", masks.layer_sizes)
        cfg.model.layer_sizes = tuple(masks.layer_sizes)
    return masks


# -- runs -------------------------------------------------------------------------

def _run_dir(cfg: RunConfig, variant: str, seed: int) -> Path:
    return cfg.out_dir / variant / str(seed)


def completed_record(run_dir: Path, digest: str, mask_digest: str) -> Optional[RunRecord]:
    """The stored record when it matches; raise when the directory holds a different run."""
    path = run_dir / "record.json"
    if not path.exists():
        return None
    rec = RunRecord.from_dict(json.loads(path.read_text()))
    if rec.config_digest != digest or rec.mask_digest != mask_digest:
        raise UsageError(f"{run_dir} holds a run with config {rec.config_digest}/{rec.mask_digest}, "
                         f"this invocation is {digest}/{mask_digest}; use another out_dir or --force")
    return rec


def _execute(variant: str, cfg: RunConfig, masks, data, seed: int, resume: bool, force: bool) -> RunRecord:
    mcfg, tcfg = ab.VARIANTS[variant].configs(cfg.model, cfg.train)
    run_dir = _run_dir(cfg, variant, seed)
    digest = protocol_digest(mcfg, tcfg)
    if not force:
        rec = completed_record(run_dir, digest, masks.digest())
        if rec is not None:
            if resume:
                log.info("skip %s seed %d (complete, digest %s)", variant, seed, digest)
                return rec
            raise UsageError(f"{run_dir} already holds this run; pass --resume to reuse it or --force to redo it")
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    echo.update({"variant": variant, "seed": seed, "config_digest": digest, "mask_digest": masks.digest(),
                 "model": mcfg.to_dict(), "train": tcfg.to_dict()})
    (run_dir / "config.echo").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return run_seed(variant, mcfg, tcfg, masks, data, seed, run_dir, log.info)


_WORKER: dict = {}


def _worker_init(cfg: RunConfig) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    _WORKER["cfg"] = cfg
    _WORKER["masks"] = load_masks_for(cfg)
    _WORKER["data"] = load_data(cfg)


def _worker_run(variant: str, seed: int, resume: bool, force: bool) -> RunRecord:
    w = _WORKER
    return _execute(variant, w["cfg"], w["masks"], w["data"], seed, resume, force)


def run_grid(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int], jobs: int = 1,
             resume: bool = False, force: bool = False) -> List[ExperimentResult]:
    tasks = [(v, s) for v in variants for s in seeds]
    if jobs <= 1:
        masks, data = load_masks_for(cfg), load_data(cfg)
        records = [_execute(v, cfg, masks, data, s, resume, force) for v, s in tasks]
    else:
        load_masks_for(cfg)  # validate and settle layer sizes before forking
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(cfg,)) as pool:
            records = list(pool.map(_worker_run, *zip(*tasks), [resume] * len(tasks), [force] * len(tasks)))
    by_variant: Dict[str, List[RunRecord]] = {}
    for rec in records:
        by_variant.setdefault(rec.variant, []).append(rec)
    return [ExperimentResult(v, recs, summarize(recs), recs[0].parameters["total"]) for v, recs in by_variant.items()]


def _print_table(rows) -> None:
    widths = [max(len(str(r[i])) for r in [ab.TABLE_HEADER, *rows]) for i in range(len(ab.TABLE_HEADER))]
    for r in [ab.TABLE_HEADER, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


# -- commands ---------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        data = synthetic_expressions(args.synthetic[0], args.synthetic[1], seed=args.seed)
    else:
        if not args.csv:
            raise UsageError("prepare-data needs --csv PATH or --synthetic N_TRAIN N_TEST")
        if not Path(args.csv).exists():
            raise UsageError(f"dataset not found: {args.csv}")
        data = load_dataset(args.csv)
    if args.subset:
        data = FerDataset(stratified_subset(data.train, args.subset, RngStream(args.seed, "data")), data.test)
    data.save_npz(out)
    print(f"wrote {out}: {len(data.train)} train / {len(data.test)} test images")
    return 0


def _parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers, got {text!r}") from exc
    if len(sizes) != 4 or min(sizes) < 1:
        raise UsageError(f"--sizes needs four positive layer sizes, got {text!r}")
    return sizes


def cmd_gen_connectome(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(args.seed, "connectome")
    if args.census_shaped:
        truth = census_shaped_connectome(rng, out, density=args.density)
    else:
        truth = generate_synthetic_connectome(_parse_sizes(args.sizes), args.density, args.inhib, rng, out)
    pkg = load_connectome(out / "cells.csv", out / "synapses.csv")
    if pkg.masks.digest() != truth.digest():
        print("error: reloaded connectome differs from the generated ground truth", file=sys.stderr)
        return 1
    save_masks(pkg.masks, out / "masks.bnic")
    save_package(pkg.masks, out / "connectome.npz")
    if args.csv_masks:
        save_masks_csv(pkg.masks, out / "masks_csv")
    write_json(mask_report(pkg.masks), out / "mask_report.json")
    print(f"wrote {out}: layer sizes {list(pkg.masks.layer_sizes)}, mask digest {pkg.masks.digest()}")
    return 0


def _resolve_variant(args) -> str:
    if args.ablate:
        name = ab.COMPONENTS.get(args.ablate) or (args.ablate if args.ablate in ab.VARIANTS else None)
        if name is None:
            raise UsageError(f"unknown component {args.ablate!r}; choose from {', '.join(sorted(ab.COMPONENTS))}")
        return name
    if args.variant not in ab.VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(ab.VARIANTS)}")
    return args.variant


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if args.out:
        cfg.out_dir = Path(args.out)
    variant = _resolve_variant(args)
    seeds = args.seed if args.seed else list(cfg.train.seeds)
    results = run_grid(cfg, [variant], seeds, resume=args.resume, force=args.force)
    res = results[0]
    for rec in res.records:
        print(f"{variant} seed {rec.seed}: test acc {rec.best['accuracy']:.4f} (best epoch {rec.best_epoch}, "
              f"stopped {rec.stop_epoch}) config {rec.config_digest} -> {_run_dir(cfg, variant, rec.seed)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if args.out:
        cfg.out_dir = Path(args.out)
    variants = args.variants.split(",") if args.variants else [v.name for v in ab.GRID]
    unknown = [v for v in variants if v not in ab.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(unknown)}")
    seeds = args.seed if args.seed else list(cfg.train.seeds)
    results = run_grid(cfg, variants, seeds, jobs=args.jobs, resume=args.resume, force=args.force)
    table = cfg.out_dir / "ablation_table.csv"
    rows = ab.write_table(results, table)
    write_json({r.variant: {"summary": r.summary, "parameters": r.parameters,
                            "seeds": [rec.seed for rec in r.records]} for r in results},
               cfg.out_dir / "ablation_summary.json")
    _print_table(rows)
    print(f"wrote {table}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"run directory not found: {root}")
    by_variant: Dict[str, List[RunRecord]] = {}
    for path in sorted(root.glob("*/*/record.json")):
        rec = RunRecord.from_dict(json.loads(path.read_text()))
        by_variant.setdefault(rec.variant, []).append(rec)
    if not by_variant:
        raise UsageError(f"no completed runs under {root}")
    results = [ExperimentResult(v, r, summarize(r, args.which), r[0].parameters["total"]) for v, r in by_variant.items()]
    out = Path(args.out) if args.out else root / "ablation_table.csv"
    rows = ab.write_table(results, out)
    _print_table(rows)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    masks, data = load_masks_for(cfg), load_data(cfg)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, ckpt = load_checkpoint(args.checkpoint, masks)
    train = TrainConfig.from_dict(ckpt["meta"].get("train", {})) if ckpt["meta"].get("train") else cfg.train
    weights = class_weights(data.train.labels, model.config.n_classes) if train.class_weighting else None
    ev = evaluate(model, data.test, train.eval_batch_size, weights, train.smoothing)
    names = CLASS_NAMES[:model.config.n_classes]
    report = classification_report(data.test.labels, ev["predictions"], names)
    report["loss"] = ev["loss"]
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "evaluation"
    write_evaluation(out, report, roc_auc_ovr(data.test.labels, ev["probabilities"], names),
                     {"checkpoint": str(args.checkpoint), "config_digest": ckpt["config_digest"],
                      "mask_digest": ckpt["mask_digest"], "version": __version__})
    print(f"accuracy {report['accuracy']:.4f}  loss {ev['loss']:.4f}  macro F1 {report['macro']['f1']:.4f} -> {out}")
    return 0


def inspect_path(path: Path) -> dict:
    head = path.read_bytes()[:4]
    if head == b"BNCK":
        ckpt = read_checkpoint(path)
        counts: Dict[str, int] = {}
        for name, arr in ckpt["params"].items():
            module = name.rsplit(".", 1)[0]
            counts[module] = counts.get(module, 0) + int(arr.size)
        counts["total"] = sum(counts.values())
        return {"kind": "checkpoint", "config_digest": ckpt["config_digest"], "mask_digest": ckpt["mask_digest"],
                "parameters": counts, "meta": ckpt["meta"], "has_optimizer": ckpt["optimizer"] is not None}
    if head == b"BNIC":
        masks = load_masks(path)
        return {"kind": "masks", "masks": {k: {"shape": list(m.shape), "density": float(m.mean())}
                                           for k, m in masks.items()},
                "layer_sizes": [int(masks[f"intra_{n}"].shape[0]) for n in "ABCD" if f"intra_{n}" in masks]}
    if path.suffix == ".npz":
        try:
            masks = load_package(path)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: not a connectome package ({exc})") from exc
        return {"kind": "connectome", "digest": masks.digest(), **mask_report(masks)}
    raise FormatError(f"{path}: unrecognized magic bytes {head!r} (expected BNCK, BNIC or an npz package)")


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    print(json.dumps(inspect_path(path), indent=2, sort_keys=True, default=str))
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bionic", description="Connectome-constrained emotion classifier toolkit")
    p.add_argument("--version", action="version", version=f"bionic {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="convert FER-2013 csv (or synthetic data) to npz")
    s.add_argument("--csv")
    s.add_argument("--synthetic", type=int, nargs=2, metavar=("N_TRAIN", "N_TEST"))
    s.add_argument("--subset", type=int, help="stratified training subset size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prepare_data)

    s = sub.add_parser("gen-connectome", help="write a synthetic connectome export and its derived masks")
    s.add_argument("--sizes", default="20,30,15,25")
    s.add_argument("--density", type=float, default=0.3)
    s.add_argument("--inhib", type=int, default=10, help="number of inhibitory cells")
    s.add_argument("--census-shaped", action="store_true", help="use the column's cell-type census")
    s.add_argument("--csv-masks", action="store_true", help="also write one csv per mask")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_connectome)

    def run_args(s):
        s.add_argument("--config", help="TOML configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.max_epochs=30")
        s.add_argument("--seed", type=int, action="append", help="seed (repeatable); defaults to train.seeds")
        s.add_argument("--out", help="run directory root (overrides run.out_dir)")
        s.add_argument("--resume", action="store_true", help="reuse completed runs with a matching digest")
        s.add_argument("--force", action="store_true", help="overwrite existing runs")

    s = sub.add_parser("train", help="train one variant")
    run_args(s)
    s.add_argument("--variant", default="full")
    s.add_argument("--ablate", help="component to remove, e.g. synaptic_noise")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("ablate", help="run the ablation grid")
    run_args(s)
    s.add_argument("--variants", help="comma-separated subset of the grid")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on the configured test set")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("inspect", help="summarize a mask container, connectome package or checkpoint")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("report", help="assemble the ablation table from finished runs")
    s.add_argument("--runs", default="runs")
    s.add_argument("--out")
    s.add_argument("--which", choices=("best", "final"), default="best")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, FileNotFoundError) else 1
    except Exception as exc:  # runtime failures surface as exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
