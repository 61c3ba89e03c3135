"""Command-line entry points: ``drstage {ingest,train,evaluate,explain,report}``.

A run is described by one YAML document (``--config``); ``--seed`` and
``--out`` override the document. Relative paths inside the document are
resolved against the document's directory. ``DRSTAGE_CACHE`` selects the
preprocessing cache root unless the document sets ``cache``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import explain, ingest, metrics, model, preprocess, train
from .errors import DRStageError
from .seeding import substream_seed

log = logging.getLogger("drstage")

METHODS = {"grad": "grad_rollout", "rollout": "rollout"}


# -- run configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    out: Optional[str] = None
    mode: str = "SS"
    target_domain: Optional[str] = None
    manifests: list = field(default_factory=list)
    test_manifest: Optional[str] = None
    val_fraction: float = 0.1
    cache: Optional[str] = None
    backbone: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        return cls(**doc, base_dir=path.parent)

    def resolve(self, p) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def backbone_config(self) -> model.BackboneConfig:
        spec = dict(self.backbone)
        preset = spec.pop("preset", "vit_base")
        if preset not in ("vit_base", "toy"):
            raise ValueError(f"unknown backbone preset {preset!r}")
        if spec.get("pretrained_source"):
            spec["pretrained_source"] = str(self.resolve(spec["pretrained_source"]))
        return getattr(model.BackboneConfig, preset)(**spec)

    def head_config(self, embed_dim: int) -> model.HeadConfig:
        return model.HeadConfig(in_dim=embed_dim, **self.head)

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig.from_dict({**self.train, "seed": self.seed})

    def eval_options(self) -> train.EvalOptions:
        opts = dict(self.evaluation)
        if "quantiles" in opts:
            opts["quantiles"] = tuple(opts["quantiles"])
        return train.EvalOptions(**opts)

    def validate(self):
        """Build every sub-config once so invariant violations surface
        before any work starts."""
        ingest.Mode.parse(self.mode)
        bb = self.backbone_config()
        self.head_config(bb.embed_dim)
        self.train_config()
        self.eval_options()
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        return self


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out_dir(cfg: RunConfig, default: Optional[str] = None) -> Path:
    out = cfg.out if cfg.out is not None else default
    if out is None:
        raise ValueError("no output directory: pass --out or set 'out' in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cache_root(cfg: RunConfig):
    return str(cfg.resolve(cfg.cache)) if cfg.cache else None


# -- commands -------------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> int:
    paths = [Path(p) for p in args.manifests] or [cfg.resolve(p) for p in cfg.manifests]
    if not paths:
        raise ValueError("no manifests given")
    manifests = [ingest.load_manifest(p) for p in paths]
    out = Path(cfg.out) if cfg.out is not None else None
    rows = []
    for m in manifests:
        summary = ingest.exclusion_summary(m)
        kept = ingest.apply_exclusions(m)
        print(f"{m.dataset_id}: {len(m)} records, {len(kept)} kept")
        for rule in ingest.EXCLUSION_RULES:
            print(f"  {rule}: {summary[rule]}")
            rows.append((m.dataset_id, rule, summary[rule]))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            ingest.write_manifest(kept, out / f"{m.dataset_id}.csv")
    if out is not None:
        with (out / "exclusions.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset_id", "rule", "count"])
            w.writerows(rows)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if not args.config:
        raise ValueError("train requires --config")
    cfg.validate()
    if not cfg.manifests:
        raise ValueError("config lists no manifests")
    manifests = [ingest.load_manifest(cfg.resolve(p)) for p in cfg.manifests]
    test = ingest.load_manifest(cfg.resolve(cfg.test_manifest)) if cfg.test_manifest else None
    bb = cfg.backbone_config()
    run_dir = _out_dir(cfg)
    rec = train.run_experiment(
        cfg.mode,
        manifests,
        cfg.target_domain,
        bb,
        cfg.train_config(),
        run_dir,
        test_manifest=test,
        eval_options=cfg.eval_options(),
        loader=train.default_loader(bb.image_side, _cache_root(cfg)),
        head_cfg=cfg.head_config(bb.embed_dim),
        val_fraction=cfg.val_fraction,
    )
    print(f"run directory: {rec.run_dir}")
    print(f"best epoch {rec.history.best_epoch}, val loss {rec.history.best_val_loss:.6g}")
    _print_metrics(rec.report.to_dict())
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    net, _ = model.load_checkpoint(args.checkpoint)
    manifest = ingest.apply_exclusions(ingest.load_manifest(args.manifest))
    opts = cfg.eval_options()
    if args.bootstrap is not None:
        opts.n_bootstrap = args.bootstrap
    if opts.n_bootstrap < 0:
        raise ValueError("--bootstrap must be non-negative")
    loader = train.default_loader(net.config.image_side, _cache_root(cfg))
    preds = train.predictions_for(net, manifest.records, loader)
    report = metrics.evaluate(
        preds,
        n_bootstrap=opts.n_bootstrap,
        frac=opts.frac,
        quantiles=opts.quantiles,
        seed=substream_seed(cfg.seed, "bootstrap"),
        replace=opts.replace,
        discrete_errors=opts.discrete_errors,
        flag_threshold=opts.flag_threshold,
    )
    out = _out_dir(cfg)
    metrics.write_report(report, out)
    train.write_predictions(preds, out / "predictions.csv")
    _print_metrics(report.to_dict())
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    net, _ = model.load_checkpoint(args.checkpoint)
    opts = {"drop_fraction": 0.10, "head_reduction": "max", "alpha": 0.5, "weight_first_block": False}
    opts.update(cfg.explain)
    if args.drop_fraction is not None:
        opts["drop_fraction"] = args.drop_fraction
    if args.alpha is not None:
        opts["alpha"] = args.alpha

    raw = preprocess.load_image(args.image)
    x = preprocess.to_model_input(preprocess.preprocess(raw, net.config.image_side), *model.normalization(net))
    _, trace = model.forward_traced(net, x)
    display = preprocess.preprocess(raw, preprocess.MODEL_SIDE)

    maps = {}
    if args.method in ("both", "grad"):
        maps["grad"] = explain.grad_rollout(
            trace, opts["drop_fraction"], opts["head_reduction"], opts["weight_first_block"]
        )
    if args.method in ("both", "rollout"):
        maps["rollout"] = explain.plain_rollout(trace)

    out = _out_dir(cfg)
    stem = Path(args.image).stem
    for key, hm in maps.items():
        base = out / f"{stem}_{METHODS[key]}"
        explain.save_heatmap_png(hm, f"{base}_heatmap.png")
        explain.save_image_png(explain.overlay(hm, display, opts["alpha"]), f"{base}_overlay.png")
        explain.save_patch_grid_csv(hm, f"{base}_grid.csv")
        print(f"{METHODS[key]}: {base}_{{heatmap,overlay}}.png, {base}_grid.csv")
    return 0


def _load_run(run_dir: Path) -> dict:
    path = run_dir / "report.json"
    if not path.is_file():
        raise FileNotFoundError(f"no report.json in {run_dir}")
    doc = json.loads(path.read_text())
    res = run_dir / "resamples.csv"
    doc["resamples"] = metrics.read_resamples(res) if res.is_file() else {}
    return doc


def cmd_report(args, cfg: RunConfig) -> int:
    runs = [Path(p) for p in args.runs]
    docs = [_load_run(r) for r in runs]
    summary = {"runs": {}, "comparisons": []}
    for run, doc in zip(runs, docs):
        print(f"== {run}")
        _print_metrics(doc)
        summary["runs"][str(run)] = {"metrics": doc["metrics"], "intervals": doc.get("intervals")}
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            cmp = metrics.compare_resample_sets(docs[i]["resamples"], docs[j]["resamples"])
            summary["comparisons"].append({"a": str(runs[i]), "b": str(runs[j]), "tests": cmp})
            print(f"== {runs[i]} vs {runs[j]}")
            for name, r in cmp.items():
                print(f"  {name}: U={r['U']:.6g} p={r['p_value']:.4g} ({r['method']})")
    if cfg.out is not None:
        out = _out_dir(cfg)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return 0


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _print_metrics(doc: dict):
    intervals = doc.get("intervals") or {}
    for name, value in doc["metrics"].items():
        text = "undefined" if value is None else f"{value:.4f}"
        if name in intervals:
            lo, hi = intervals[name]
            text += f"  [{lo:.4f}, {hi:.4f}]"
        print(f"  {name}: {text}")


# -- argument parsing -----------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="run configuration (YAML)")
    p.add_argument("--seed", type=int, default=default, help="master seed")
    p.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drstage", description="Fundus DR staging: train, evaluate, explain.")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate manifests and apply exclusion rules")
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fine-tune one SS or MST run from a config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bootstrap", type=int, default=None, help="number of resamples; 0 disables intervals")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="attention heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=("both", "grad", "rollout"), default="both")
    p.add_argument("--drop-fraction", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="summarise run directories and compare them pairwise")
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_report)

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (DRStageError, FileNotFoundError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        print(f"drstage {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
