"""Command-line entry point: ``fusionseg <command> ...``.

Commands: phantom-gen, split, train, evaluate, infer, report. Exit status is
0 on success and the ``code`` of the raised error class otherwise.
"""

from __future__ import annotations

import argparse
import logging
import secrets
import shutil
import sys
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .data import FoldPlan, PhantomSpec, fold_dissimilarity, format_dissimilarity, make_folds
from .errors import ConfigError, FusionSegError, MissingFileError
from .io import read_manifest, read_volume, write_phantom_dataset, write_volume
from .metrics import aggregate
from .networks import BackboneConfig, FusionConfig, load_checkpoint, predict
from .training import (StudyCache, compare_runs, dsc_curves, evaluate_model, read_key_values, run_fold,
                       train_config_from_dict, write_split_results)
from .volume import Volume, binarize, normalize_unit, resample

log = logging.getLogger("fusionseg")

MODEL_KEYS = ("base_filters", "depth", "deep_supervision", "norm_order", "grid")


def _seed(value: int | None) -> int:
    if value is None:
        value = secrets.randbelow(2 ** 31)
        print(f"seed: {value} (randomly chosen)", file=sys.stderr)
    return value


def _grid(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).lower().split("x")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise ConfigError(f"invalid grid {text!r}")
    return tuple(parts)


def cmd_phantom_gen(args) -> None:
    seed = _seed(args.seed)
    spec = PhantomSpec(shape=_grid(args.grid))
    manifest = write_phantom_dataset(args.out, args.count, seed, spec)
    print(f"wrote {args.count} studies; manifest {manifest}")


def cmd_split(args) -> None:
    seed = _seed(args.seed)
    plan = make_folds(read_manifest(args.manifest), seed)
    plan.save(args.out)
    print(format_dissimilarity(fold_dissimilarity(plan)))


def _load_run_config(path):
    values = read_key_values(path) if path else {}
    model = {k: values.pop(k) for k in MODEL_KEYS if k in values}
    return train_config_from_dict(values), model


def cmd_train(args) -> None:
    cfg, model_keys = _load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    elif args.config is None or "seed" not in read_key_values(args.config):
        cfg.seed = _seed(None)
    backbone = BackboneConfig(
        args.backbone,
        base_filters=int(model_keys["base_filters"]) if "base_filters" in model_keys else None,
        depth=int(model_keys.get("depth", 4)),
        deep_supervision=model_keys.get("deep_supervision", "true").lower() in ("1", "true", "yes"),
        norm_order=model_keys.get("norm_order", "relu_bn"),
    )
    fusion = FusionConfig.parse(args.fusion)
    grid = _grid(model_keys.get("grid", "64"))
    plan = FoldPlan.load(args.folds)
    if not 1 <= args.fold <= len(plan.folds):
        raise ConfigError(f"--fold must be between 1 and {len(plan.folds)}")
    cache = StudyCache(read_manifest(args.manifest), grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        shutil.copyfile(args.config, out / "config.source.txt")
    res = run_fold(cache, plan, args.fold - 1, backbone, fusion, cfg, out,
                   provenance={"manifest": str(Path(args.manifest).resolve()),
                               "folds": str(Path(args.folds).resolve())})
    print(f"best epoch {res.history.best_epoch} (val DSC {res.history.best_val_dsc:.4f})")
    print((out / "summary_test.txt").read_text(), end="")


def _run_meta(run: Path) -> dict:
    path = run / "run.txt"
    if not path.is_file():
        raise MissingFileError(f"{run} is not a run directory (no run.txt)")
    return read_key_values(path)


def cmd_evaluate(args) -> None:
    run = Path(args.run)
    meta = _run_meta(run)
    cfg = train_config_from_dict(read_key_values(run / "config.txt"))
    model = load_checkpoint(run / "best.pt")
    plan = FoldPlan.load(run / "folds.txt")
    cache = StudyCache(read_manifest(meta["manifest"]), _grid(meta["grid"]))
    studies = cache.get(plan.subset(int(meta["fold"]) - 1, args.split))
    records = evaluate_model(model, studies, cfg.threshold)
    summary = aggregate(records)
    write_split_results(records, summary, run, args.split, meta.get("label", run.name))
    print((run / f"summary_{args.split}.txt").read_text(), end="")


def _find(directory: Path, stem: str) -> Path:
    hits = sorted(directory.glob(f"{stem}*.nii*"))
    if not hits:
        raise MissingFileError(f"no {stem} volume in {directory}")
    return hits[0]


def cmd_infer(args) -> None:
    run = Path(args.run)
    meta = _run_meta(run)
    cfg = train_config_from_dict(read_key_values(run / "config.txt"))
    grid = _grid(meta["grid"])
    model = load_checkpoint(run / "best.pt")
    study_dir = Path(args.study)
    raw = {name: read_volume(_find(study_dir, name)) for name in model.fusion_cfg.modalities}
    ref = next(iter(raw.values()))
    inputs = SimpleNamespace(**{k: normalize_unit(resample(v, grid)) for k, v in raw.items()})
    prob = Volume(predict(model, inputs), inputs.__dict__[model.fusion_cfg.modalities[0]].spacing)
    prob = resample(prob, ref.shape, "trilinear")
    prob = Volume(np.clip(prob.data, 0.0, 1.0), ref.spacing)
    write_volume(binarize(prob, cfg.threshold), args.out)
    if args.prob:
        write_volume(prob, args.prob)
    print(f"wrote {args.out}")


def cmd_report(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = compare_runs(args.runs)
    (out / "comparison.txt").write_text(table)
    (out / "dsc_curves.tsv").write_text(dsc_curves(args.runs))
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fusionseg", description="Segmentation from fused B-mode and power Doppler volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="write a synthetic dual-modality dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--grid", default="64", help="edge length or DxHxW")
    g.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("split", help="build a 5-fold patient-grouped plan")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one fold and score its test split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--folds", required=True)
    t.add_argument("--fold", type=int, required=True, help="1-based fold index")
    t.add_argument("--backbone", choices=("unet", "unetpp"), required=True)
    t.add_argument("--fusion", required=True,
                   choices=("single:bmode", "single:doppler", "early", "intermediate", "late"))
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trained run on one split")
    e.add_argument("--run", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", help="predict a mask for one study directory")
    i.add_argument("--run", required=True)
    i.add_argument("--study", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--prob", help="optional probability-map output")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="compare runs and collect DSC curves")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FusionSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
