"""Losses, the training loop with best-on-validation selection, and the
cross-validation driver that lays out run directories."""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import AffineConfig, FoldPlan, apply_affine, sample_affine
from .errors import ConfigError, DataIntegrityError, TrainingDivergedError
from .io import DEFAULT_GRID, ManifestEntry, load_study
from .metrics import AggregateResult, MetricRecord, aggregate, dice, evaluate_study, format_table, write_records
from .networks import BackboneConfig, FusionConfig, SegModel, build_fused, predict, save_checkpoint
from .volume import Study, binarize, Volume

logger = logging.getLogger(__name__)

LOSS_KINDS = ("dice", "bce", "dice+bce")
BCE_EPS = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 80
    initial_lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step: int = 10
    lr_floor: float = 1e-6
    batch_size: int = 2
    loss: str = "dice+bce"
    augment: bool = True
    aug_translation: float = 10.0
    aug_rotation: float = 10.0
    aug_scale: float = 0.1
    aug_shear: float = 15.0
    seed: int = 0
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.lr_floor < 0 or self.initial_lr <= 0 or self.lr_step < 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    def affine_config(self) -> AffineConfig:
        return AffineConfig(self.aug_translation, self.aug_rotation,
                            (1 - self.aug_scale, 1 + self.aug_scale), self.aug_shear)


def _parse_value(kind, text: str):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_key_values(values: dict, path) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def train_config_from_dict(values: dict[str, str]) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**{k: _parse_value(types[k], v) for k, v in values.items()})


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay ``initial_lr * lr_decay ** (epoch // lr_step)``, floored."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return max(cfg.initial_lr * cfg.lr_decay ** (epoch // cfg.lr_step), cfg.lr_floor)


def soft_dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft Dice per sample (smoothing in numerator and denominator), batch mean."""
    dims = tuple(range(1, pred.ndim))
    inter = (pred * gt).sum(dims)
    denom = pred.sum(dims) + gt.sum(dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log1p(-p)).mean()


def loss(pred: torch.Tensor, gt: torch.Tensor, kind: str = "dice+bce") -> torch.Tensor:
    if pred.shape != gt.shape:
        raise DataIntegrityError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    if kind == "dice":
        return soft_dice_loss(pred, gt)
    if kind == "bce":
        return bce_loss(pred, gt)
    if kind == "dice+bce":
        return soft_dice_loss(pred, gt) + bce_loss(pred, gt)
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_dsc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dsc: float = -math.inf

    def write(self, path) -> None:
        lines = ["epoch\tlr\ttrain_loss\tval_dsc"]
        for e, (lr, tl, vd) in enumerate(zip(self.lr, self.train_loss, self.val_dsc)):
            lines.append(f"{e}\t{lr!r}\t{tl!r}\t{vd!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "TrainHistory":
        h = cls()
        for line in Path(path).read_text().splitlines()[1:]:
            _, lr, tl, vd = line.split("\t")
            h.lr.append(float(lr))
            h.train_loss.append(float(tl))
            h.val_dsc.append(float(vd))
        if h.val_dsc:
            h.best_epoch = int(np.argmax(h.val_dsc))
            h.best_val_dsc = h.val_dsc[h.best_epoch]
        return h


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def input_statistics(studies: Sequence[Study], modalities) -> tuple[list[float], list[float]]:
    """Per-modality mean/std over every voxel of the given (training) studies."""
    means, stds = [], []
    for name in modalities:
        vals = np.concatenate([getattr(s, name).data.ravel() for s in studies])
        std = float(vals.std())
        means.append(float(vals.mean()))
        stds.append(std if std > 0 else 1.0)
    return means, stds


def evaluate_dsc(model: SegModel, studies: Sequence[Study], threshold: float) -> float:
    return float(np.mean([dice(binarize(Volume(predict(model, s), s.spacing), threshold), s.mask)
                          for s in studies]))


def train(model: SegModel, train_set: Sequence[Study], val_set: Sequence[Study],
          cfg: TrainConfig, on_epoch: Callable[[int, TrainHistory], None] | None = None
          ) -> tuple[SegModel, TrainHistory]:
    """Adam with the step schedule; keeps the parameters of the epoch with the
    best validation DSC (earliest epoch on ties).

    The model's input standardization statistics are set from ``train_set``.
    """
    if not train_set or not val_set:
        raise ConfigError("training and validation sets must be non-empty")
    torch.use_deterministic_algorithms(cfg.deterministic)
    mods = model.fusion_cfg.modalities
    model.set_input_stats(*input_statistics(train_set, mods))
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(0, cfg))
    aff = cfg.affine_config()
    hist = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            xs, ys = [], []
            for idx in order[start:start + cfg.batch_size]:
                s = train_set[idx]
                if cfg.augment:
                    # one independent stream per (study, epoch)
                    rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
                    s = apply_affine(s, sample_affine(aff, rng))
                xs.append(model.prepare_input(s))
                ys.append(torch.as_tensor(s.mask.data[None], dtype=dtype))
            x, y = torch.stack(xs), torch.stack(ys)
            heads = model.head_outputs(x)
            value = torch.stack([loss(h, y, cfg.loss) for h in heads]).mean()
            if not torch.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
            opt.zero_grad(set_to_none=True)
            value.backward()
            opt.step()
            losses.append(value.item())
        val = evaluate_dsc(model, val_set, cfg.threshold)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_dsc.append(val)
        hist.lr.append(lr)
        if val > hist.best_val_dsc:
            hist.best_val_dsc, hist.best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
        logger.info("epoch %d lr %.2g loss %.4f val_dsc %.4f", epoch, lr, hist.train_loss[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, hist)

    model.load_state_dict(best_state)
    model.eval()
    return model, hist


def evaluate_model(model: SegModel, studies: Sequence[Study], threshold: float = 0.5
                   ) -> list[MetricRecord]:
    return [evaluate_study(Volume(predict(model, s), s.spacing), s.mask, s.spacing,
                           threshold, s.study_id) for s in studies]


# -- run directories and cross-validation -----------------------------------------

def _label(backbone: BackboneConfig, fusion: FusionConfig, augment: bool) -> str:
    net = "U-Net" if backbone.kind == "unet" else "U-Net++"
    names = {"early": "Early fusion", "intermediate": "Intermediate fusion",
             "late": "Late fusion", "single_modality": f"Single modality ({fusion.modality})"}
    aug = "with data augmentation" if augment else "without data augmentation"
    return f"{names[fusion.strategy]} ({net}, {aug})"


@dataclass
class FoldResult:
    fold: int
    records: list[MetricRecord]
    summary: AggregateResult
    history: TrainHistory
    run_dir: Path | None = None


class StudyCache:
    """Loads manifest studies on demand and keeps them in memory."""

    def __init__(self, entries: Sequence[ManifestEntry], grid=DEFAULT_GRID):
        self.entries = {e.study_id: e for e in entries}
        self.grid = tuple(grid)
        self._cache: dict[str, Study] = {}

    def __getitem__(self, sid: str) -> Study:
        if sid not in self._cache:
            if sid not in self.entries:
                raise DataIntegrityError(f"study {sid!r} is not in the manifest")
            self._cache[sid] = load_study(self.entries[sid], self.grid)
        return self._cache[sid]

    def get(self, ids) -> list[Study]:
        return [self[s] for s in ids]


def run_fold(cache: StudyCache, plan: FoldPlan, fold: int, backbone: BackboneConfig,
             fusion: FusionConfig, cfg: TrainConfig, out_dir=None,
             provenance: dict | None = None) -> FoldResult:
    """Train on the fold's train split, select on val, score on test.

    ``fold`` is zero-based. When ``out_dir`` is given the run directory is
    written there.
    """
    backbone.check_grid(cache.grid)
    seed_everything(cfg.seed, cfg.deterministic)
    model = build_fused(backbone, fusion, cache.grid)
    tr = cache.get(plan.subset(fold, "train"))
    va = cache.get(plan.subset(fold, "val"))
    te = cache.get(plan.subset(fold, "test"))
    model, hist = train(model, tr, va, cfg)
    records = evaluate_model(model, te, cfg.threshold)
    summary = aggregate(records)
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_key_values(asdict(cfg), run_dir / "config.txt")
        meta = {"fold": fold + 1, "backbone": backbone.kind, "fusion": fusion.label(),
                "base_filters": backbone.base_filters, "depth": backbone.depth,
                "deep_supervision": backbone.deep_supervision,
                "grid": "x".join(map(str, cache.grid)), "best_epoch": hist.best_epoch,
                "label": _label(backbone, fusion, cfg.augment)}
        meta.update(provenance or {})
        write_key_values(meta, run_dir / "run.txt")
        plan.save(run_dir / "folds.txt")
        hist.write(run_dir / "history.tsv")
        save_checkpoint(model, run_dir / "best.pt",
                        extra={"best_epoch": hist.best_epoch, "best_val_dsc": hist.best_val_dsc})
        write_split_results(records, summary, run_dir, "test", meta["label"])
    return FoldResult(fold, records, summary, hist, run_dir)


def write_split_results(records, summary, run_dir, split: str, label: str) -> None:
    run_dir = Path(run_dir)
    write_records(records, run_dir / f"metrics_{split}.tsv")
    (run_dir / f"summary_{split}.txt").write_text(format_table([(label, summary)]))


@dataclass
class CVResult:
    folds: list[FoldResult]
    summary: AggregateResult

    def table(self) -> str:
        rows = [(f"Fold {f.fold + 1}", f.summary) for f in self.folds]
        rows.append(("All folds", self.summary))
        return format_table(rows)


def run_cv(entries: Sequence[ManifestEntry], plan: FoldPlan, backbone: BackboneConfig,
           fusion: FusionConfig, cfg: TrainConfig, out_dir=None, grid=DEFAULT_GRID,
           folds: Sequence[int] | None = None) -> CVResult:
    """Cross-validate one (backbone, fusion) pair over the plan's folds.

    The grand summary pools the test records of every fold.
    """
    cache = StudyCache(entries, grid)
    folds = range(len(plan.folds)) if folds is None else folds
    results = []
    for k in folds:
        sub = None if out_dir is None else Path(out_dir) / f"fold{k + 1}"
        results.append(run_fold(cache, plan, k, backbone, fusion, cfg, sub))
    summary = aggregate([r for f in results for r in f.records])
    cv = CVResult(results, summary)
    if out_dir is not None:
        (Path(out_dir) / "cv_summary.txt").write_text(cv.table())
    return cv


def compare_runs(run_dirs: Sequence, split: str = "test") -> str:
    """Table-5 style comparison: one row per run directory."""
    from .metrics import read_records
    rows = []
    for d in run_dirs:
        d = Path(d)
        meta = read_key_values(d / "run.txt")
        rows.append((meta.get("label", d.name), aggregate(read_records(d / f"metrics_{split}.tsv"))))
    return format_table(rows)


def dsc_curves(run_dirs: Sequence) -> str:
    """Per-epoch validation DSC of several runs, one column per run."""
    hists = [(Path(d).name, TrainHistory.read(Path(d) / "history.tsv")) for d in run_dirs]
    n = max((len(h.val_dsc) for _, h in hists), default=0)
    lines = ["epoch\t" + "\t".join(name for name, _ in hists)]
    for e in range(n):
        cells = [f"{h.val_dsc[e]:.6f}" if e < len(h.val_dsc) else "" for _, h in hists]
        lines.append(f"{e}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"
