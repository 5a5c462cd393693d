"""Overlap and surface-distance segmentation metrics on anisotropic grids."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataIntegrityError, EmptyStructureError
from .volume import BinaryMask, Volume, binarize

METRIC_NAMES = ("dsc", "jaccard", "hd95_mm", "msd_mm")
_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a)).astype(bool)
    b = np.asarray(getattr(b, "data", b)).astype(bool)
    if a.shape != b.shape:
        raise DataIntegrityError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """Dice similarity coefficient; 1.0 when both masks are empty."""
    a, b = _arrays(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a, b) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _arrays(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def surface_voxels(m) -> np.ndarray:
    """Integer coordinates (n, 3) of foreground voxels with a background
    6-neighbour. Voxels touching the grid border count as surface."""
    data = np.asarray(getattr(m, "data", m)).astype(bool)
    if not data.any():
        raise EmptyStructureError("surface of an empty mask is undefined")
    interior = ndimage.binary_erosion(data, _SIX_NEIGHBOURS, border_value=0)
    return np.argwhere(data & ~interior)


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from every point of ``src`` to its nearest point in ``dst``."""
    sp = np.asarray(spacing, float)
    tree = cKDTree(dst * sp)
    d, _ = tree.query(src * sp, k=1)
    return np.asarray(d, float)


def _surface_pair(a, b, spacing):
    a, b = _arrays(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return None
    if ea or eb:
        raise EmptyStructureError("surface distance between an empty and a non-empty mask")
    sa, sb = surface_voxels(a), surface_voxels(b)
    return directed_distances(sa, sb, spacing), directed_distances(sb, sa, spacing)


def _spacing_of(a, spacing):
    if spacing is None:
        spacing = getattr(a, "spacing", (1.0, 1.0, 1.0))
    return spacing


def hd95(a, b, spacing=None, percentile: float = 95.0) -> float:
    """Robust Hausdorff distance in mm.

    The ``percentile`` of each directed surface-distance list is taken with
    linear interpolation, and the larger of the two directions is returned.
    ``percentile=100`` gives the classical Hausdorff distance.
    """
    pair = _surface_pair(a, b, _spacing_of(a, spacing))
    if pair is None:
        return 0.0
    dab, dba = pair
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


def hausdorff(a, b, spacing=None) -> float:
    return hd95(a, b, spacing, percentile=100.0)


def msd(a, b, spacing=None) -> float:
    """Mean surface distance: average of the two directed mean distances."""
    pair = _surface_pair(a, b, _spacing_of(a, spacing))
    if pair is None:
        return 0.0
    dab, dba = pair
    return float(0.5 * (dab.mean() + dba.mean()))


@dataclass
class MetricRecord:
    study_id: str
    dsc: float
    jaccard: float
    hd95_mm: float
    msd_mm: float

    @property
    def distances_defined(self) -> bool:
        return math.isfinite(self.hd95_mm) and math.isfinite(self.msd_mm)


def evaluate_study(pred, gt: BinaryMask, spacing=None, threshold: float = 0.5,
                   study_id: str = "") -> MetricRecord:
    """Binarize a probability map and score it against the ground truth.

    If exactly one of prediction and ground truth is empty, the distance
    metrics are recorded as NaN (undefined) rather than raising.
    """
    if not isinstance(pred, Volume):
        pred = Volume(np.asarray(pred, dtype=np.float64), gt.spacing)
    if pred.shape != gt.shape:
        raise DataIntegrityError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    spacing = gt.spacing if spacing is None else spacing
    mask = binarize(pred, threshold)
    try:
        h, m = hd95(mask, gt, spacing), msd(mask, gt, spacing)
    except EmptyStructureError:
        h = m = float("nan")
    return MetricRecord(study_id, dice(mask, gt), jaccard(mask, gt), h, m)


@dataclass
class AggregateResult:
    """Mean and population std of each metric over a study set."""

    mean: dict[str, float]
    std: dict[str, float]
    n: int
    n_defined: dict[str, int]


def aggregate(records: Sequence[MetricRecord]) -> AggregateResult:
    records = list(records)
    if not records:
        raise DataIntegrityError("cannot aggregate zero metric records")
    mean, std, n_def = {}, {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records], float)
        ok = np.isfinite(vals)
        if not ok.all():
            warnings.warn(f"{name}: {int((~ok).sum())} undefined value(s) excluded", stacklevel=2)
        vals = vals[ok]
        n_def[name] = int(ok.sum())
        mean[name] = float(vals.mean()) if vals.size else float("nan")
        std[name] = float(vals.std()) if vals.size else float("nan")
    return AggregateResult(mean, std, len(records), n_def)


TABLE_HEADER = ("Method", "DSC", "Jaccard Index", "HD (mm)", "MSD (mm)")


def format_table(rows: Iterable[tuple[str, AggregateResult]], with_std: bool = True) -> str:
    """Tab-separated table with one ``mean ± std`` cell per metric."""
    out = ["\t".join(TABLE_HEADER)]
    for label, agg in rows:
        cells = [label]
        for name in METRIC_NAMES:
            if with_std:
                cells.append(f"{agg.mean[name]:.3f} ± {agg.std[name]:.3f}")
            else:
                cells.append(f"{agg.mean[name]:.3f}")
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"


def write_records(records: Iterable[MetricRecord], path) -> None:
    names = [f.name for f in fields(MetricRecord)]
    lines = ["\t".join(names)]
    for r in records:
        lines.append("\t".join(
            r.study_id if n == "study_id" else repr(float(getattr(r, n))) for n in names))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_records(path) -> list[MetricRecord]:
    with open(path) as fh:
        rows = [ln.rstrip("\n").split("\t") for ln in fh if ln.strip()]
    head = rows[0]
    return [MetricRecord(**{k: (v if k == "study_id" else float(v)) for k, v in zip(head, r)})
            for r in rows[1:]]
