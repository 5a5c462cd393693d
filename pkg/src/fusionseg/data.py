"""Consensus ground truth, patient-grouped fold plans, affine augmentation and
synthetic dual-modality phantoms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataIntegrityError
from .volume import BinaryMask, Study, Volume

SUBSETS = ("train", "val", "test")
N_FOLDS = 5
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


# -- consensus ---------------------------------------------------------------

def consensus_mask(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Combine one to three annotator masks into a single ground truth.

    One mask is used as-is, two are intersected and three are combined by
    majority vote (a voxel is foreground when at least two annotators agree).
    """
    masks = list(masks)
    if not 1 <= len(masks) <= 3:
        raise DataIntegrityError(f"consensus needs 1 to 3 masks, got {len(masks)}")
    ref = masks[0]
    for m in masks[1:]:
        if m.shape != ref.shape or not np.allclose(m.spacing, ref.spacing, rtol=1e-9, atol=0):
            raise DataIntegrityError("annotator masks differ in shape or spacing")
    if len(masks) == 1:
        return BinaryMask(ref.data.copy(), ref.spacing)
    stack = np.stack([m.data for m in masks]).astype(np.uint8)
    if len(masks) == 2:
        out = stack[0] & stack[1]
    else:
        out = stack.sum(axis=0) >= 2
    return BinaryMask(out, ref.spacing)


# -- folds -------------------------------------------------------------------

@dataclass
class FoldPlan:
    """Five independent train/val/test partitions of the study ids."""

    folds: list[dict[str, list[str]]]
    seed: int

    def subset(self, fold: int, name: str) -> list[str]:
        return self.folds[fold][name]

    def save(self, path) -> None:
        lines = [f"# seed {self.seed}", "fold\tsubset\tstudy_id"]
        for k, fold in enumerate(self.folds, start=1):
            for name in SUBSETS:
                lines.extend(f"{k}\t{name}\t{sid}" for sid in fold[name])
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        seed = 0
        folds: dict[int, dict[str, list[str]]] = {}
        for line in Path(path).read_text().splitlines():
            if line.startswith("# seed"):
                seed = int(line.split()[2])
                continue
            if not line.strip() or line.startswith("#") or line.startswith("fold\t"):
                continue
            k, name, sid = line.split("\t")
            if name not in SUBSETS:
                raise DataIntegrityError(f"unknown subset {name!r} in fold plan")
            folds.setdefault(int(k), {s: [] for s in SUBSETS})[name].append(sid)
        return cls([folds[k] for k in sorted(folds)], seed)


def _pick_exact(groups: list[tuple[str, int]], target: int, rng) -> set[str]:
    """Pick a random subset of patient groups whose study count is as close to
    ``target`` as possible (0/1 knapsack over shuffled groups)."""
    order = rng.permutation(len(groups))
    parent: dict[int, tuple[int, int]] = {0: (-1, -1)}
    for gi in order:
        size = groups[gi][1]
        for s in sorted(parent, reverse=True):
            t = s + size
            if t <= target and t not in parent:
                parent[t] = (s, gi)
        if target in parent:
            break
    best = max(parent)
    chosen = set()
    s = best
    while s > 0:
        prev, gi = parent[s]
        chosen.add(groups[gi][0])
        s = prev
    return chosen


def make_folds(entries, seed: int, n_folds: int = N_FOLDS,
               fractions: tuple[float, float, float] = SPLIT_FRACTIONS) -> FoldPlan:
    """Build ``n_folds`` seeded random patient-grouped splits.

    ``entries`` are manifest entries (anything with ``study_id`` and
    ``patient_id``). All studies of a patient always land in the same subset.
    Each fold is an independent random re-split, so folds overlap partially.
    """
    entries = list(entries)
    ids = [e.study_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataIntegrityError("study ids in manifest are not unique")
    by_patient: dict[str, list[str]] = {}
    for e in entries:
        by_patient.setdefault(e.patient_id, []).append(e.study_id)
    if len(by_patient) < 5:
        raise ConfigError(f"need at least 5 patients for a train/val/test split, got {len(by_patient)}")

    n = len(ids)
    n_val = round(fractions[1] * n)
    n_test = round(fractions[2] * n)
    groups = sorted((pid, len(sids)) for pid, sids in by_patient.items())
    rng = np.random.default_rng(seed)
    folds = []
    for _ in range(n_folds):
        test_p = _pick_exact(groups, n_test, rng)
        rest = [g for g in groups if g[0] not in test_p]
        val_p = _pick_exact(rest, n_val, rng)
        split = {name: [] for name in SUBSETS}
        for pid, sids in by_patient.items():
            name = "test" if pid in test_p else "val" if pid in val_p else "train"
            split[name].extend(sids)
        for name in SUBSETS:
            split[name].sort()
        for name, frac in zip(SUBSETS, fractions):
            if abs(len(split[name]) - frac * n) > 1 or not split[name]:
                raise ConfigError(
                    f"cannot reach {frac:.0%} {name} share with {len(by_patient)} patients "
                    f"({len(split[name])} of {n} studies); add patients or single-study entries")
        folds.append(split)
    return FoldPlan(folds, seed)


def fold_dissimilarity(plan: FoldPlan) -> np.ndarray:
    """Percentage of fold i's subset absent from fold j's subset.

    Returns an array of shape (k, k, 3) with the train/val/test percentages in
    the last axis.
    """
    k = len(plan.folds)
    out = np.zeros((k, k, len(SUBSETS)))
    for i in range(k):
        for j in range(k):
            for s, name in enumerate(SUBSETS):
                a = set(plan.folds[i][name])
                b = set(plan.folds[j][name])
                out[i, j, s] = 100.0 * (1.0 - len(a & b) / len(a)) if a else 0.0
    return out


def format_dissimilarity(matrix: np.ndarray) -> str:
    k = matrix.shape[0]
    head = "Fold\t" + "\t".join(str(j + 1) for j in range(k))
    rows = [head]
    for i in range(k):
        cells = ["(" + ",".join(f"{x:.3g}" for x in matrix[i, j]) + ")" for j in range(k)]
        rows.append(f"{i + 1}\t" + "\t".join(cells))
    return "\n".join(rows)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AffineConfig:
    max_translation: float = 10.0   # voxels
    max_rotation: float = 10.0      # degrees
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_shear: float = 15.0         # voxels of displacement at the grid edge

    def __post_init__(self):
        if min(self.max_translation, self.max_rotation, self.max_shear) < 0:
            raise ConfigError("augmentation ranges must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale range {self.scale_range}")


@dataclass(frozen=True)
class AffineParams:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shear: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def is_identity(self) -> bool:
        return (not any(self.translation) and not any(self.rotation)
                and all(s == 1.0 for s in self.scale) and not any(self.shear))


def sample_affine(config: AffineConfig, rng: np.random.Generator) -> AffineParams:
    def u(lo, hi):
        return tuple(float(x) for x in rng.uniform(lo, hi, size=3))

    return AffineParams(
        translation=u(-config.max_translation, config.max_translation),
        rotation=u(-config.max_rotation, config.max_rotation),
        scale=u(*config.scale_range),
        shear=u(-config.max_shear, config.max_shear),
    )


def _rotation(deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def affine_matrix(p: AffineParams, shape) -> tuple[np.ndarray, np.ndarray]:
    """Forward map ``x -> A (x - c) + c + t`` in voxel coordinates, c the grid centre.

    Shear on axis i displaces it proportionally to the offset along axis i+1,
    reaching ``shear[i]`` voxels at that axis' edge.
    """
    half = np.maximum((np.asarray(shape, float) - 1) / 2, 1.0)
    sh = np.eye(3)
    for i in range(3):
        j = (i + 1) % 3
        sh[i, j] = p.shear[i] / half[j]
    a = _rotation(p.rotation) @ np.diag(p.scale) @ sh
    return a, np.asarray(p.translation, float)


def _warp(data: np.ndarray, p: AffineParams, order: int) -> np.ndarray:
    a, t = affine_matrix(p, data.shape)
    c = (np.asarray(data.shape, float) - 1) / 2
    inv = np.linalg.inv(a)
    # output x samples input at inv (x - c - t) + c
    offset = c - inv @ (c + t)
    return ndimage.affine_transform(data, inv, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def apply_affine(s: Study, p: AffineParams) -> Study:
    """Apply one spatial transform to every volume of a study."""
    if p.is_identity():
        return s
    bmode = _warp(s.bmode.data.astype(np.float64), p, order=1)
    doppler = _warp(s.doppler.data.astype(np.float64), p, order=1)
    mask = _warp(s.mask.data, p, order=0)
    return Study(s.study_id, s.patient_id, Volume(bmode, s.bmode.spacing),
                 Volume(doppler, s.doppler.spacing), BinaryMask(mask, s.mask.spacing))


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic placenta-like scan.

    The tissue is an ellipsoidal shell. Centre, radii and thickness are
    fractions of the grid size and are jittered per seed by up to ``jitter``
    (relative); the shell is also rotated by up to ``tilt`` degrees about
    each axis. With ``split_shell`` the shell is cut by a random plane
    through its centre: one half is the placenta (the mask), the other half
    is uterine wall with the same B-mode texture but no flow. ``confounders``
    adds further small tissue shells elsewhere. B-mode therefore delineates
    tissue but cannot tell placenta from uterus, while Doppler only shows
    sparse vessel blobs inside the placenta, mixed with ``clutter_count``
    flash-artifact blobs of the same amplitude outside the tissue: it
    localises the target only once tissue is known.
    """

    shape: tuple[int, int, int] = (64, 64, 64)
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radii: tuple[float, float, float] = (0.3, 0.25, 0.22)
    thickness: float = 0.12
    jitter: float = 0.1
    tilt: float = 20.0
    noise: float = 0.3
    tissue_contrast: float = 0.5
    split_shell: bool = True
    confounders: int = 0
    vessel_count: int = 6
    vessel_radius: float = 0.08
    clutter_count: int = 12
    doppler_noise: float = 0.05
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0 or self.doppler_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if min(self.vessel_count, self.clutter_count, self.confounders) < 0 or self.vessel_radius <= 0:
            raise ConfigError("vessel and confounder counts must be non-negative")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must lie in [0, 1)")
        if not 0 <= self.tilt <= 90:
            raise ConfigError("tilt must lie in [0, 90] degrees")
        lo, hi = self.extreme_bounds()
        if np.any(lo < -0.5) or np.any(hi > np.asarray(self.shape) - 0.5):
            raise ConfigError("phantom shell does not fit inside the grid")
        if self.thickness * (1 + self.jitter) >= min(self.radii) * (1 - self.jitter):
            raise ConfigError("shell thickness must be smaller than every radius")

    def extreme_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Voxel-coordinate bounding box of the shell over the whole jitter range."""
        n = np.asarray(self.shape, float)
        c_lo = (np.asarray(self.center) - self.jitter * 0.5 * np.asarray(self.radii)) * n - 0.5
        c_hi = (np.asarray(self.center) + self.jitter * 0.5 * np.asarray(self.radii)) * n - 0.5
        r = np.asarray(self.radii) * (1 + self.jitter)
        if self.tilt > 0:
            # any axis may end up along any direction
            r = np.full(3, r.max())
        r = r * n
        return c_lo - r, c_hi + r

    def shell_fraction_bounds(self) -> tuple[float, float]:
        """Analytic min/max shell volume fraction over the jitter range."""
        n = np.asarray(self.shape, float)
        r = np.asarray(self.radii) * n
        t0 = self.thickness * n.min()
        j = self.jitter

        def frac(rs, t):
            outer = np.prod(rs)
            inner = np.prod(np.maximum(rs - t, 0))
            return 4 / 3 * math.pi * (outer - inner) / np.prod(n)

        # volume grows with radii and thickness; scale both ends
        half = 0.5 if self.split_shell else 1.0
        lo = half * frac(r * (1 - j), t0 * (1 - j))
        hi = half * frac(r * (1 + j), t0 * (1 + j))
        return float(lo), float(hi)


def _ellipsoid_level(shape, center, radii, rot=None) -> np.ndarray:
    grid = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    d = [g - c for g, c in zip(grid, center)]
    if rot is not None:
        # coordinates in the ellipsoid's own frame: R^T d
        d = [sum(rot[k, i] * d[k] for k in range(3)) for i in range(3)]
    return sum((di / r) ** 2 for di, r in zip(d, radii))


def _shell(shape, center, radii, thickness, rot=None) -> np.ndarray:
    inner = np.asarray(radii) - thickness
    return (_ellipsoid_level(shape, center, radii, rot) <= 1.0) & (
        _ellipsoid_level(shape, center, inner, rot) > 1.0)


def generate_phantom(spec: PhantomSpec, study_id: str | None = None,
                     patient_id: str | None = None) -> Study:
    """Generate a deterministic synthetic study from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.shape)
    n = np.asarray(shape, float)

    def jit(size=None):
        return 1 + rng.uniform(-spec.jitter, spec.jitter, size=size)

    radii_frac = np.asarray(spec.radii) * jit(3)
    thickness_frac = spec.thickness * jit()
    center_frac = np.asarray(spec.center) + rng.uniform(-0.5, 0.5, 3) * spec.jitter * np.asarray(spec.radii)
    radii = radii_frac * n
    thickness = thickness_frac * min(shape)
    center = center_frac * n - 0.5
    rot = _rotation(rng.uniform(-spec.tilt, spec.tilt, 3)) if spec.tilt > 0 else None
    grid = np.meshgrid(*[np.arange(k, dtype=float) for k in shape], indexing="ij")
    tissue = _shell(shape, center, radii, thickness, rot)
    target = tissue.copy()
    if spec.split_shell:
        normal = rng.standard_normal(3)
        side = sum((g - c) * nv for g, c, nv in zip(grid, center, normal))
        target &= side >= 0

    # Extra confounders: smaller shells elsewhere that must not touch the tissue.
    for _ in range(spec.confounders):
        for _attempt in range(50):
            cr = radii * rng.uniform(0.45, 0.7, 3)
            lo = cr + 0.5
            cc = rng.uniform(lo, n - 1 - lo)
            cand = _shell(shape, cc, cr, min(thickness, 0.8 * cr.min()))
            grown = ndimage.binary_dilation(tissue, iterations=2)
            if cand.any() and not (cand & grown).any():
                tissue |= cand
                break

    # B-mode: tissue brighter than background, gamma speckle, smooth texture.
    bmode = 0.3 + spec.tissue_contrast * tissue
    if spec.noise > 0:
        k = 1.0 / spec.noise ** 2
        texture = ndimage.gaussian_filter(rng.standard_normal(shape), 1.5)
        texture /= texture.std() + 1e-12
        bmode = bmode * rng.gamma(k, 1.0 / k, shape) + 0.5 * spec.noise * texture

    # Doppler: vessel blobs seeded inside the target, clutter blobs outside all tissue.
    doppler = np.zeros(shape)
    r = spec.vessel_radius * min(shape)
    for region, count in ((target, spec.vessel_count), (~tissue, spec.clutter_count)):
        voxels = np.argwhere(region)
        if not count or not len(voxels):
            continue
        for p in voxels[rng.integers(0, len(voxels), count)]:
            d2 = sum((g - c) ** 2 for g, c in zip(grid, p))
            doppler = np.maximum(doppler, rng.uniform(0.6, 1.0) * np.exp(-d2 / (2 * r * r)))
    if spec.doppler_noise > 0:
        doppler = doppler + spec.doppler_noise * np.abs(rng.standard_normal(shape))

    sid = study_id or f"phantom{spec.seed:05d}"
    return Study(sid, patient_id or sid, Volume(bmode, spec.spacing),
                 Volume(doppler, spec.spacing), BinaryMask(target, spec.spacing))
