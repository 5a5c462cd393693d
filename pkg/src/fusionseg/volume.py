"""Volumetric data types and the intensity/geometry preprocessing steps.

Arrays are indexed ``data[x, y, z]`` and ``spacing`` is given in mm per voxel
along the same axes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataIntegrityError, DegenerateInputWarning

Spacing = tuple[float, float, float]
Shape = tuple[int, int, int]


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise DataIntegrityError(f"expected 3 spacing components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise DataIntegrityError(f"spacing must be finite and positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with physical voxel spacing."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataIntegrityError(f"volume data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise DataIntegrityError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A 3D {0, 1} grid with physical voxel spacing, stored as uint8."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataIntegrityError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != bool:
            if not np.all((data == 0) | (data == 1)):
                raise DataIntegrityError("mask contains values other than 0 and 1")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class Study:
    """Co-registered B-mode, power-Doppler and ground-truth volumes of one scan."""

    study_id: str
    patient_id: str
    bmode: Volume
    doppler: Volume
    mask: BinaryMask

    def __post_init__(self):
        grids = [(self.bmode.shape, self.bmode.spacing),
                 (self.doppler.shape, self.doppler.spacing),
                 (self.mask.shape, self.mask.spacing)]
        shapes = {g[0] for g in grids}
        if len(shapes) != 1:
            raise DataIntegrityError(
                f"study {self.study_id}: modality shapes differ {sorted(shapes)}")
        ref = np.asarray(grids[0][1])
        for _, sp in grids[1:]:
            if not np.allclose(sp, ref, rtol=1e-9, atol=0):
                raise DataIntegrityError(
                    f"study {self.study_id}: modality spacings differ {grids[0][1]} vs {sp}")

    @property
    def shape(self) -> Shape:
        return self.mask.shape

    @property
    def spacing(self) -> Spacing:
        return self.mask.spacing


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    # voxel-centre alignment keeps the physical extent fixed
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resample(v: Volume | BinaryMask, target_shape,
             mode: Literal["trilinear", "nearest"] = "trilinear") -> Volume | BinaryMask:
    """Resample onto a ``target_shape`` grid covering the same physical extent.

    Masks must use ``mode="nearest"``; the result is then again a BinaryMask.
    Output spacing is ``spacing * shape / target_shape`` per axis.
    """
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ConfigError(f"target shape must be three positive ints, got {target_shape}")
    if mode not in ("trilinear", "nearest"):
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    is_mask = isinstance(v, BinaryMask)
    if is_mask and mode != "nearest":
        raise ConfigError("binary masks must be resampled with mode='nearest'")
    if not np.all(np.isfinite(v.data)):
        raise DataIntegrityError("cannot resample a volume with non-finite values")

    if target_shape == v.shape:
        return type(v)(v.data.copy(), v.spacing)

    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.shape, target_shape))
    if mode == "nearest":
        # floor(centre) picks the input voxel containing each output centre
        idx = [np.clip(np.floor((np.arange(m) + 0.5) * n / m).astype(int), 0, n - 1)
               for n, m in zip(v.shape, target_shape)]
        out = v.data[np.ix_(*idx)]
    else:
        grids = np.meshgrid(*[_sample_coords(n, m) for n, m in zip(v.shape, target_shape)],
                            indexing="ij")
        out = ndimage.map_coordinates(v.data.astype(np.float64), grids, order=1, mode="nearest")
    return type(v)(out, spacing)


def normalize_unit(v: Volume) -> Volume:
    """Affinely map intensities onto [0, 1].

    A constant volume has no range to map; it becomes all zeros and a
    :class:`DegenerateInputWarning` is emitted.
    """
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        warnings.warn("constant volume normalized to zeros", DegenerateInputWarning, stacklevel=2)
        return Volume(np.zeros_like(v.data, dtype=np.float64), v.spacing)
    return Volume((v.data - lo) / (hi - lo), v.spacing)


def standardize(v: Volume, mean: float | None = None, std: float | None = None) -> Volume:
    """Return ``(v - mean) / std``; statistics default to those of ``v`` itself."""
    if mean is None:
        mean = float(v.data.mean())
    if std is None:
        std = float(v.data.std())
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    return Volume((v.data - mean) / std, v.spacing)


def binarize(p: Volume, threshold: float = 0.5) -> BinaryMask:
    """Voxel is foreground iff its probability is ``>= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    data = np.asarray(p.data)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise DataIntegrityError("probability map has values outside [0, 1]")
    return BinaryMask(data >= threshold, p.spacing)
