"""NIfTI reading/writing, the dataset manifest and study ingestion."""

from __future__ import annotations

import gzip
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import nibabel as nib
import numpy as np

from .data import PhantomSpec, consensus_mask, generate_phantom
from .errors import (
    DataIntegrityError,
    InvalidSpacingError,
    MalformedHeaderError,
    MissingFileError,
    NotThreeDError,
    VolumeWriteError,
)
from .volume import BinaryMask, Study, Volume, normalize_unit, resample

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("study_id", "patient_id", "bmode", "doppler", "mask1", "mask2", "mask3")
DEFAULT_GRID = (64, 64, 64)


def read_volume(path) -> Volume:
    """Read a single-channel 3D NIfTI-1/NIfTI-2 image (optionally gzipped).

    Trailing singleton dimensions are dropped; anything else beyond three
    axes is rejected. Spacing comes from the ``pixdim`` header fields.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such volume file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
        # nibabel silently repairs bad pixdim on load; inspect the stored values
        with nib.openers.ImageOpener(str(path)) as fobj:
            raw = type(img.header).from_fileobj(fobj, check=False)
        zooms = raw["pixdim"][1:4]
    except (nib.filebasedimages.ImageFileError, EOFError, OSError, ValueError,
            gzip.BadGzipFile, zlib.error) as exc:
        raise MalformedHeaderError(f"cannot parse {path}: {exc}") from exc
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise NotThreeDError(f"{path}: expected a single-channel 3D image, got shape {data.shape}")
    spacing = tuple(float(z) for z in zooms)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise InvalidSpacingError(f"{path}: non-positive voxel spacing {spacing}")
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DataIntegrityError(f"{path}: image contains non-finite values")
    return Volume(data, spacing)


def read_mask(path) -> BinaryMask:
    v = read_volume(path)
    if not np.all((v.data == 0) | (v.data == 1)):
        raise DataIntegrityError(f"{path}: mask file is not binary")
    return BinaryMask(v.data, v.spacing)


def _fits_float32(spacing) -> bool:
    return all(float(np.float32(s)) == s for s in spacing)


def write_volume(v: Volume | BinaryMask, path, nifti2: bool | None = None) -> None:
    """Write a volume as float32 or a mask as uint8.

    NIfTI-1 is written unless ``nifti2`` is set or the spacing is not exactly
    representable in the NIfTI-1 float32 ``pixdim`` field, in which case the
    NIfTI-2 (float64 header) format is used so spacing survives a round trip.
    """
    path = Path(path)
    if isinstance(v, BinaryMask):
        data = v.data.astype(np.uint8)
    else:
        data = v.data.astype(np.float32)
    if nifti2 is None:
        nifti2 = not _fits_float32(v.spacing)
    affine = np.diag([*v.spacing, 1.0])
    cls = nib.Nifti2Image if nifti2 else nib.Nifti1Image
    img = cls(data, affine)
    img.header.set_zooms(v.spacing)
    img.header.set_xyzt_units("mm")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeWriteError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class ManifestEntry:
    study_id: str
    patient_id: str
    bmode: Path
    doppler: Path
    masks: tuple[Path, ...]


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a whitespace-separated manifest; relative paths resolve against
    the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such manifest: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    lines = [ln.split() for ln in path.read_text().splitlines()
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or tuple(lines[0][:5]) != MANIFEST_COLUMNS[:5]:
        raise DataIntegrityError(f"{path}: missing manifest header {' '.join(MANIFEST_COLUMNS[:5])}")
    for lineno, row in enumerate(lines[1:], start=2):
        if not 5 <= len(row) <= 7:
            raise DataIntegrityError(f"{path}:{lineno}: expected 5-7 columns, got {len(row)}")
        sid, pid, b, d, *m = row
        entries.append(ManifestEntry(sid, pid, base / b, base / d, tuple(base / x for x in m)))
    ids = [e.study_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataIntegrityError(f"{path}: duplicate study ids")
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    path = Path(path)
    entries = list(entries)
    n_masks = max((len(e.masks) for e in entries), default=1)
    lines = [" ".join(MANIFEST_COLUMNS[:4 + n_masks])]
    for e in entries:
        cols = [e.study_id, e.patient_id, e.bmode, e.doppler, *e.masks]
        rel = []
        for c in cols:
            if isinstance(c, Path):
                try:
                    c = c.relative_to(path.parent)
                except ValueError:
                    pass
            rel.append(str(c))
        lines.append(" ".join(rel))
    path.write_text("\n".join(lines) + "\n")


def load_study(entry: ManifestEntry, grid=DEFAULT_GRID) -> Study:
    """Read, combine annotators, resample onto ``grid`` and unit-normalize.

    Standardization is not applied here; it needs training-split statistics
    and happens at model input time.
    """
    for p in (entry.bmode, entry.doppler, *entry.masks):
        if not Path(p).is_file():
            raise MissingFileError(f"study {entry.study_id}: missing file {p}")
    if not 1 <= len(entry.masks) <= 3:
        raise DataIntegrityError(f"study {entry.study_id}: expected 1-3 masks, got {len(entry.masks)}")
    bmode = read_volume(entry.bmode)
    doppler = read_volume(entry.doppler)
    masks = [read_mask(p) for p in entry.masks]
    return prepare_study(Study(entry.study_id, entry.patient_id, bmode, doppler,
                               consensus_mask(masks)), grid)


def prepare_study(study: Study, grid=DEFAULT_GRID) -> Study:
    """Resample every volume onto ``grid`` and unit-normalize the intensities."""
    bmode = normalize_unit(resample(study.bmode, grid, "trilinear"))
    doppler = normalize_unit(resample(study.doppler, grid, "trilinear"))
    mask = resample(study.mask, grid, "nearest")
    return Study(study.study_id, study.patient_id, bmode, doppler, mask)


def write_study(study: Study, directory) -> ManifestEntry:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = (directory / "bmode.nii.gz", directory / "doppler.nii.gz", directory / "mask1.nii.gz")
    write_volume(study.bmode, paths[0])
    write_volume(study.doppler, paths[1])
    write_volume(study.mask, paths[2])
    return ManifestEntry(study.study_id, study.patient_id, paths[0], paths[1], (paths[2],))


def write_phantom_dataset(out_dir, count: int, seed: int,
                          spec: PhantomSpec | None = None) -> Path:
    """Generate ``count`` phantom studies under ``out_dir`` plus ``manifest.txt``.

    Study k uses phantom seed ``seed * 100003 + k`` and is its own patient.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VolumeWriteError(f"cannot create {out_dir}: {exc}") from exc
    spec = spec or PhantomSpec()
    entries = []
    for k in range(count):
        sid = f"study{k:04d}"
        s = generate_phantom(replace(spec, seed=seed * 100003 + k), sid, f"patient{k:04d}")
        entries.append(write_study(s, out_dir / sid))
    manifest = out_dir / "manifest.txt"
    write_manifest(entries, manifest)
    logger.info("wrote %d phantom studies to %s", count, out_dir)
    return manifest

