"""
Synthetic studies, file round-trips and resampling
==================================================

A phantom study has a B-mode volume, a power Doppler volume and a binary
mask. This walk-through generates one, writes it to NIfTI, reads it back on
a coarser grid and looks at what the resampling did to the spacing.
"""

import tempfile
from pathlib import Path

import numpy as np

from fusionseg.data import PhantomSpec, generate_phantom
from fusionseg.io import load_study, read_manifest, write_phantom_dataset, write_study
from fusionseg.volume import resample

###############################################################################
# Generate one study. The shell around the ellipsoid is cut in two: one half
# is the target, the other half looks the same in B-mode but carries no flow.

spec = PhantomSpec(shape=(48, 40, 32), spacing=(0.8, 0.9, 1.2), seed=7)
study = generate_phantom(spec, "demo")
inside = study.mask.data.astype(bool)
print("grid", study.mask.shape, "spacing", study.mask.spacing)
print(f"target fraction {inside.mean():.3f}, bounds {spec.shell_fraction_bounds()}")
print(f"B-mode mean inside/outside: {study.bmode.data[inside].mean():.2f} / {study.bmode.data[~inside].mean():.2f}")
print(f"Doppler mean inside/outside: {study.doppler.data[inside].mean():.2f} / {study.doppler.data[~inside].mean():.2f}")

###############################################################################
# A coarse text rendering of the central slice: '#' target, '+' strong
# Doppler signal elsewhere, '.' background.

z = study.mask.shape[2] // 2
for row in range(0, study.mask.shape[0], 3):
    line = ""
    for col in range(0, study.mask.shape[1], 2):
        if inside[row, col, z]:
            line += "#"
        elif study.doppler.data[row, col, z] > 0.5:
            line += "+"
        else:
            line += "."
    print(line)

###############################################################################
# Write it, read it back through a manifest and resample to 32^3. The
# physical extent is preserved, so the spacing changes per axis.

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_study(study, tmp / "demo")
    (tmp / "manifest.txt").write_text(
        "study_id patient_id bmode doppler mask1\n"
        "demo p0 demo/bmode.nii.gz demo/doppler.nii.gz demo/mask1.nii.gz\n")
    entry = read_manifest(tmp / "manifest.txt")[0]
    small = load_study(entry, grid=(32, 32, 32))
    print("resampled spacing", tuple(round(s, 3) for s in small.mask.spacing))
    extent = np.multiply(small.mask.shape, small.mask.spacing)
    print("extent before/after", np.multiply(study.mask.shape, study.mask.spacing), extent)

    # whole datasets come with a manifest and are byte-for-byte reproducible
    manifest = write_phantom_dataset(tmp / "set", count=3, seed=1, spec=PhantomSpec(shape=(16, 16, 16)))
    print(manifest.read_text())

###############################################################################
# Masks only ever use nearest-neighbour resampling, so they stay binary.

back = resample(resample(study.mask, (24, 20, 16), "nearest"), study.mask.shape, "nearest")
print("mask values after two resamplings:", np.unique(back.data))
