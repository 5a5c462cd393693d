"""Placenta segmentation from fused B-mode and power Doppler ultrasound volumes.

Modules: ``volume`` (volume types, resampling), ``io`` (NIfTI and
manifests), ``data`` (consensus, folds, augmentation, phantoms),
``networks`` (U-Net, U-Net++ and fusion strategies), ``metrics``,
``training`` and ``cli``.
"""

__version__ = "0.1.0"
