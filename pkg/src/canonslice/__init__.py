"""Canonical-space slice pose estimation and slice-to-volume reconstruction.

Modules, bottom-up: :mod:`~canonslice.se3core` (rigid transforms and pose
labels), :mod:`~canonslice.liegroup` (SE(3) exp/log, geodesic distance,
Fréchet mean), :mod:`~canonslice.volume` (volumes, slicing, SPV1 files),
:mod:`~canonslice.sampler` (training pose sets and datasets),
:mod:`~canonslice.metrics`, :mod:`~canonslice.predictor` (dictionary
predictor and Monte-Carlo confidence), :mod:`~canonslice.recon` and
:mod:`~canonslice.cli`.
"""

__version__ = "0.1.0"
