"""Point-source density reconstruction from projections at unknown orientations.

The pipeline runs in four stages: simulate projections (:mod:`uvtomo.forward`),
estimate rotation-invariant features (:mod:`uvtomo.polar_ft`, :mod:`uvtomo.features`),
solve the distance-geometry problem on a voxel grid (:mod:`uvtomo.recon`) and score
the result (:mod:`uvtomo.evaluation`).
"""
from __future__ import annotations

__version__ = "0.1.0"
