"""Alignment of recovered centers to ground truth and success classification."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_EXHAUSTIVE_K = 8
DEFAULT_THRESHOLD = 10.0
_TIE = 1e-12


@dataclass(frozen=True)
class Alignment:
    """Best orthogonal map ``Q`` and permutation taking estimated centers onto the truth.

    ``est[permutation[i]] @ Q.T`` is matched with ``truth[i]``; ``rmsd`` is in voxel units.
    """

    orthogonal: np.ndarray
    permutation: tuple[int, ...]
    rmsd: float

    def to_dict(self) -> dict:
        return {
            "orthogonal": np.asarray(self.orthogonal).tolist(),
            "permutation": list(self.permutation),
            "rmsd": float(self.rmsd),
        }


def procrustes(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Orthogonal ``Q`` (det may be -1) minimizing ``||est @ Q.T - truth||_F``; no translation."""
    u, _, vt = np.linalg.svd(truth.T @ est)
    return u @ vt


def align(est: np.ndarray, truth: np.ndarray, voxel_size: float = 1.0) -> Alignment:
    """Exhaustive search over point permutations with an orthogonal Procrustes fit for each.

    Ties are broken towards the lexicographically smallest permutation.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    K = truth.shape[0]
    if est.shape[0] != K:
        raise ValueError(f"center counts differ: {est.shape[0]} estimated vs {K} true")
    if K > MAX_EXHAUSTIVE_K:
        raise ValueError(f"exhaustive alignment supports K <= {MAX_EXHAUSTIVE_K}, got {K}")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    best = None
    for perm in itertools.permutations(range(K)):
        x = est[list(perm)]
        q = procrustes(x, truth)
        rmsd = float(np.sqrt(np.mean(np.sum((x @ q.T - truth) ** 2, axis=1))))
        if best is None or rmsd < best[2] - _TIE:
            best = (q, perm, rmsd)
    q, perm, rmsd = best
    return Alignment(q, tuple(perm), rmsd / voxel_size)


def classify(alignment: Alignment | float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """Success iff the RMSD is strictly below ``threshold``."""
    rmsd = alignment.rmsd if isinstance(alignment, Alignment) else float(alignment)
    return bool(rmsd < threshold)


def evaluation_report(est: np.ndarray, truth: np.ndarray, voxel_size: float = 1.0,
                      threshold: float = DEFAULT_THRESHOLD) -> dict:
    a = align(est, truth, voxel_size)
    return {
        "estimated_centers": np.asarray(est, dtype=float).tolist(),
        "true_centers": np.asarray(truth, dtype=float).tolist(),
        "voxel_size": float(voxel_size),
        **a.to_dict(),
        "threshold": float(threshold),
        "success": classify(a, threshold),
    }
