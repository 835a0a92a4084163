"""Point-source models, rotations and deterministic random streams."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BOX_HALF_WIDTH = 0.5
MAX_REJECTION_DRAWS = 10**6


class InfeasibleModelError(ValueError):
    """Raised when rejection sampling cannot honor the requested separation."""


def _stream_key(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError("stream keys must be non-negative")
    return key


@dataclass(frozen=True)
class Rng:
    """Counter-style random stream: a master seed plus a tuple of stream keys.

    Every ``(seed, stream)`` pair maps to its own Philox generator, so draws
    never depend on the order in which tasks are scheduled.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def child(self, *keys: int | str) -> "Rng":
        return Rng(int(self.seed), self.stream + tuple(_stream_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng: Rng | np.random.Generator | int) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return Rng(int(rng)).generator()


@dataclass(frozen=True)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-10, rtol=0):
            raise ValueError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise ValueError("rotation matrix must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        c = 0.5 * (np.trace(self.matrix) - 1.0)
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T


def quaternion_to_matrix(q: Sequence[float] | np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion ``(w, x, y, z)``; normalizes ``q`` first.

    Accepts a single quaternion or an ``(n, 4)`` batch.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def sample_uniform_rotation(rng: Rng | np.random.Generator) -> Rotation:
    """Haar-distributed rotation from a normalized Gaussian quaternion."""
    q = as_generator(rng).standard_normal(4)
    return Rotation(quaternion_to_matrix(q))


def sample_uniform_rotations(n: int, rng: Rng | np.random.Generator) -> np.ndarray:
    """Batch version of :func:`sample_uniform_rotation`, returns ``(n, 3, 3)``."""
    q = as_generator(rng).standard_normal((n, 4))
    return quaternion_to_matrix(q)


@dataclass(frozen=True)
class PointSourceModel:
    """Sum of isotropic unit-integral Gaussian blobs inside the unit box.

    Coordinates are in box units, the box being ``[-0.5, 0.5]^3``.
    """

    centers: np.ndarray
    kernel_sigma: float
    amplitudes: np.ndarray | None = None
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        c = np.array(self.centers, dtype=float).reshape(-1, 3)
        if c.shape[0] < 1:
            raise ValueError("a model needs at least one source")
        if np.any(np.abs(c) > BOX_HALF_WIDTH + 1e-12):
            raise ValueError("every center must lie inside the box [-0.5, 0.5]^3")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        a = np.ones(c.shape[0]) if self.amplitudes is None else np.array(self.amplitudes, dtype=float)
        if a.shape != (c.shape[0],) or np.any(a <= 0):
            raise ValueError("amplitudes must be K positive numbers")
        c.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "kernel_sigma", float(self.kernel_sigma))

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.amplitudes.sum())

    def rotated(self, rot: Rotation | np.ndarray) -> "PointSourceModel":
        m = rot.matrix if isinstance(rot, Rotation) else np.asarray(rot, dtype=float)
        return PointSourceModel(self.centers @ m.T, self.kernel_sigma, self.amplitudes, self.seed)

    def density(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the 3D density at points ``x`` of shape ``(..., 3)``."""
        x = np.asarray(x, dtype=float)
        s2 = self.kernel_sigma**2
        d2 = np.sum((x[..., None, :] - self.centers) ** 2, axis=-1)
        norm = (2 * np.pi * s2) ** -1.5
        return norm * np.sum(self.amplitudes * np.exp(-0.5 * d2 / s2), axis=-1)

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "kernel_sigma": self.kernel_sigma,
            "amplitudes": self.amplitudes.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PointSourceModel":
        return cls(
            np.asarray(d["centers"], dtype=float),
            float(d["kernel_sigma"]),
            None if d.get("amplitudes") is None else np.asarray(d["amplitudes"], dtype=float),
            d.get("seed"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PointSourceModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def random_model(
    K: int,
    min_separation: float | None = None,
    kernel_sigma: float = 0.05,
    rng: Rng | np.random.Generator | int = 0,
    max_radius: float | None = None,
) -> PointSourceModel:
    """Draw ``K`` uniform centers in the box, conditioned on a minimum separation.

    Whole configurations are rejected until every pairwise distance is at least
    ``min_separation`` (default ``4 * kernel_sigma``). ``max_radius`` further
    restricts centers to a ball about the origin, which keeps every projection
    inside a smaller field of view.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if min_separation is None:
        min_separation = 4.0 * kernel_sigma
    if min_separation < 0:
        raise ValueError("min_separation must be non-negative")
    gen = as_generator(rng)
    seed = rng.seed if isinstance(rng, Rng) else (int(rng) if isinstance(rng, (int, np.integer)) else None)
    iu = np.triu_indices(K, 1)
    batch = max(1, 4096 // K)
    drawn = 0
    while drawn < MAX_REJECTION_DRAWS:
        n = min(batch, max(1, (MAX_REJECTION_DRAWS - drawn) // K))
        cfg = gen.uniform(-BOX_HALF_WIDTH, BOX_HALF_WIDTH, size=(n, K, 3))
        drawn += n * K
        ok = np.ones(n, dtype=bool)
        if max_radius is not None:
            ok &= np.all(np.linalg.norm(cfg, axis=-1) <= max_radius, axis=-1)
        if K > 1:
            d = np.linalg.norm(cfg[:, :, None, :] - cfg[:, None, :, :], axis=-1)
            ok &= np.all(d[:, iu[0], iu[1]] >= min_separation, axis=-1)
        hit = np.flatnonzero(ok)
        if hit.size:
            return PointSourceModel(cfg[hit[0]], kernel_sigma, seed=seed)
    raise InfeasibleModelError(
        f"no configuration of K={K} points with separation {min_separation} "
        f"found in {MAX_REJECTION_DRAWS} draws"
    )


def radial_and_pairwise_distances(model: PointSourceModel | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted radial distances and sorted pairwise-distance multiset."""
    c = model.centers if isinstance(model, PointSourceModel) else np.asarray(model, dtype=float)
    radial = np.sort(np.linalg.norm(c, axis=1))
    iu = np.triu_indices(c.shape[0], 1)
    pair = np.linalg.norm(c[iu[0]] - c[iu[1]], axis=1)
    return radial, np.sort(pair)
