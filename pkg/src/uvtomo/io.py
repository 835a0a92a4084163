"""Binary stack and volume files, feature CSVs and JSON helpers.

Stack files (``UVTS``) hold a little-endian header followed by ``L`` frames of
``(2M+1)^2`` float32 pixels with ``u`` varying fastest. Volume files (``UVTV``)
use the same layout for a ``(2M_r+1)^3`` density with the x index fastest.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .forward import ProjectionStack

STACK_MAGIC = b"UVTS"
VOLUME_MAGIC = b"UVTV"
FORMAT_VERSION = 1
STACK_HEADER = struct.Struct("<4sIIIddQ")
VOLUME_HEADER = struct.Struct("<4sIId")
NO_SEED = 2**64 - 1


class FormatError(OSError):
    """A file does not follow the expected binary or text layout."""


def _seed_field(seed: int | None) -> int:
    return NO_SEED if seed is None else int(seed)


def write_stack(path: str | Path, stack: ProjectionStack) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(STACK_HEADER.pack(
            STACK_MAGIC, FORMAT_VERSION, stack.L, stack.M, float(stack.delta),
            float(stack.noise_sigma), _seed_field(stack.seed),
        ))
        # frames stored as [v][u] so u is the fastest index
        fh.write(np.ascontiguousarray(stack.images.transpose(0, 2, 1), dtype="<f4").tobytes())


def read_stack_header(path: str | Path) -> dict:
    path = Path(path)
    with path.open("rb") as fh:
        raw = fh.read(STACK_HEADER.size)
    if len(raw) < STACK_HEADER.size:
        raise FormatError(f"{path}: truncated stack header")
    magic, version, L, M, delta, sigma, seed = STACK_HEADER.unpack(raw)
    if magic != STACK_MAGIC:
        raise FormatError(f"{path}: not a stack file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported stack version {version}")
    return {"L": L, "M": M, "delta": delta, "noise_sigma": sigma, "seed": None if seed == NO_SEED else seed}


def iter_stack(path: str | Path, chunk: int = 1024) -> Iterator[ProjectionStack]:
    """Read a stack file in pieces of at most ``chunk`` frames."""
    path = Path(path)
    h = read_stack_header(path)
    n = 2 * h["M"] + 1
    frame = n * n * 4
    expected = STACK_HEADER.size + h["L"] * frame
    if path.stat().st_size != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {h['L']} frames, found {path.stat().st_size}")
    if h["L"] == 0:
        # an empty file still carries its geometry
        yield ProjectionStack(np.zeros((0, n, n)), h["delta"], h["noise_sigma"], seed=h["seed"])
        return
    with path.open("rb") as fh:
        fh.seek(STACK_HEADER.size)
        left = h["L"]
        while left > 0:
            m = min(chunk, left)
            data = np.frombuffer(fh.read(m * frame), dtype="<f4").reshape(m, n, n)
            left -= m
            yield ProjectionStack(data.transpose(0, 2, 1).astype(float), h["delta"], h["noise_sigma"], seed=h["seed"])


def read_stack(path: str | Path) -> ProjectionStack:
    h = read_stack_header(path)
    n = 2 * h["M"] + 1
    parts = [s.images for s in iter_stack(path)]
    images = np.concatenate(parts) if parts else np.zeros((0, n, n))
    return ProjectionStack(images, h["delta"], h["noise_sigma"], seed=h["seed"])


def write_frame_csv(path: str | Path, pixels: np.ndarray, delta: float) -> None:
    """One frame as ``u, v, x, y, value`` rows."""
    M = (pixels.shape[0] - 1) // 2
    rows = (
        (u, v, u * delta, v * delta, repr(float(pixels[u + M, v + M])))
        for v in range(-M, M + 1) for u in range(-M, M + 1)
    )
    _write_csv(path, ("u", "v", "x", "y", "value"), rows)


def write_volume(path: str | Path, density: np.ndarray, half_width: int, voxel_size: float) -> None:
    n = 2 * half_width + 1
    vol = np.asarray(density, dtype=float).reshape(n, n, n)
    with Path(path).open("wb") as fh:
        fh.write(VOLUME_HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, half_width, float(voxel_size)))
        fh.write(np.ascontiguousarray(vol.transpose(2, 1, 0), dtype="<f4").tobytes())


def read_volume(path: str | Path) -> tuple[np.ndarray, int, float]:
    """Return ``(density (n, n, n) indexed [x, y, z], half_width, voxel_size)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < VOLUME_HEADER.size:
        raise FormatError(f"{path}: truncated volume header")
    magic, version, hw, vs = VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC or version != FORMAT_VERSION:
        raise FormatError(f"{path}: not a version-{FORMAT_VERSION} volume file")
    n = 2 * hw + 1
    body = raw[VOLUME_HEADER.size:]
    if len(body) != 4 * n**3:
        raise FormatError(f"{path}: expected {4 * n**3} data bytes, found {len(body)}")
    vol = np.frombuffer(body, dtype="<f4").reshape(n, n, n).transpose(2, 1, 0).astype(float)
    return vol, hw, vs


# ---------------------------------------------------------------------------
# text formats


def _write_csv(path: str | Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_columns(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    """Write equal-length arrays as CSV columns with round-trip float formatting."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("columns must have equal length")
    rows = ([_fmt(a[i]) if a.dtype.kind == "f" else str(a[i]) for a in arrays] for i in range(arrays[0].size))
    _write_csv(path, names, rows)


def read_columns(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        rows = list(r)
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric or ragged CSV ({exc})") from None
    return {name: data[:, i] for i, name in enumerate(header)}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(o):
    # JSON has no infinities; spell them as strings
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    return o


def dumps(obj) -> str:
    return json.dumps(_finite(json.loads(json.dumps(obj, default=_json_default))), indent=2, sort_keys=True) + "\n"


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path: str | Path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
