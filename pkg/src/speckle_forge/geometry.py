"""Control meshes and the exhaustive affine prealignment search."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .raster import BinaryRaster
from .similarity import dice


@dataclass(frozen=True)
class ControlMesh:
    """Ordered row-major grid of 2-D control points (x, y) in pixels."""

    rows: int
    cols: int
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.shape != (self.rows * self.cols, 2):
            raise ValidationError(
                f"mesh needs {self.rows * self.cols} points, got {points.shape}"
            )
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def flatten(self) -> np.ndarray:
        """Lossless (2*rows*cols,) vector: x0, y0, x1, y1, ..."""
        return self.points.reshape(-1).copy()

    @classmethod
    def unflatten(cls, vector: np.ndarray, rows: int, cols: int) -> "ControlMesh":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (2 * rows * cols,):
            raise ValidationError(f"expected a {2 * rows * cols}-dimensional mesh vector")
        return cls(rows, cols, vector.reshape(-1, 2))


def regular_mesh(rows: int, cols: int, width: int, height: int) -> ControlMesh:
    """Evenly spaced mesh whose corner points sit on the raster corners."""
    if rows < 2 or cols < 2:
        raise ValidationError("mesh needs at least 2 rows and 2 cols")
    xs = np.linspace(0.0, width - 1.0, cols)
    ys = np.linspace(0.0, height - 1.0, rows)
    gx, gy = np.meshgrid(xs, ys)
    return ControlMesh(rows, cols, np.column_stack([gx.reshape(-1), gy.reshape(-1)]))


@dataclass(frozen=True)
class AffineParams:
    """Integer pixel translation plus rotation in degrees."""

    tx: int
    ty: int
    theta: float

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ValidationError("rotation angle must be finite")
        object.__setattr__(self, "tx", int(self.tx))
        object.__setattr__(self, "ty", int(self.ty))
        object.__setattr__(self, "theta", float(self.theta))


@dataclass(frozen=True)
class RangeSpec:
    """Inclusive lattice start..stop with positive step (the a:b:step CLI form)."""

    start: float
    stop: float
    step: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.stop) and np.isfinite(self.step)):
            raise ValidationError("range bounds must be finite")
        if self.step <= 0:
            raise ValidationError("range step must be > 0")
        if self.stop < self.start:
            raise ValidationError(f"empty range: {self.start}:{self.stop}:{self.step}")

    @classmethod
    def single(cls, value: float) -> "RangeSpec":
        return cls(value, value, 1.0)

    @classmethod
    def parse(cls, text: str) -> "RangeSpec":
        parts = text.split(":")
        try:
            if len(parts) == 1:
                return cls.single(float(parts[0]))
            if len(parts) == 3:
                return cls(float(parts[0]), float(parts[1]), float(parts[2]))
        except ValueError:
            pass
        raise ValidationError(f"bad range {text!r}: expected 'a:b:step' or a single value")

    def values(self) -> np.ndarray:
        count = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(count)


def pad_or_crop(raster: BinaryRaster, width: int, height: int) -> BinaryRaster:
    """Anchor at the top-left corner; pad with background or crop to size."""
    if raster.width == width and raster.height == height:
        return raster
    out = np.zeros((height, width), dtype=bool)
    h = min(height, raster.height)
    w = min(width, raster.width)
    out[:h, :w] = raster.bits[:h, :w]
    return BinaryRaster(out, raster.pixel_size)


def apply_affine(speckle: BinaryRaster, params: AffineParams) -> BinaryRaster:
    """Translate by (tx, ty) and rotate by theta about the raster center.

    Backward-sampled: each output pixel rotates by -theta about the center
    and shifts by (-tx, -ty) to find its nearest-neighbor source; samples
    falling outside the raster are background.
    """
    h, w = speckle.bits.shape
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    angle = np.radians(-params.theta)
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    xs = np.arange(w, dtype=np.float64) - cx
    ys = (np.arange(h, dtype=np.float64) - cy).reshape(-1, 1)
    sx = np.rint(cos_t * xs - sin_t * ys + cx - params.tx)
    sy = np.rint(sin_t * xs + cos_t * ys + cy - params.ty)
    valid = (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)
    out = np.zeros((h, w), dtype=bool)
    flat = speckle.bits.reshape(-1)
    out[valid] = flat[sy[valid].astype(np.int64) * w + sx[valid].astype(np.int64)]
    return BinaryRaster(out, speckle.pixel_size)


def grid_search_align(
    moving: BinaryRaster,
    fixed: BinaryRaster,
    tx_range: RangeSpec,
    ty_range: RangeSpec,
    theta_range: RangeSpec,
    threads: int = 1,
) -> tuple[AffineParams, float]:
    """Exhaustive search over the affine lattice; returns the best transform.

    Every (theta, ty, tx) combination is scored with Dice against ``fixed``
    and the first maximum in lexicographic (theta, ty, tx) scan order wins,
    so results do not depend on evaluation order or worker count.
    """
    if moving.bits.shape != fixed.bits.shape:
        moving = pad_or_crop(moving, fixed.width, fixed.height)
    for name, rng in (("tx", tx_range), ("ty", ty_range)):
        if not np.array_equal(rng.values(), np.rint(rng.values())):
            raise ValidationError(f"{name} range must be an integer pixel lattice")
    candidates = [
        AffineParams(int(round(tx)), int(round(ty)), float(theta))
        for theta in theta_range.values()
        for ty in ty_range.values()
        for tx in tx_range.values()
    ]
    if not candidates:
        raise ValidationError("empty alignment lattice")

    def score(params: AffineParams) -> float:
        return dice(apply_affine(moving, params), fixed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = np.fromiter(pool.map(score, candidates), dtype=np.float64, count=len(candidates))
    else:
        scores = np.fromiter(map(score, candidates), dtype=np.float64, count=len(candidates))
    best = int(np.argmax(scores))  # argmax takes the first maximum
    return candidates[best], float(scores[best])
