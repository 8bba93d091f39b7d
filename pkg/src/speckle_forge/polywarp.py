"""Bivariate polynomial warps: mesh-pair least-squares fitting and resampling.

A warp of degree P maps (x, y) to (x', y') through two polynomials sharing
a fixed monomial order: total degree n = 0..P, and within each n the term
x^k y^(n-k) for k = 0..n. Fitting solves the two linear systems on a shared
design matrix built from the source points, with coordinates pre-normalized
to [-1, 1] so degree-3 monomials on thousand-pixel domains stay well
conditioned; the solved coefficients are composed back to raw pixel space.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from . import _kernels
from ._util import atomic_write_text
from .errors import FormatError, ValidationError
from .raster import BinaryRaster


def monomial_exponents(degree: int) -> list[tuple[int, int]]:
    """(k_x, k_y) exponent pairs in the fixed monomial order."""
    return [(k, n - k) for n in range(degree + 1) for k in range(n + 1)]


def coefficient_count(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class PolyWarp:
    """Degree-P coordinate map with coefficient lists cx (for x') and cy (for y')."""

    degree: int
    cx: np.ndarray
    cy: np.ndarray

    def __post_init__(self):
        if self.degree < 1:
            raise ValidationError("polynomial degree must be >= 1")
        expected = coefficient_count(self.degree)
        cx = np.asarray(self.cx, dtype=np.float64)
        cy = np.asarray(self.cy, dtype=np.float64)
        if cx.shape != (expected,) or cy.shape != (expected,):
            raise ValidationError(
                f"degree {self.degree} warp needs {expected} coefficients per axis"
            )
        if not (np.isfinite(cx).all() and np.isfinite(cy).all()):
            raise ValidationError("warp coefficients must be finite")
        for name, arr in (("cx", cx), ("cy", cy)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, degree: int = 1) -> "PolyWarp":
        return cls.translation(0.0, 0.0, degree)

    @classmethod
    def translation(cls, dx: float, dy: float, degree: int = 1) -> "PolyWarp":
        n = coefficient_count(degree)
        cx = np.zeros(n)
        cy = np.zeros(n)
        cx[0], cy[0] = dx, dy
        cx[2] = 1.0  # x term: n=1, k=1
        cy[1] = 1.0  # y term: n=1, k=0
        return cls(degree, cx, cy)

    def eval(self, x, y):
        """Evaluate both polynomials at (x, y); accepts scalars or arrays."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out_x = np.zeros(np.broadcast(x, y).shape)
        out_y = np.zeros_like(out_x)
        for (kx, ky), ax, ay in zip(monomial_exponents(self.degree), self.cx, self.cy):
            term = x**kx * y**ky
            out_x += ax * term
            out_y += ay * term
        if out_x.ndim == 0:
            return float(out_x), float(out_y)
        return out_x, out_y

    def coeff_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """(P+1)x(P+1) matrices M[k, j] = coefficient of x^k y^j, kernel layout."""
        mx = np.zeros((self.degree + 1, self.degree + 1))
        my = np.zeros_like(mx)
        for (kx, ky), ax, ay in zip(monomial_exponents(self.degree), self.cx, self.cy):
            mx[kx, ky] = ax
            my[kx, ky] = ay
        return mx, my


def _affine_expansion(scale: float, offset: float, degree: int) -> np.ndarray:
    """E[k, i] with (scale*x + offset)^k = sum_i E[k, i] x^i."""
    expansion = np.zeros((degree + 1, degree + 1))
    for k in range(degree + 1):
        for i in range(k + 1):
            expansion[k, i] = comb(k, i) * scale**i * offset ** (k - i)
    return expansion


def _normalizer(values: np.ndarray) -> tuple[float, float]:
    """scale, offset mapping [min, max] onto [-1, 1] (identity-centered if degenerate)."""
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        return 2.0 / (hi - lo), -(hi + lo) / (hi - lo)
    return 1.0, -lo


class MeshFitter:
    """Least-squares warp solver for repeated fits from one source mesh.

    The design matrix depends only on the source points, so its SVD is
    factored once; each fit is then two small matrix products. This is the
    path the optimizer hits once per candidate.
    """

    def __init__(self, source_points, degree: int, rcond: float = 1e-10):
        points = _as_points(source_points)
        terms = coefficient_count(degree)
        if len(points) < terms:
            raise ValidationError(
                f"underdetermined fit: {len(points)} points for {terms} coefficients"
            )
        self.degree = degree
        self._n_points = len(points)
        ax, bx = _normalizer(points[:, 0])
        ay, by = _normalizer(points[:, 1])
        u = ax * points[:, 0] + bx
        v = ay * points[:, 1] + by
        design = np.column_stack([u**kx * v**ky for kx, ky in monomial_exponents(degree)])
        left, sing, right_t = np.linalg.svd(design, full_matrices=False)
        rank = int(np.count_nonzero(sing > rcond * sing[0]))
        if rank < terms:
            raise ValidationError(
                f"rank-deficient mesh: design matrix rank {rank} < {terms} "
                "(collinear or coincident control points)"
            )
        self._pinv = (right_t.T / sing) @ left.T
        self._expand_x = _affine_expansion(ax, bx, degree)
        self._expand_y = _affine_expansion(ay, by, degree)

    def fit(self, target_points) -> PolyWarp:
        targets = _as_points(target_points)
        if len(targets) != self._n_points:
            raise ValidationError("source and target meshes differ in point count")
        normalized = self._pinv @ targets  # (terms, 2)
        exponents = monomial_exponents(self.degree)
        flat = []
        for axis in (0, 1):
            grid = np.zeros((self.degree + 1, self.degree + 1))
            for (kx, ky), c in zip(exponents, normalized[:, axis]):
                grid[kx, ky] = c
            raw = self._expand_x.T @ grid @ self._expand_y
            flat.append(np.array([raw[kx, ky] for kx, ky in exponents]))
        return PolyWarp(self.degree, flat[0], flat[1])


def _as_points(points) -> np.ndarray:
    points = getattr(points, "points", points)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError("expected an (N, 2) array of control points")
    if not np.isfinite(points).all():
        raise ValidationError("control points must be finite")
    return points


def fit(source, target, degree: int) -> PolyWarp:
    """Least-squares warp minimizing sum_i ||target_i - f(source_i)||^2."""
    return MeshFitter(source, degree).fit(target)


def warp_raster(speckle: BinaryRaster, warp: PolyWarp) -> BinaryRaster:
    """Backward-resample a speckle: output(x, y) = input(round(warp(x, y))).

    The warp argument plays the backward role: it maps output pixel
    coordinates to input sample positions. Out-of-bounds samples are
    background, so dimensions are preserved and no holes appear.
    """
    mx, my = warp.coeff_matrices()
    idx = _kernels.backward_indices(speckle.height, speckle.width, mx, my)
    flat = speckle.as_u8().reshape(-1)
    valid = idx >= 0
    out = np.zeros(idx.shape, dtype=np.uint8)
    out[valid] = flat[idx[valid]]
    return BinaryRaster(out.astype(bool), speckle.pixel_size)


def warp_dice(speckle: BinaryRaster, reference: BinaryRaster, warp: PolyWarp) -> float:
    """Dice score of the warped speckle against a fixed reference.

    Fused fast path: equals dice(warp_raster(speckle, warp), reference)
    exactly, without materializing the warped raster.
    """
    if speckle.bits.shape != reference.bits.shape:
        raise ValidationError("speckle and reference dimensions differ")
    mx, my = warp.coeff_matrices()
    overlap, count = _kernels.warp_score(speckle.as_u8(), reference.as_u8(), mx, my)
    total = count + reference.count
    if total == 0:
        raise ValidationError("both speckles are empty: Dice score undefined")
    return 2.0 * overlap / total


def save_warp(warp: PolyWarp, path: str | Path) -> None:
    """Serialize as plain text: degree plus both coefficient lists, 17 sig digits."""
    lines = [
        "# speckle-forge warp v1",
        f"degree {warp.degree}",
        "cx " + " ".join(f"{c:.17g}" for c in warp.cx),
        "cy " + " ".join(f"{c:.17g}" for c in warp.cy),
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_warp(path: str | Path) -> PolyWarp:
    fields: dict[str, list[str]] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        fields[key] = rest
    try:
        degree = int(fields["degree"][0])
        cx = np.array([float(v) for v in fields["cx"]])
        cy = np.array([float(v) for v in fields["cy"]])
    except (KeyError, IndexError, ValueError):
        raise FormatError(f"{path}: not a valid warp file") from None
    return PolyWarp(degree, cx, cy)
