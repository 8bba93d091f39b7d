"""EBSD map data model, TSL-style column text I/O, speckle extraction, regeneration.

Maps are square-grid only. The text layout mirrors the common TSL format:
'#'-prefixed header lines carrying GRID/XSTEP/NCOLS_ODD/NROWS, then one
whitespace-separated record per line: phi1 Phi phi2 x y iq ci phase.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from ._util import atomic_write_text
from .errors import FormatError, ValidationError
from .polywarp import PolyWarp
from .raster import BinaryRaster

_RECORD_COLUMNS = 8


@dataclass(frozen=True)
class EbsdRecord:
    """One grid cell: Euler angles (radians), image quality, confidence, phase id."""

    phi1: float
    Phi: float
    phi2: float
    iq: float
    ci: float
    phase: int


ZERO_RECORD = EbsdRecord(0.0, 0.0, 0.0, 0.0, 0.0, 0)


@dataclass(frozen=True)
class EbsdMap:
    """Square-grid EBSD map stored as per-field arrays of shape (rows, cols)."""

    step: float
    phi1: np.ndarray
    Phi: np.ndarray
    phi2: np.ndarray
    iq: np.ndarray
    ci: np.ndarray
    phase: np.ndarray
    header: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.step > 0:
            raise ValidationError("grid step must be > 0")
        shape = self.phi1.shape
        if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
            raise ValidationError("map fields must be non-empty 2-D arrays")
        for name in ("phi1", "Phi", "phi2", "iq", "ci", "phase"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError("map fields must share one shape")
            arr = np.ascontiguousarray(arr, dtype=np.int32 if name == "phase" else np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def rows(self) -> int:
        return self.phi1.shape[0]

    @property
    def cols(self) -> int:
        return self.phi1.shape[1]

    def record(self, row: int, col: int) -> EbsdRecord:
        return EbsdRecord(
            float(self.phi1[row, col]),
            float(self.Phi[row, col]),
            float(self.phi2[row, col]),
            float(self.iq[row, col]),
            float(self.ci[row, col]),
            int(self.phase[row, col]),
        )

    def default_header(self) -> tuple[str, ...]:
        return (
            "# GRID: SqrGrid",
            f"# XSTEP: {self.step:.6f}",
            f"# YSTEP: {self.step:.6f}",
            f"# NCOLS_ODD: {self.cols}",
            f"# NCOLS_EVEN: {self.cols}",
            f"# NROWS: {self.rows}",
        )


def read_ebsd(path: str | Path) -> EbsdMap:
    """Parse a square-grid EBSD text map; hexagonal grids are rejected."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    header: list[str] = []
    meta: dict[str, str] = {}
    body: list[str] = []
    for line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            header.append(stripped)
            match = re.match(r"#\s*([A-Za-z_]+):\s*(.+)$", stripped)
            if match:
                meta[match.group(1).upper()] = match.group(2).strip()
        else:
            body.append(stripped)

    grid = meta.get("GRID")
    if grid is None:
        raise FormatError("missing '# GRID:' header")
    if grid.lower() != "sqrgrid":
        raise FormatError(f"only square grids supported, got GRID: {grid}")
    try:
        step = float(meta["XSTEP"])
        cols = int(meta["NCOLS_ODD"])
        rows = int(meta["NROWS"])
    except KeyError as exc:
        raise FormatError(f"missing required header field {exc}") from None
    except ValueError as exc:
        raise FormatError(f"bad header value: {exc}") from None
    if step <= 0 or cols < 1 or rows < 1:
        raise FormatError("non-positive grid geometry in header")
    if len(body) != rows * cols:
        raise FormatError(f"expected {rows * cols} records, found {len(body)}")

    try:
        table = np.array(
            [[float(tok) for tok in line.split()[:_RECORD_COLUMNS]] for line in body]
        )
    except ValueError:
        raise FormatError("non-numeric record field") from None
    if table.shape[1] != _RECORD_COLUMNS:
        raise FormatError(f"records need {_RECORD_COLUMNS} columns")
    if not np.isfinite(table[:, :3]).all():
        raise FormatError("non-finite Euler angle")

    # file order is row-major; cross-check the coordinate columns
    expect_x = np.tile(np.arange(cols), rows) * step
    expect_y = np.repeat(np.arange(rows), cols) * step
    if np.max(np.abs(table[:, 3] - expect_x)) > 1e-3 * step or np.max(
        np.abs(table[:, 4] - expect_y)
    ) > 1e-3 * step:
        raise FormatError("x/y columns disagree with the declared grid")

    shape = (rows, cols)
    return EbsdMap(
        step=step,
        phi1=table[:, 0].reshape(shape),
        Phi=table[:, 1].reshape(shape),
        phi2=table[:, 2].reshape(shape),
        iq=table[:, 5].reshape(shape),
        ci=table[:, 6].reshape(shape),
        phase=table[:, 7].astype(np.int32).reshape(shape),
        header=tuple(header),
    )


def write_ebsd(ebsd: EbsdMap, path: str | Path, provenance: str | None = None) -> None:
    """Write the map, preserving its header and optionally appending provenance."""
    header = list(ebsd.header) if ebsd.header else list(ebsd.default_header())
    if provenance:
        header.append(f"# speckle-forge: {provenance}")
    out = []
    step = ebsd.step
    for r in range(ebsd.rows):
        for c in range(ebsd.cols):
            out.append(
                f"{ebsd.phi1[r, c]:.7f} {ebsd.Phi[r, c]:.7f} {ebsd.phi2[r, c]:.7f} "
                f"{c * step:.6f} {r * step:.6f} "
                f"{ebsd.iq[r, c]:.7f} {ebsd.ci[r, c]:.7f} {ebsd.phase[r, c]}"
            )
    atomic_write_text(path, "\n".join(header + out) + "\n")


@dataclass(frozen=True)
class SpeckleRule:
    """Cell selector: phase equality or a ci/iq below-threshold test."""

    field: str  # "phase" | "ci" | "iq"
    value: float

    _FIELDS = ("phase", "ci", "iq")

    def __post_init__(self):
        if self.field not in self._FIELDS:
            raise ValidationError(f"unknown rule field {self.field!r}")

    @classmethod
    def parse(cls, text: str) -> "SpeckleRule":
        match = re.fullmatch(r"\s*(phase)\s*=\s*(-?\d+)\s*", text)
        if match:
            return cls("phase", float(match.group(2)))
        match = re.fullmatch(r"\s*(ci|iq)\s*<\s*([-+0-9.eE]+)\s*", text)
        if match:
            return cls(match.group(1), float(match.group(2)))
        raise ValidationError(f"bad speckle rule {text!r}: use phase=N, ci<T, or iq<T")

    def mask(self, ebsd: EbsdMap) -> np.ndarray:
        if self.field == "phase":
            return ebsd.phase == int(self.value)
        return getattr(ebsd, self.field) < self.value


def ebsd_speckle(ebsd: EbsdMap, rule: SpeckleRule) -> BinaryRaster:
    """One bit per grid cell under the selection rule; pixel size = grid step."""
    bits = rule.mask(ebsd)
    if not bits.any():
        raise ValidationError(f"rule {rule.field} selects zero cells")
    return BinaryRaster(bits, ebsd.step)


def regenerate(
    ebsd: EbsdMap,
    warp: PolyWarp,
    phases: BinaryRaster,
    precipitate_phase: int = 2,
    matrix_phase: int = 1,
) -> EbsdMap:
    """Build the corrected map on the original grid.

    Each output cell backward-samples the source record nearest to
    warp(x, y) — categorical resampling, no blending, same direction
    convention as raster warping. Cells mapped off-grid get the zero
    record (Euler (0,0,0), ci 0). Phase ids are then overwritten from the
    reference speckle: set bits become ``precipitate_phase``, clear bits
    ``matrix_phase``.
    """
    if phases.bits.shape != ebsd.phi1.shape:
        raise ValidationError(
            f"phase raster {phases.width}x{phases.height} does not match "
            f"map grid {ebsd.cols}x{ebsd.rows}"
        )
    mx, my = warp.coeff_matrices()
    idx = _kernels.backward_indices(ebsd.rows, ebsd.cols, mx, my)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)

    def gather(arr: np.ndarray) -> np.ndarray:
        return np.where(valid, arr.reshape(-1)[safe], 0)

    return EbsdMap(
        step=ebsd.step,
        phi1=gather(ebsd.phi1),
        Phi=gather(ebsd.Phi),
        phi2=gather(ebsd.phi2),
        iq=gather(ebsd.iq),
        ci=gather(ebsd.ci),
        phase=np.where(phases.bits, np.int32(precipitate_phase), np.int32(matrix_phase)),
        header=ebsd.header,
    )
