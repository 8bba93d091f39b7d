"""Grayscale and binary raster types with portable graymap (PGM) I/O.

Rasters carry a physical scale in micrometers per pixel. On disk they are
plain P2 or binary P5 graymaps; the scale travels in a header comment of
the form ``# pixel_size_um=<float>`` so files survive round trips through
ordinary image tools.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import atomic_write_bytes
from .errors import FormatError, ValidationError

PIXEL_SIZE_KEY = "pixel_size_um"

# Guard against absurd header dimensions before allocating.
MAX_PIXELS = 1 << 28


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GrayRaster:
    """Row-major intensity raster, values in [0, 65535].

    The array is frozen at construction; rasters are safe to share between
    threads.
    """

    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError("raster values must be a non-empty 2-D array")
        if values.dtype != np.uint16:
            if np.any((values < 0) | (values > 65535)):
                raise ValidationError("intensities must lie in [0, 65535]")
            values = values.astype(np.uint16)
        if not (float(self.pixel_size) > 0.0):
            raise ValidationError("pixel_size must be > 0")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryRaster:
    """Speckle bitmap: 1 marks a segmented feature pixel, 0 background.

    ``count`` caches the number of segmented pixels.
    """

    bits: np.ndarray
    pixel_size: float = 1.0
    count: int = field(init=False)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.size == 0:
            raise ValidationError("raster bits must be a non-empty 2-D array")
        if bits.dtype != np.bool_:
            bits = bits.astype(bool)
        if not (float(self.pixel_size) > 0.0):
            raise ValidationError("pixel_size must be > 0")
        object.__setattr__(self, "bits", _freeze(bits))
        object.__setattr__(self, "pixel_size", float(self.pixel_size))
        object.__setattr__(self, "count", int(np.count_nonzero(bits)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def as_u8(self) -> np.ndarray:
        """Zero-copy uint8 view (0/1) for the compiled kernels."""
        return self.bits.view(np.uint8)


class _TokenReader:
    """Whitespace/comment-aware tokenizer over PNM header bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.comments: list[bytes] = []

    def _skip_separators(self) -> None:
        data, n = self.data, len(self.data)
        while self.pos < n:
            c = self.data[self.pos]
            if c in b" \t\r\n\x0b\x0c":
                self.pos += 1
            elif c == ord("#"):
                end = data.find(b"\n", self.pos)
                end = n if end < 0 else end
                self.comments.append(data[self.pos + 1 : end].strip())
                self.pos = end
            else:
                return

    def token(self) -> bytes:
        self._skip_separators()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos] not in b" \t\r\n\x0b\x0c#":
            self.pos += 1
        if self.pos == start:
            raise FormatError("malformed header: unexpected end of file")
        return self.data[start : self.pos]

    def integer(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"malformed header: bad {what} {tok!r}") from None


def _pixel_size_from_comments(comments: list[bytes]) -> float | None:
    for raw in comments:
        text = raw.decode("ascii", "replace").strip()
        if text.startswith(PIXEL_SIZE_KEY):
            _, _, value = text.partition("=")
            try:
                size = float(value)
            except ValueError:
                raise FormatError(f"malformed {PIXEL_SIZE_KEY} comment: {text!r}") from None
            if not size > 0:
                raise FormatError(f"{PIXEL_SIZE_KEY} must be > 0, got {size}")
            return size
    return None


def read_raster(path: str | Path, pixel_size: float | None = None) -> GrayRaster:
    """Read a P2/P5 portable graymap.

    ``pixel_size`` overrides any ``# pixel_size_um=`` header comment; if
    neither is present the scale defaults to 1.0 with a warning.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not data:
        raise FormatError(f"malformed header: {path} is empty")
    reader = _TokenReader(data)
    magic = reader.token()
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"malformed header: not a portable graymap (magic {magic!r})")
    width = reader.integer("width")
    height = reader.integer("height")
    if width <= 0 or height <= 0 or width * height > MAX_PIXELS:
        raise FormatError(f"dimension overflow: {width} x {height}")
    maxval = reader.integer("maxval")
    if not 0 < maxval < 65536:
        raise FormatError(f"malformed header: maxval {maxval} outside [1, 65535]")

    if magic == b"P5":
        reader.pos += 1  # single whitespace byte after maxval
        wide = maxval > 255
        nbytes = width * height * (2 if wide else 1)
        raw = data[reader.pos : reader.pos + nbytes]
        if len(raw) < nbytes:
            raise FormatError("truncated pixel data")
        dtype = np.dtype(">u2") if wide else np.dtype(np.uint8)
        values = np.frombuffer(raw, dtype=dtype).astype(np.uint16)
    else:
        try:
            flat = np.array([reader.integer("sample") for _ in range(width * height)])
        except FormatError:
            raise FormatError("truncated pixel data") from None
        values = flat.astype(np.int64)
    if np.any(values > maxval) or np.any(values < 0):
        raise FormatError("sample value exceeds declared maxval")

    found = _pixel_size_from_comments(reader.comments)
    if pixel_size is None:
        pixel_size = found
    if pixel_size is None:
        warnings.warn(f"{path}: no pixel size metadata, defaulting to 1.0 um/px", stacklevel=2)
        pixel_size = 1.0
    return GrayRaster(values.reshape(height, width).astype(np.uint16), pixel_size)


def write_raster(raster: GrayRaster | BinaryRaster, path: str | Path, plain: bool = False) -> None:
    """Write a raster as a portable graymap (binary P5 unless ``plain``).

    Binary rasters are stored as 0/255 graymaps. The physical scale is
    embedded as a ``# pixel_size_um=`` comment and survives a round trip
    through :func:`read_raster` bit-exactly.
    """
    if isinstance(raster, BinaryRaster):
        values = np.where(raster.bits, np.uint16(255), np.uint16(0))
    else:
        values = raster.values
    maxval = 255 if values.max(initial=0) <= 255 else 65535
    header = (
        f"{'P2' if plain else 'P5'}\n"
        f"# {PIXEL_SIZE_KEY}={raster.pixel_size:.17g}\n"
        f"{values.shape[1]} {values.shape[0]}\n{maxval}\n"
    )
    if plain:
        body = "\n".join(" ".join(str(v) for v in row) for row in values) + "\n"
        payload = header.encode("ascii") + body.encode("ascii")
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        payload = header.encode("ascii") + values.astype(dtype).tobytes()
    atomic_write_bytes(path, payload)


def load_speckle(path: str | Path, pixel_size: float | None = None) -> BinaryRaster:
    """Read a graymap and binarize it: any nonzero intensity is segmented."""
    gray = read_raster(path, pixel_size)
    return BinaryRaster(gray.values > 0, gray.pixel_size)


def threshold(raster: GrayRaster, low: int, high: int, invert: bool = False) -> BinaryRaster:
    """Segment by intensity band: bit = (low <= value <= high) xor invert."""
    if low > high:
        raise ValidationError(f"threshold band empty: low {low} > high {high}")
    bits = (raster.values >= low) & (raster.values <= high)
    if invert:
        bits = ~bits
    if not bits.any():
        warnings.warn("threshold produced an empty speckle", stacklevel=2)
    return BinaryRaster(bits, raster.pixel_size)


def rescale_nearest(raster: BinaryRaster, target_pixel_size: float) -> BinaryRaster:
    """Resample to a new physical pixel size with nearest-neighbor lookup.

    Output dimensions are round(dim * pixel_size / target); each output
    pixel takes the input pixel nearest to its center, i.e. source index
    floor((i + 0.5) * target / source) clamped to bounds.
    """
    if not target_pixel_size > 0:
        raise ValidationError("target pixel size must be > 0")
    scale = target_pixel_size / raster.pixel_size
    out_w = int(round(raster.width / scale))
    out_h = int(round(raster.height / scale))
    if out_w <= 0 or out_h <= 0:
        raise ValidationError(
            f"rescale to {target_pixel_size} um/px collapses {raster.width}x{raster.height} to zero size"
        )
    cols = np.minimum((np.floor((np.arange(out_w) + 0.5) * scale)).astype(np.int64), raster.width - 1)
    rows = np.minimum((np.floor((np.arange(out_h) + 0.5) * scale)).astype(np.int64), raster.height - 1)
    return BinaryRaster(raster.bits[np.ix_(rows, cols)], target_pixel_size)


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 pixmap."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError("expected an (H, W, 3) color array")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 pixmap into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    reader = _TokenReader(data)
    if reader.token() != b"P6":
        raise FormatError("not a binary pixmap")
    width = reader.integer("width")
    height = reader.integer("height")
    maxval = reader.integer("maxval")
    if maxval != 255:
        raise FormatError("only maxval 255 pixmaps supported")
    reader.pos += 1
    raw = data[reader.pos : reader.pos + width * height * 3]
    if len(raw) < width * height * 3:
        raise FormatError("truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()
