"""Speckle similarity: the Dice overlap score used as the optimization fitness."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .raster import BinaryRaster


def dice(a: BinaryRaster, b: BinaryRaster) -> float:
    """Dice overlap of two speckles: 2 |A and B| / (|A| + |B|).

    Ranges from 0.0 (no overlapping segmented pixels) to 1.0 (perfect
    matching) and is symmetric in its arguments. Rejects the 0/0 case:
    scoring two empty speckles is undefined, and treating it as a match
    would let a warp that erases every pixel win the optimization.
    """
    if a.bits.shape != b.bits.shape:
        raise ValidationError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    total = a.count + b.count
    if total == 0:
        raise ValidationError("both speckles are empty: Dice score undefined")
    overlap = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * overlap / total
