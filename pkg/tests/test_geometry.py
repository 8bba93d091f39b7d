import numpy as np
import pytest

from speckle_forge.errors import ValidationError
from speckle_forge.geometry import (
    AffineParams,
    ControlMesh,
    RangeSpec,
    apply_affine,
    grid_search_align,
    pad_or_crop,
    regular_mesh,
)
from speckle_forge.raster import BinaryRaster
from speckle_forge.similarity import dice


def test_regular_mesh_corners_anchor_to_raster():
    mesh = regular_mesh(2, 2, 200, 100)
    assert mesh.points.tolist() == [[0, 0], [199, 0], [0, 99], [199, 99]]


def test_regular_mesh_center_point():
    mesh = regular_mesh(3, 3, 101, 101)
    assert tuple(mesh.points[4]) == (50.0, 50.0)


def test_mesh_flattens_to_paper_dimension():
    mesh = regular_mesh(25, 25, 1500, 2000)
    assert mesh.flatten().shape == (1250,)


def test_flatten_unflatten_bijection(rng):
    points = rng.uniform(-50, 500, size=(12, 2))
    mesh = ControlMesh(3, 4, points)
    back = ControlMesh.unflatten(mesh.flatten(), 3, 4)
    assert np.array_equal(back.points, mesh.points)


def test_small_mesh_rejected():
    with pytest.raises(ValidationError):
        regular_mesh(1, 5, 10, 10)


def test_identity_affine_is_identity(rng):
    speckle = BinaryRaster(rng.random((33, 47)) < 0.3)
    out = apply_affine(speckle, AffineParams(0, 0, 0.0))
    assert np.array_equal(out.bits, speckle.bits)


def test_translation_moves_single_pixel():
    bits = np.zeros((32, 32), dtype=bool)
    bits[10, 10] = True  # (x=10, y=10)
    out = apply_affine(BinaryRaster(bits), AffineParams(3, 0, 0.0))
    assert out.count == 1
    assert out.bits[10, 13]


def test_rotation_fixes_center_pixel():
    bits = np.zeros((21, 21), dtype=bool)
    bits[10, 10] = True
    out = apply_affine(BinaryRaster(bits), AffineParams(0, 0, 90.0))
    assert out.bits[10, 10]


def test_rotation_quarter_turn_moves_off_axis_pixel():
    bits = np.zeros((21, 21), dtype=bool)
    bits[10, 15] = True  # 5 px right of center
    out = apply_affine(BinaryRaster(bits), AffineParams(0, 0, 90.0))
    assert out.count == 1
    # +90 deg maps the (+5, 0) off-center pixel to (0, +5) off-center
    assert out.bits[15, 10]


def test_grid_search_recovers_identity(rng):
    speckle = BinaryRaster(rng.random((40, 40)) < 0.3)
    zero = RangeSpec.single(0)
    params, score = grid_search_align(speckle, speckle, zero, zero, zero)
    assert (params.tx, params.ty, params.theta) == (0, 0, 0.0)
    assert score == 1.0


def test_grid_search_recovers_known_shift(rng):
    bits = np.zeros((48, 48), dtype=bool)
    bits[8:-8, 8:-8] = rng.random((32, 32)) < 0.25  # margin so the shift loses nothing
    fixed = BinaryRaster(bits)
    moving = apply_affine(fixed, AffineParams(3, -2, 0.0))
    params, score = grid_search_align(
        moving, fixed, RangeSpec(-5, 5, 1), RangeSpec(-5, 5, 1), RangeSpec.single(0.0)
    )
    assert (params.tx, params.ty) == (-3, 2)
    assert score == 1.0


def test_grid_search_singleton_lattice_scores_raw_dice(rng):
    moving = BinaryRaster(rng.random((30, 30)) < 0.4)
    fixed = BinaryRaster(rng.random((30, 30)) < 0.4)
    zero = RangeSpec.single(0)
    params, score = grid_search_align(moving, fixed, zero, zero, zero)
    assert (params.tx, params.ty, params.theta) == (0, 0, 0.0)
    assert score == dice(moving, fixed)


def test_grid_search_beats_identity_when_identity_included(rng):
    moving = BinaryRaster(rng.random((36, 36)) < 0.3)
    fixed = BinaryRaster(rng.random((36, 36)) < 0.3)
    _, score = grid_search_align(
        moving, fixed, RangeSpec(-3, 3, 1), RangeSpec(-3, 3, 1), RangeSpec.single(0.0)
    )
    assert score >= dice(moving, fixed)


def test_grid_search_deterministic_across_thread_counts(rng):
    moving = BinaryRaster(rng.random((40, 40)) < 0.3)
    fixed = BinaryRaster(rng.random((40, 40)) < 0.3)
    ranges = (RangeSpec(-4, 4, 1), RangeSpec(-4, 4, 1), RangeSpec(-2, 2, 1))
    serial = grid_search_align(moving, fixed, *ranges, threads=1)
    parallel = grid_search_align(moving, fixed, *ranges, threads=4)
    assert serial == parallel


def test_grid_search_pads_smaller_moving(rng):
    fixed = BinaryRaster(rng.random((40, 40)) < 0.3)
    moving = BinaryRaster(fixed.bits[:30, :35])
    zero = RangeSpec.single(0)
    _, score = grid_search_align(moving, fixed, zero, zero, zero)
    assert 0.0 < score <= 1.0


def test_fractional_translation_lattice_rejected(rng):
    speckle = BinaryRaster(rng.random((10, 10)) < 0.5)
    with pytest.raises(ValidationError, match="integer"):
        grid_search_align(
            speckle, speckle, RangeSpec(-1, 1, 0.5), RangeSpec.single(0), RangeSpec.single(0)
        )


def test_range_spec_parse_and_values():
    assert RangeSpec.parse("-5:5:1").values().tolist() == list(range(-5, 6))
    assert RangeSpec.parse("2").values().tolist() == [2.0]
    assert RangeSpec.parse("0:1:0.25").values().tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValidationError):
        RangeSpec.parse("5:1:1")
    with pytest.raises(ValidationError):
        RangeSpec.parse("1:2:0")
    with pytest.raises(ValidationError):
        RangeSpec.parse("a:b:c")


def test_pad_or_crop(rng):
    speckle = BinaryRaster(rng.random((10, 12)) < 0.5)
    padded = pad_or_crop(speckle, 15, 14)
    assert padded.bits.shape == (14, 15)
    assert np.array_equal(padded.bits[:10, :12], speckle.bits)
    assert not padded.bits[10:, :].any() and not padded.bits[:, 12:].any()
    cropped = pad_or_crop(speckle, 5, 6)
    assert np.array_equal(cropped.bits, speckle.bits[:6, :5])
