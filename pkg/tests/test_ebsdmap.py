import numpy as np
import pytest

from speckle_forge.errors import FormatError, ValidationError
from speckle_forge.ebsdmap import (
    EbsdMap,
    SpeckleRule,
    ebsd_speckle,
    read_ebsd,
    regenerate,
    write_ebsd,
)
from speckle_forge.polywarp import PolyWarp
from speckle_forge.raster import BinaryRaster


def _map_text(rows=2, cols=2, step=0.1, grid="SqrGrid", records=None):
    header = [
        f"# GRID: {grid}",
        f"# XSTEP: {step}",
        f"# YSTEP: {step}",
        f"# NCOLS_ODD: {cols}",
        f"# NCOLS_EVEN: {cols}",
        f"# NROWS: {rows}",
    ]
    if records is None:
        records = []
        value = 0.1
        for r in range(rows):
            for c in range(cols):
                records.append(
                    f"{value:.4f} {value + 0.2:.4f} {value + 0.4:.4f} "
                    f"{c * step:.4f} {r * step:.4f} {100 + r + c} 0.9 {1 + (r + c) % 2}"
                )
                value += 0.05
    return "\n".join(header + records) + "\n"


def _random_map(rng, rows=8, cols=10, step=0.25) -> EbsdMap:
    return EbsdMap(
        step=step,
        phi1=rng.uniform(0, 2 * np.pi, (rows, cols)),
        Phi=rng.uniform(0, np.pi, (rows, cols)),
        phi2=rng.uniform(0, 2 * np.pi, (rows, cols)),
        iq=rng.uniform(0, 1000, (rows, cols)),
        ci=rng.uniform(-1, 1, (rows, cols)),
        phase=rng.integers(1, 3, (rows, cols)).astype(np.int32),
    )


def test_small_map_parses(tmp_path):
    path = tmp_path / "m.ang"
    path.write_text(_map_text())
    ebsd = read_ebsd(path)
    assert (ebsd.rows, ebsd.cols) == (2, 2)
    assert ebsd.step == 0.1
    assert ebsd.record(0, 0).phi1 == pytest.approx(0.1)
    assert ebsd.record(1, 1).phase in (1, 2)


def test_hex_grid_rejected(tmp_path):
    path = tmp_path / "hex.ang"
    path.write_text(_map_text(grid="HexGrid"))
    with pytest.raises(FormatError, match="square"):
        read_ebsd(path)


def test_missing_header_field_rejected(tmp_path):
    text = "\n".join(
        line for line in _map_text().splitlines() if not line.startswith("# NROWS")
    )
    path = tmp_path / "m.ang"
    path.write_text(text + "\n")
    with pytest.raises(FormatError, match="NROWS"):
        read_ebsd(path)


def test_record_count_mismatch_rejected(tmp_path):
    lines = _map_text().splitlines()
    path = tmp_path / "m.ang"
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match="records"):
        read_ebsd(path)


def test_grid_coordinate_mismatch_rejected(tmp_path):
    bad = _map_text().replace("0.1000 0.0000 101", "0.3000 0.0000 101")
    path = tmp_path / "m.ang"
    path.write_text(bad)
    with pytest.raises(FormatError, match="grid"):
        read_ebsd(path)


def test_write_read_round_trip(tmp_path, rng):
    ebsd = _random_map(rng)
    path = tmp_path / "rt.ang"
    write_ebsd(ebsd, path)
    back = read_ebsd(path)
    for name in ("phi1", "Phi", "phi2", "iq", "ci"):
        assert np.allclose(getattr(back, name), getattr(ebsd, name), atol=1e-6)
    assert np.array_equal(back.phase, ebsd.phase)
    assert back.step == ebsd.step


def test_provenance_comment_appended(tmp_path, rng):
    path = tmp_path / "p.ang"
    write_ebsd(_random_map(rng), path, provenance="version=0.1.0 score=0.5")
    header = [line for line in path.read_text().splitlines() if line.startswith("#")]
    assert any("speckle-forge" in line and "score=0.5" in line for line in header)
    read_ebsd(path)  # still parseable


def test_phase_rule_selects_single_cell(tmp_path):
    records = [
        "0 0 0 0.0 0.0 1 0.9 1",
        "0 0 0 0.1 0.0 1 0.9 1",
        "0 0 0 0.0 0.1 1 0.9 2",
        "0 0 0 0.1 0.1 1 0.9 1",
    ]
    path = tmp_path / "m.ang"
    path.write_text(_map_text(records=records))
    speckle = ebsd_speckle(read_ebsd(path), SpeckleRule.parse("phase=2"))
    assert speckle.count == 1
    assert speckle.bits[1, 0]
    assert speckle.pixel_size == 0.1


def test_empty_rule_rejected(rng):
    ebsd = _random_map(rng)
    high_ci = EbsdMap(
        step=ebsd.step,
        phi1=ebsd.phi1,
        Phi=ebsd.Phi,
        phi2=ebsd.phi2,
        iq=ebsd.iq,
        ci=np.ones_like(ebsd.ci),
        phase=ebsd.phase,
    )
    with pytest.raises(ValidationError, match="zero cells"):
        ebsd_speckle(high_ci, SpeckleRule.parse("ci<0.1"))


def test_iq_rule_matches_brute_force(rng):
    ebsd = _random_map(rng)
    thresholdv = 420.0
    speckle = ebsd_speckle(ebsd, SpeckleRule.parse(f"iq<{thresholdv}"))
    for r in range(ebsd.rows):
        for c in range(ebsd.cols):
            assert speckle.bits[r, c] == (ebsd.iq[r, c] < thresholdv)


def test_rule_parse_rejects_garbage():
    for bad in ("phase<2", "ci=0.1", "iq>5", "nonsense"):
        with pytest.raises(ValidationError):
            SpeckleRule.parse(bad)


def test_regenerate_identity_preserves_records(rng):
    ebsd = _random_map(rng)
    phases = BinaryRaster(np.zeros((ebsd.rows, ebsd.cols), dtype=bool), ebsd.step)
    out = regenerate(ebsd, PolyWarp.identity(2), phases, precipitate_phase=5, matrix_phase=3)
    for name in ("phi1", "Phi", "phi2", "iq", "ci"):
        assert np.array_equal(getattr(out, name), getattr(ebsd, name))
    assert (out.phase == 3).all()


def test_regenerate_out_of_bounds_zero_fills(rng):
    ebsd = _random_map(rng)
    phases = BinaryRaster(np.zeros((ebsd.rows, ebsd.cols), dtype=bool), ebsd.step)
    out = regenerate(ebsd, PolyWarp.translation(1e6, 1e6), phases)
    for name in ("phi1", "Phi", "phi2", "iq", "ci"):
        assert not getattr(out, name).any()


def test_phase_fraction_matches_reference_exactly(rng):
    ebsd = _random_map(rng)
    bits = rng.random((ebsd.rows, ebsd.cols)) < 0.37
    out = regenerate(ebsd, PolyWarp.identity(1), BinaryRaster(bits, ebsd.step))
    fraction = np.count_nonzero(out.phase == 2) / out.phase.size
    assert fraction == np.count_nonzero(bits) / bits.size


def test_regenerate_never_invents_records(rng):
    ebsd = _random_map(rng, rows=12, cols=12)
    phases = BinaryRaster(np.zeros((12, 12), dtype=bool), ebsd.step)
    out = regenerate(ebsd, PolyWarp.translation(1.7, -2.3, 2), phases)
    source = {
        (ebsd.phi1[r, c], ebsd.Phi[r, c], ebsd.phi2[r, c])
        for r in range(12)
        for c in range(12)
    }
    source.add((0.0, 0.0, 0.0))
    for r in range(12):
        for c in range(12):
            assert (out.phi1[r, c], out.Phi[r, c], out.phi2[r, c]) in source


def test_regenerate_dimension_mismatch_rejected(rng):
    ebsd = _random_map(rng)
    with pytest.raises(ValidationError, match="match"):
        regenerate(ebsd, PolyWarp.identity(1), BinaryRaster(np.zeros((3, 3), dtype=bool)))
