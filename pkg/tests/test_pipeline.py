import filecmp

import numpy as np
import pytest

from speckle_forge.errors import ValidationError
from speckle_forge.geometry import RangeSpec
from speckle_forge.pipeline import (
    MeshFitness,
    RunConfig,
    SynthSpec,
    _run_correction,
    render_overlay,
    run_correction,
    run_repeat,
    synth,
)
from speckle_forge.raster import BinaryRaster, load_speckle, write_raster
from speckle_forge.similarity import dice


def _pair_config(pair_dir, out_dir, **overrides) -> RunConfig:
    base = dict(
        bse_speckle=pair_dir / "distorted.pgm",
        ebsd_speckle=pair_dir / "clean.pgm",
        mesh_rows=5,
        mesh_cols=5,
        sigma0=3.0,
        degree=2,
        budget=600,
        seed=4,
        tx=RangeSpec(-2, 2, 1),
        ty=RangeSpec(-2, 2, 1),
        rot=RangeSpec.single(0.0),
        out_dir=out_dir,
        threads=1,
    )
    base.update(overrides)
    return RunConfig(**base)


def test_mesh_fitness_of_regular_mesh_is_plain_dice(rng):
    # 65x65 with a 5x5 mesh keeps the regular mesh on integer pixels, so
    # the identity fit is exact and the fitness equals the raw Dice score
    moving = BinaryRaster(rng.random((65, 65)) < 0.3)
    reference = BinaryRaster(rng.random((65, 65)) < 0.3)
    fitness = MeshFitness(moving, reference, 5, 5, 2)
    assert fitness(fitness.regular.flatten()) == dice(moving, reference)


def test_mesh_fitness_rejects_empty_speckle(rng):
    empty = BinaryRaster(np.zeros((32, 32), dtype=bool))
    full = BinaryRaster(rng.random((32, 32)) < 0.5)
    with pytest.raises(ValidationError, match="empty"):
        MeshFitness(empty, full, 4, 4, 2)


def test_synth_zero_magnitude_is_identity():
    result = synth(SynthSpec(width=96, height=96, features=12, magnitude=0.0, seed=3))
    assert np.array_equal(result.clean.bits, result.distorted.bits)
    assert dice(result.clean, result.distorted) == 1.0
    identity = np.column_stack([np.arange(10.0), np.arange(10.0) * 2])
    fx, fy = result.truth.eval(identity[:, 0], identity[:, 1])
    assert np.allclose(fx, identity[:, 0]) and np.allclose(fy, identity[:, 1])


def test_synth_is_deterministic():
    spec = SynthSpec(width=128, height=96, features=20, seed=9)
    a, b = synth(spec), synth(spec)
    assert np.array_equal(a.clean.bits, b.clean.bits)
    assert np.array_equal(a.distorted.bits, b.distorted.bits)
    assert np.array_equal(a.truth.cx, b.truth.cx)


def test_synth_respects_boundary_magnitude():
    spec = SynthSpec(width=256, height=256, features=30, magnitude=9.0, seed=5)
    truth = synth(spec).truth
    edge = np.linspace(0, 255, 200)
    border_x = np.concatenate([edge, edge, np.zeros(200), np.full(200, 255.0)])
    border_y = np.concatenate([np.zeros(200), np.full(200, 255.0), edge, edge])
    fx, fy = truth.eval(border_x, border_y)
    disp = np.hypot(fx - border_x, fy - border_y)
    assert disp.max() <= 9.0 + 1e-6
    assert disp.max() > 8.0  # calibrated to the requested magnitude


def test_synth_drift_changes_distorted_only():
    still = synth(SynthSpec(width=96, height=96, features=12, magnitude=4.0, seed=7))
    drifted = synth(SynthSpec(width=96, height=96, features=12, magnitude=4.0, drift=3.0, seed=7))
    assert np.array_equal(still.clean.bits, drifted.clean.bits)
    assert not np.array_equal(still.distorted.bits, drifted.distorted.bits)
    assert np.array_equal(still.truth.cx, drifted.truth.cx)  # poly truth excludes drift


def test_synth_too_dense_rejected():
    with pytest.raises(ValidationError, match="dense"):
        synth(SynthSpec(width=64, height=64, features=500, radius_min=4, radius_max=6, seed=0))


def test_synth_rejects_unknown_family():
    with pytest.raises(ValidationError):
        SynthSpec(family="thinplate")


def test_run_correction_identity_instance(tmp_path):
    result = synth(SynthSpec(width=96, height=96, features=15, magnitude=0.0, seed=2))
    write_raster(result.clean, tmp_path / "clean.pgm")
    write_raster(result.distorted, tmp_path / "distorted.pgm")
    cfg = _pair_config(tmp_path, tmp_path / "run", budget=300, sigma0=2.0)
    report = run_correction(cfg)
    assert report.prealign_score == pytest.approx(1.0)
    assert report.final_score >= 0.99
    assert (report.prealign_tx, report.prealign_ty) == (0, 0)


def test_run_correction_recovers_small_distortion(small_pair_dir, tmp_path):
    cfg = _pair_config(small_pair_dir, tmp_path / "run", budget=4000, threads=2)
    report = run_correction(cfg)
    assert report.final_score >= 0.90
    assert report.final_score > report.prealign_score
    assert not report.regressed
    for path in (
        report.warp_path,
        report.trace_path,
        report.overlay_before_path,
        report.overlay_after_path,
    ):
        assert path.is_file()
    assert report.map_path is None
    assert report.evaluations >= cfg.budget


def test_run_correction_artifacts_are_deterministic(small_pair_dir, tmp_path):
    a = run_correction(_pair_config(small_pair_dir, tmp_path / "a", threads=1))
    b = run_correction(_pair_config(small_pair_dir, tmp_path / "b", threads=2))
    for name in ("warp.txt", "trace.csv", "overlay_before.ppm", "overlay_after.ppm"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    assert a.final_score == b.final_score


def test_run_correction_validates_config(small_pair_dir, tmp_path):
    with pytest.raises(ValidationError):
        run_correction(_pair_config(small_pair_dir, tmp_path, degree=0))
    with pytest.raises(ValidationError):
        run_correction(_pair_config(small_pair_dir, tmp_path, budget=0))
    with pytest.raises(ValidationError):
        run_correction(_pair_config(small_pair_dir, tmp_path, bse_speckle=tmp_path / "nope.pgm"))
    with pytest.raises(ValidationError):
        run_correction(
            _pair_config(small_pair_dir, tmp_path, precipitate_phase=1, matrix_phase=1)
        )


def test_identical_seeds_give_identical_runs_and_binary_heatmap(small_pair_dir, tmp_path):
    cfg_a = _pair_config(small_pair_dir, tmp_path / "a")
    cfg_b = _pair_config(small_pair_dir, tmp_path / "b")
    _, warped_a = _run_correction(cfg_a)
    _, warped_b = _run_correction(cfg_b)
    assert np.array_equal(warped_a.bits, warped_b.bits)
    heatmap = np.mean([warped_a.bits, warped_b.bits], axis=0)
    assert set(np.unique(heatmap)) <= {0.0, 1.0}


def test_run_repeat_statistics_and_heatmap(small_pair_dir, tmp_path):
    cfg = _pair_config(small_pair_dir, tmp_path / "rep", budget=1200, threads=2)
    result = run_repeat(cfg, runs=3)
    assert len(result.reports) == 3
    assert result.heatmap.min() >= 0.0 and result.heatmap.max() <= 1.0
    assert result.stats_path.is_file() and result.heatmap_path.is_file()
    assert result.summary_path.is_file()
    # seeds are derived: seed + run index
    lines = result.stats_path.read_text().splitlines()
    assert lines[0] == "run,seed,prealign_score,final_score"
    assert [int(line.split(",")[1]) for line in lines[1:]] == [4, 5, 6]
    assert 0.0 <= result.pairwise_mean <= 1.0
    # fully-agreed pixels are exactly 0 or 1 by construction of the mean
    agreed = (result.heatmap == 0.0) | (result.heatmap == 1.0)
    assert agreed.any()


def test_run_repeat_needs_two_runs(small_pair_dir, tmp_path):
    with pytest.raises(ValidationError):
        run_repeat(_pair_config(small_pair_dir, tmp_path), runs=1)


def test_overlay_colors():
    ebsd = np.zeros((8, 8), dtype=bool)
    bse = np.zeros((8, 8), dtype=bool)
    all_blue = render_overlay(BinaryRaster(ebsd), BinaryRaster(bse))
    assert (all_blue == (0, 0, 255)).all()

    ebsd[2, 2] = True
    bse[5, 5] = True
    rgb = render_overlay(BinaryRaster(ebsd), BinaryRaster(bse))
    assert tuple(rgb[2, 2]) == (255, 0, 0)
    assert tuple(rgb[5, 5]) == (255, 255, 255)
    red = (rgb == (255, 0, 0)).all(axis=2).sum()
    white = (rgb == (255, 255, 255)).all(axis=2).sum()
    assert red + white == 2  # disjoint: every segmented pixel is visible


def test_overlay_identical_speckles_hide_white(rng):
    bits = rng.random((16, 16)) < 0.4
    rgb = render_overlay(BinaryRaster(bits), BinaryRaster(bits))
    assert not (rgb == (255, 255, 255)).all(axis=2).any()


def test_overlay_dimension_mismatch_rejected():
    with pytest.raises(ValidationError):
        render_overlay(
            BinaryRaster(np.zeros((4, 4), dtype=bool)),
            BinaryRaster(np.zeros((5, 4), dtype=bool)),
        )


def test_rescale_stage_aligns_pixel_sizes(small_instance, tmp_path):
    # reference at half the pixel size: twice the resolution, same physical area
    fine = synth(
        SynthSpec(width=128, height=128, features=25, radius_min=3, radius_max=6,
                  family="barrel", magnitude=6.0, seed=1)
    )
    write_raster(small_instance.clean, tmp_path / "clean.pgm")
    upsampled = BinaryRaster(
        np.kron(fine.distorted.bits, np.ones((2, 2), dtype=bool)), pixel_size=0.5
    )
    write_raster(upsampled, tmp_path / "distorted2x.pgm")
    cfg = RunConfig(
        bse_speckle=tmp_path / "distorted2x.pgm",
        ebsd_speckle=tmp_path / "clean.pgm",
        mesh_rows=4,
        mesh_cols=4,
        sigma0=2.0,
        degree=2,
        budget=300,
        seed=1,
        tx=RangeSpec.single(0),
        ty=RangeSpec.single(0),
        rot=RangeSpec.single(0.0),
        out_dir=tmp_path / "run",
        threads=1,
    )
    report = run_correction(cfg)
    assert report.final_score > 0.5  # rescale put both speckles on one grid
