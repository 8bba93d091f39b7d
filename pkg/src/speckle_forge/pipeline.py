"""End-to-end correction workflow, repeatability study, and synthetic data.

The two-step workflow: the reference speckle is rescaled to the moving
speckle's grid and prealigned by exhaustive affine search; then CMA-ES
distorts a control mesh whose least-squares polynomial fit warps the
moving speckle toward the aligned reference, maximizing Dice overlap.
The corrected EBSD map keeps its original grid, with records pulled
through the final warp and phase ids backfilled from the reference.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__, _kernels, cmaes
from ._util import atomic_write_text, resolve_threads, sha256_file
from .errors import SpeckleForgeError, StageError, ValidationError
from .ebsdmap import EbsdMap, SpeckleRule, ebsd_speckle, read_ebsd, regenerate, write_ebsd
from .geometry import RangeSpec, apply_affine, grid_search_align, pad_or_crop, regular_mesh
from .polywarp import (
    MeshFitter,
    PolyWarp,
    _affine_expansion,
    monomial_exponents,
    save_warp,
    warp_raster,
)
from .raster import (
    BinaryRaster,
    GrayRaster,
    load_speckle,
    read_raster,
    rescale_nearest,
    threshold,
    write_ppm,
    write_raster,
)
from .similarity import dice


@dataclass
class RunConfig:
    """Everything one correction run needs; defaults follow the reference setup
    (25x25 mesh, sigma0 = 20 px, polynomial order 3)."""

    bse_speckle: Path | None = None
    ebsd_speckle: Path | None = None
    ebsd_map: Path | None = None
    speckle_rule: str | None = None
    bse_band: str | None = None
    ebsd_pixel_size: float | None = None
    bse_pixel_size: float | None = None
    mesh_rows: int = 25
    mesh_cols: int = 25
    sigma0: float = 20.0
    degree: int = 3
    budget: int = 5000
    lam: int | None = None
    seed: int = 0
    tx: RangeSpec = field(default_factory=lambda: RangeSpec(-10, 10, 1))
    ty: RangeSpec = field(default_factory=lambda: RangeSpec(-10, 10, 1))
    rot: RangeSpec = field(default_factory=lambda: RangeSpec.single(0.0))
    precipitate_phase: int = 2
    matrix_phase: int = 1
    out_dir: Path = Path(".")
    threads: int | None = None

    def validate(self) -> None:
        if self.degree < 1:
            raise ValidationError("polynomial degree must be >= 1")
        if self.budget <= 0:
            raise ValidationError("evaluation budget must be > 0")
        if self.mesh_rows < 2 or self.mesh_cols < 2:
            raise ValidationError("mesh needs at least 2 rows and 2 cols")
        if self.sigma0 <= 0:
            raise ValidationError("sigma0 must be > 0")
        if self.precipitate_phase == self.matrix_phase:
            raise ValidationError("precipitate and matrix phase ids must differ")
        if self.bse_speckle is None:
            raise ValidationError("a reference (BSE) speckle file is required")
        if self.ebsd_speckle is None and self.ebsd_map is None:
            raise ValidationError("need an EBSD speckle file or an EBSD map")
        if self.ebsd_map is not None and self.ebsd_speckle is None and self.speckle_rule is None:
            raise ValidationError("extracting the speckle from a map needs --speckle-rule")
        for path in (self.bse_speckle, self.ebsd_speckle, self.ebsd_map):
            if path is not None and not Path(path).is_file():
                raise ValidationError(f"input file not found: {path}")

    def resolved_items(self) -> list[tuple[str, str]]:
        items = []
        for key, value in vars(self).items():
            if isinstance(value, RangeSpec):
                value = f"{value.start:g}:{value.stop:g}:{value.step:g}"
            items.append((key, str(value)))
        return items


@dataclass
class RunReport:
    """Outcome of one correction run (key=value serializable)."""

    prealign_tx: int
    prealign_ty: int
    prealign_theta: float
    prealign_score: float
    final_score: float
    best_score: float
    generations: int
    evaluations: int
    covariance_repairs: int
    regressed: bool  # final (mean-mesh) score below the prealign score
    warp_path: Path
    trace_path: Path
    overlay_before_path: Path
    overlay_after_path: Path
    map_path: Path | None
    wall_seconds: float

    def to_text(self) -> str:
        lines = []
        for key, value in vars(self).items():
            if isinstance(value, float):
                value = f"{value:.6f}"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


class MeshFitness:
    """Candidate mesh vector -> Dice score of the implied warped speckle.

    Mesh coordinates are rounded to whole pixels here, inside the
    evaluation, so the optimizer's state itself stays continuous.
    """

    def __init__(
        self,
        moving: BinaryRaster,
        reference: BinaryRaster,
        mesh_rows: int,
        mesh_cols: int,
        degree: int,
    ):
        if moving.bits.shape != reference.bits.shape:
            raise ValidationError("moving and reference speckles must share dimensions")
        if moving.count == 0 or reference.count == 0:
            raise ValidationError("cannot score an empty speckle")
        self.moving = moving
        self.reference = reference
        self.regular = regular_mesh(mesh_rows, mesh_cols, moving.width, moving.height)
        self._fitter = MeshFitter(self.regular.points, degree)
        self._moving_u8 = np.ascontiguousarray(moving.as_u8())
        self._ref_u8 = np.ascontiguousarray(reference.as_u8())

    def warp_for(self, vector: np.ndarray) -> PolyWarp:
        points = np.rint(np.asarray(vector, dtype=np.float64).reshape(-1, 2))
        return self._fitter.fit(points)

    def __call__(self, vector: np.ndarray) -> float:
        mx, my = self.warp_for(vector).coeff_matrices()
        overlap, count = _kernels.warp_score(self._moving_u8, self._ref_u8, mx, my)
        return 2.0 * overlap / (count + self.reference.count)


@contextmanager
def _stage(name: str):
    try:
        yield
    except SpeckleForgeError as exc:
        exc.args = (f"[{name}] {exc}",)
        raise
    except Exception as exc:
        raise StageError(name, repr(exc)) from exc


def _load_inputs(cfg: RunConfig) -> tuple[BinaryRaster, BinaryRaster, EbsdMap | None]:
    ebsd_map = None
    if cfg.ebsd_map is not None:
        ebsd_map = read_ebsd(cfg.ebsd_map)
    if cfg.ebsd_speckle is not None:
        moving = load_speckle(cfg.ebsd_speckle, cfg.ebsd_pixel_size)
    else:
        moving = ebsd_speckle(ebsd_map, SpeckleRule.parse(cfg.speckle_rule))
    if ebsd_map is not None and moving.bits.shape != ebsd_map.phi1.shape:
        raise ValidationError(
            f"EBSD speckle {moving.width}x{moving.height} does not match map grid "
            f"{ebsd_map.cols}x{ebsd_map.rows}"
        )
    if cfg.bse_band is not None:
        low, _, high = cfg.bse_band.partition(":")
        try:
            band = (int(low), int(high))
        except ValueError:
            raise ValidationError(f"bad intensity band {cfg.bse_band!r}: expected low:high") from None
        gray = read_raster(cfg.bse_speckle, cfg.bse_pixel_size)
        reference = threshold(gray, *band)
    else:
        reference = load_speckle(cfg.bse_speckle, cfg.bse_pixel_size)
    return moving, reference, ebsd_map


def _run_correction(cfg: RunConfig) -> tuple[RunReport, BinaryRaster]:
    cfg.validate()
    threads = resolve_threads(cfg.threads)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    with _stage("load"):
        moving, reference, ebsd_map = _load_inputs(cfg)

    with _stage("rescale"):
        if not math.isclose(reference.pixel_size, moving.pixel_size, rel_tol=1e-9):
            reference = rescale_nearest(reference, moving.pixel_size)
        reference = pad_or_crop(reference, moving.width, moving.height)

    with _stage("prealign"):
        params, prealign_score = grid_search_align(
            reference, moving, cfg.tx, cfg.ty, cfg.rot, threads=threads
        )
        aligned = apply_affine(reference, params)

    with _stage("optimize"):
        fitness = MeshFitness(moving, aligned, cfg.mesh_rows, cfg.mesh_cols, cfg.degree)
        cma_params = cmaes.CmaParams.for_dimension(
            2 * cfg.mesh_rows * cfg.mesh_cols,
            sigma0=cfg.sigma0,
            max_evals=cfg.budget,
            lam=cfg.lam,
            seed=cfg.seed,
        )
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                result = cmaes.optimize(fitness, cma_params, fitness.regular.flatten(), map_fn=pool.map)
        else:
            result = cmaes.optimize(fitness, cma_params, fitness.regular.flatten())

    with _stage("finalize"):
        final_warp = fitness.warp_for(result.mean)
        final_score = fitness(result.mean)
        warped = warp_raster(moving, final_warp)

    with _stage("artifacts"):
        warp_path = out_dir / "warp.txt"
        save_warp(final_warp, warp_path)
        trace_path = out_dir / "trace.csv"
        cmaes.write_trace_csv(result.trace, trace_path)
        before_path = out_dir / "overlay_before.ppm"
        after_path = out_dir / "overlay_after.ppm"
        write_ppm(render_overlay(moving, aligned), before_path)
        write_ppm(render_overlay(warped, aligned), after_path)
        map_path = None
        if ebsd_map is not None:
            corrected = regenerate(
                ebsd_map, final_warp, aligned, cfg.precipitate_phase, cfg.matrix_phase
            )
            map_path = out_dir / "corrected.ang"
            provenance = (
                f"version={__version__} warp_sha256={sha256_file(warp_path)} "
                f"score={final_score:.6f}"
            )
            write_ebsd(corrected, map_path, provenance)

    report = RunReport(
        prealign_tx=params.tx,
        prealign_ty=params.ty,
        prealign_theta=params.theta,
        prealign_score=prealign_score,
        final_score=final_score,
        best_score=result.best_score,
        generations=len(result.trace),
        evaluations=result.evaluations,
        covariance_repairs=result.repair_count,
        regressed=final_score < prealign_score,
        warp_path=warp_path,
        trace_path=trace_path,
        overlay_before_path=before_path,
        overlay_after_path=after_path,
        map_path=map_path,
        wall_seconds=time.perf_counter() - started,
    )
    atomic_write_text(out_dir / "report.txt", report.to_text())
    return report, warped


def run_correction(cfg: RunConfig) -> RunReport:
    """Run the full two-step correction and write all artifacts to cfg.out_dir."""
    report, _ = _run_correction(cfg)
    return report


@dataclass
class RepeatResult:
    reports: list[RunReport]
    scores: np.ndarray
    score_mean: float
    score_std: float
    pairwise_mean: float
    heatmap: np.ndarray  # per-pixel fraction of runs marking the pixel, in [0, 1]
    stats_path: Path
    summary_path: Path
    heatmap_path: Path


def run_repeat(cfg: RunConfig, runs: int) -> RepeatResult:
    """Repeat the correction varying only the seed (seed + run index).

    Reports score statistics, the mean pairwise Dice between the final
    warped speckles, and a per-pixel agreement heatmap: the fraction of
    runs in which each pixel carried the precipitate phase (i.e. was set
    in the final warped speckle). Runs execute sequentially; each run
    parallelizes its own fitness evaluations.
    """
    if runs < 2:
        raise ValidationError("repeatability study needs at least 2 runs")
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: list[RunReport] = []
    speckles: list[BinaryRaster] = []
    for index in range(runs):
        run_cfg = RunConfig(**{**vars(cfg), "seed": cfg.seed + index, "out_dir": out_dir / f"run_{index:03d}"})
        report, warped = _run_correction(run_cfg)
        reports.append(report)
        speckles.append(warped)

    scores = np.array([r.final_score for r in reports])
    pairs = [dice(a, b) for a, b in combinations(speckles, 2)]
    heatmap = np.mean([s.bits for s in speckles], axis=0)

    stats_path = out_dir / "stats.csv"
    lines = ["run,seed,prealign_score,final_score"]
    for index, report in enumerate(reports):
        lines.append(
            f"{index},{cfg.seed + index},{report.prealign_score:.6f},{report.final_score:.6f}"
        )
    atomic_write_text(stats_path, "\n".join(lines) + "\n")

    summary_path = out_dir / "summary.txt"
    score_std = float(np.std(scores, ddof=1))
    pairwise_mean = float(np.mean(pairs))
    atomic_write_text(
        summary_path,
        f"runs = {runs}\nscore_mean = {scores.mean():.6f}\nscore_std = {score_std:.6f}\n"
        f"pairwise_mean_dice = {pairwise_mean:.6f}\n",
    )
    heatmap_path = out_dir / "heatmap.pgm"
    write_raster(GrayRaster(np.rint(heatmap * 255).astype(np.uint16), speckles[0].pixel_size), heatmap_path)

    return RepeatResult(
        reports=reports,
        scores=scores,
        score_mean=float(scores.mean()),
        score_std=score_std,
        pairwise_mean=pairwise_mean,
        heatmap=heatmap,
        stats_path=stats_path,
        summary_path=summary_path,
        heatmap_path=heatmap_path,
    )


def render_overlay(ebsd: BinaryRaster, bse: BinaryRaster) -> np.ndarray:
    """Overlay image: blue background, reference speckle white, moving speckle
    red drawn on top (visible white = unmatched reference)."""
    if ebsd.bits.shape != bse.bits.shape:
        raise ValidationError("overlay speckles must share dimensions")
    rgb = np.zeros((*ebsd.bits.shape, 3), dtype=np.uint8)
    rgb[:, :, 2] = 255  # blue background
    rgb[bse.bits] = (255, 255, 255)
    rgb[ebsd.bits] = (255, 0, 0)
    return rgb


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic instance: random non-overlapping disks plus a seeded warp.

    ``magnitude`` is the maximum displacement (pixels) over the raster
    border; ``drift`` optionally adds a row-wise horizontal shift decaying
    from the top of the frame, which the polynomial ground truth does not
    capture (it models beam drift, so recovery is only approximate).
    """

    width: int = 512
    height: int = 512
    features: int = 200
    radius_min: float = 3.0
    radius_max: float = 8.0
    family: str = "poly3"
    magnitude: float = 12.0
    drift: float = 0.0
    seed: int = 0

    _FAMILIES = {"affine": (1, (0, 1)), "barrel": (2, (2,)), "poly3": (3, (1, 2, 3))}

    def __post_init__(self):
        if self.family not in self._FAMILIES:
            raise ValidationError(f"unknown distortion family {self.family!r}")
        if self.width < 16 or self.height < 16:
            raise ValidationError("synthetic raster too small")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValidationError("need 0 < radius_min <= radius_max")
        if self.features < 1:
            raise ValidationError("need at least one feature")
        if self.magnitude < 0 or self.drift < 0:
            raise ValidationError("distortion magnitudes must be >= 0")


@dataclass
class SynthResult:
    clean: BinaryRaster
    distorted: BinaryRaster
    truth: PolyWarp


def _eval_grid_poly(coef: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(u, v).shape)
    p = coef.shape[0] - 1
    for k in range(p + 1):
        for j in range(p + 1 - k):
            if coef[k, j] != 0.0:
                out += coef[k, j] * u**k * v**j
    return out


def _truth_warp(spec: SynthSpec, rng: np.random.Generator) -> PolyWarp:
    degree, active_orders = SynthSpec._FAMILIES[spec.family]
    dx = np.zeros((degree + 1, degree + 1))
    dy = np.zeros_like(dx)
    for n in active_orders:
        for k in range(n + 1):
            dx[k, n - k] = rng.standard_normal()
            dy[k, n - k] = rng.standard_normal()

    # calibrate so the max displacement over the border equals `magnitude`
    edge = np.linspace(-1.0, 1.0, 129)
    border_u = np.concatenate([edge, edge, np.full_like(edge, -1.0), np.full_like(edge, 1.0)])
    border_v = np.concatenate([np.full_like(edge, -1.0), np.full_like(edge, 1.0), edge, edge])
    norms = np.hypot(_eval_grid_poly(dx, border_u, border_v), _eval_grid_poly(dy, border_u, border_v))
    peak = float(norms.max())
    if spec.magnitude == 0.0 or peak == 0.0:
        dx[:] = 0.0
        dy[:] = 0.0
    else:
        dx *= spec.magnitude / peak
        dy *= spec.magnitude / peak

    # compose normalized-coordinate displacement into raw pixel space
    expand_x = _affine_expansion(2.0 / (spec.width - 1), -1.0, degree)
    expand_y = _affine_expansion(2.0 / (spec.height - 1), -1.0, degree)
    raw_dx = expand_x.T @ dx @ expand_y
    raw_dy = expand_x.T @ dy @ expand_y
    raw_dx[1, 0] += 1.0  # identity part
    raw_dy[0, 1] += 1.0
    flat_x = np.array([raw_dx[k, j] for k, j in monomial_exponents(degree)])
    flat_y = np.array([raw_dy[k, j] for k, j in monomial_exponents(degree)])
    return PolyWarp(degree, flat_x, flat_y)


def _place_disks(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    disks: list[tuple[float, float, float]] = []
    attempts = 0
    limit = 1000 * spec.features
    margin = spec.radius_max + 1.0
    while len(disks) < spec.features:
        attempts += 1
        if attempts > limit:
            raise ValidationError(
                f"cannot place {spec.features} non-overlapping features "
                f"(placed {len(disks)}): raster too dense"
            )
        r = float(rng.uniform(spec.radius_min, spec.radius_max))
        cx = float(rng.uniform(margin, spec.width - 1 - margin))
        cy = float(rng.uniform(margin, spec.height - 1 - margin))
        if all((cx - ox) ** 2 + (cy - oy) ** 2 >= (r + orad + 1.0) ** 2 for ox, oy, orad in disks):
            disks.append((cx, cy, r))
    return disks


def _rasterize(disks, sx: np.ndarray, sy: np.ndarray, pad: float) -> np.ndarray:
    height, width = sx.shape
    bits = np.zeros((height, width), dtype=bool)
    for cx, cy, r in disks:
        x0 = max(int(cx - r - pad), 0)
        x1 = min(int(cx + r + pad) + 1, width)
        y0 = max(int(cy - r - pad), 0)
        y1 = min(int(cy + r + pad) + 1, height)
        window_x = sx[y0:y1, x0:x1]
        window_y = sy[y0:y1, x0:x1]
        bits[y0:y1, x0:x1] |= (window_x - cx) ** 2 + (window_y - cy) ** 2 <= r * r
    return bits


def synth(spec: SynthSpec) -> SynthResult:
    """Generate (clean, distorted, ground-truth warp) for a synthetic instance.

    Disks are rasterized analytically in both frames: a distorted pixel u
    is set iff truth(u) lands inside a disk, so the ground-truth warp is
    exactly the backward map the correction pipeline estimates when the
    clean speckle plays the moving role and the distorted one the
    reference.
    """
    rng = np.random.default_rng(spec.seed)
    truth = _truth_warp(spec, rng)
    disks = _place_disks(spec, rng)

    xs = np.arange(spec.width, dtype=np.float64)
    ys = np.arange(spec.height, dtype=np.float64).reshape(-1, 1)
    grid_x = np.broadcast_to(xs, (spec.height, spec.width))
    grid_y = np.broadcast_to(ys, (spec.height, spec.width))
    clean_bits = _rasterize(disks, grid_x, grid_y, pad=2.0)

    sx, sy = truth.eval(grid_x, grid_y)
    if spec.drift > 0.0:
        sx = sx + spec.drift * np.exp(-3.0 * grid_y / spec.height)
    max_disp = float(np.hypot(sx - grid_x, sy - grid_y).max())
    distorted_bits = _rasterize(disks, sx, sy, pad=max_disp + 2.0)

    return SynthResult(
        clean=BinaryRaster(clean_bits),
        distorted=BinaryRaster(distorted_bits),
        truth=truth,
    )
