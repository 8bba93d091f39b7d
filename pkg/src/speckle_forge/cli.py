"""Command-line front end.

Subcommands: score, align, optimize, apply, repeat, synth. Machine-readable
results go to stdout, logs to stderr. Exit codes: 0 success, 1 validation
error, 2 runtime failure. The optimize/repeat subcommands accept a
``key = value`` config file; command-line flags override config values.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from . import __version__
from ._util import atomic_write_text
from .errors import FormatError, SpeckleForgeError, ValidationError
from .ebsdmap import read_ebsd, regenerate, write_ebsd
from .geometry import RangeSpec, grid_search_align
from .pipeline import RunConfig, run_correction, run_repeat, synth, SynthSpec
from .polywarp import load_warp, save_warp, warp_raster
from .raster import load_speckle, rescale_nearest, write_raster
from .similarity import dice

log = logging.getLogger("speckle_forge")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ValidationError (exit 1).

    Also treats range values like ``-5:5:1`` as values rather than flags.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._negative_number_matcher = re.compile(r"^-\d+([.:]\d+)*$")

    def error(self, message):
        raise ValidationError(message)


def _parse_mesh(text: str) -> tuple[int, int]:
    rows, sep, cols = text.lower().partition("x")
    try:
        if not sep:
            raise ValueError
        return int(rows), int(cols)
    except ValueError:
        raise ValidationError(f"bad mesh {text!r}: expected ROWSxCOLS, e.g. 25x25") from None


# RunConfig fields settable from flags or a config file, with their parsers.
_CONFIG_KEYS = {
    "ebsd_speckle": Path,
    "ebsd_map": Path,
    "speckle_rule": str,
    "bse_speckle": Path,
    "bse_band": str,
    "ebsd_pixel_size": float,
    "bse_pixel_size": float,
    "mesh": _parse_mesh,
    "sigma0": float,
    "degree": int,
    "budget": int,
    "lambda": int,
    "seed": int,
    "tx": RangeSpec.parse,
    "ty": RangeSpec.parse,
    "rot": RangeSpec.parse,
    "precipitate_phase": int,
    "matrix_phase": int,
    "out_dir": Path,
    "threads": int,
}


def _load_config_file(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file; flags override it")
    parser.add_argument("--ebsd-speckle", type=Path, help="moving speckle graymap (nonzero = segmented)")
    parser.add_argument("--ebsd-map", type=Path, help="EBSD map to correct (TSL-style text)")
    parser.add_argument("--speckle-rule", help="extract the moving speckle from the map: phase=N, ci<T, iq<T")
    parser.add_argument("--bse-speckle", type=Path, help="reference speckle graymap")
    parser.add_argument("--bse-band", help="threshold the reference graymap to low:high first")
    parser.add_argument("--ebsd-pixel-size", type=float, help="um/px override for the moving speckle")
    parser.add_argument("--bse-pixel-size", type=float, help="um/px override for the reference speckle")
    parser.add_argument("--mesh", help="control mesh ROWSxCOLS (default 25x25)")
    parser.add_argument("--sigma0", type=float, help="initial step size in pixels (default 20)")
    parser.add_argument("--degree", type=int, help="polynomial order P >= 1 (default 3)")
    parser.add_argument("--budget", type=int, help="fitness evaluation budget (default 5000)")
    parser.add_argument("--lambda", dest="lambda_", type=int, help="population size (default 4 + floor(3 ln n))")
    parser.add_argument("--seed", type=int, help="RNG seed (default 0)")
    parser.add_argument("--tx", help="prealign x-translation lattice a:b:step (default -10:10:1)")
    parser.add_argument("--ty", help="prealign y-translation lattice a:b:step (default -10:10:1)")
    parser.add_argument("--rot", help="prealign rotation lattice in degrees a:b:step (default 0)")
    parser.add_argument("--precipitate-phase", type=int, help="phase id for segmented cells (default 2)")
    parser.add_argument("--matrix-phase", type=int, help="phase id for background cells (default 1)")
    parser.add_argument("--out-dir", type=Path, help="artifact directory (default .)")
    parser.add_argument("--threads", type=int, help="worker cap, 0 = auto (env SPECKLE_FORGE_THREADS)")
    parser.add_argument("--resume", help=argparse.SUPPRESS)


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "resume", None):
        raise ValidationError("resuming an interrupted optimize run is not supported")
    merged: dict[str, object] = {}
    if args.config is not None:
        for key, raw in _load_config_file(args.config).items():
            if key not in _CONFIG_KEYS:
                raise ValidationError(f"unknown config key {key!r}")
            try:
                merged[key] = _CONFIG_KEYS[key](raw)
            except ValidationError:
                raise
            except ValueError:
                raise ValidationError(f"bad config value {key} = {raw!r}") from None
    for key, parse in _CONFIG_KEYS.items():
        attr = "lambda_" if key == "lambda" else key
        value = getattr(args, attr, None)
        if value is None:
            continue
        merged[key] = parse(value) if isinstance(value, str) and key in ("mesh", "tx", "ty", "rot") else value
    cfg = RunConfig()
    for key, value in merged.items():
        if key == "mesh":
            cfg.mesh_rows, cfg.mesh_cols = value  # type: ignore[assignment]
        elif key == "lambda":
            cfg.lam = value  # type: ignore[assignment]
        else:
            setattr(cfg, key, value)
    log.info("resolved config:")
    for key, value in cfg.resolved_items():
        log.info("  %s = %s", key, value)
    return cfg


def _cmd_score(args) -> int:
    a = load_speckle(args.a, args.pixel_size)
    b = load_speckle(args.b, args.pixel_size)
    print(f"{dice(a, b):.6f}")
    return 0


def _cmd_align(args) -> int:
    moving = load_speckle(args.moving)
    fixed = load_speckle(args.fixed)
    if moving.pixel_size != fixed.pixel_size:
        moving = rescale_nearest(moving, fixed.pixel_size)
    params, score = grid_search_align(
        moving,
        fixed,
        RangeSpec.parse(args.tx),
        RangeSpec.parse(args.ty),
        RangeSpec.parse(args.rot),
    )
    text = f"tx = {params.tx}\nty = {params.ty}\ntheta = {params.theta:.6f}\nscore = {score:.6f}\n"
    atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def _cmd_optimize(args) -> int:
    report = run_correction(_build_run_config(args))
    print(report.to_text(), end="")
    return 0


def _cmd_repeat(args) -> int:
    result = run_repeat(_build_run_config(args), args.runs)
    print(
        f"runs = {len(result.reports)}\n"
        f"score_mean = {result.score_mean:.6f}\n"
        f"score_std = {result.score_std:.6f}\n"
        f"pairwise_mean_dice = {result.pairwise_mean:.6f}\n"
        f"stats = {result.stats_path}\nheatmap = {result.heatmap_path}",
    )
    return 0


def _cmd_apply(args) -> int:
    warp = load_warp(args.warp)
    did_something = False
    if args.speckle is not None:
        if args.out is None:
            raise ValidationError("--speckle needs --out for the warped raster")
        warped = warp_raster(load_speckle(args.speckle), warp)
        write_raster(warped, args.out)
        print(args.out)
        did_something = True
    if args.ebsd_map is not None:
        if args.phases is None or args.out_map is None:
            raise ValidationError("--ebsd-map needs --phases and --out-map")
        corrected = regenerate(
            read_ebsd(args.ebsd_map),
            warp,
            load_speckle(args.phases),
            args.precipitate_phase,
            args.matrix_phase,
        )
        write_ebsd(corrected, args.out_map, f"version={__version__} warp={args.warp}")
        print(args.out_map)
        did_something = True
    if not did_something:
        raise ValidationError("nothing to do: give --speckle and/or --ebsd-map")
    return 0


def _cmd_synth(args) -> int:
    rmin, _, rmax = args.radius.partition(":")
    try:
        radius = (float(rmin), float(rmax)) if rmax else (float(rmin), float(rmin))
    except ValueError:
        raise ValidationError(f"bad radius {args.radius!r}: expected MIN:MAX") from None
    width, height = _parse_mesh(args.size)  # same ROWSxCOLS syntax, here WIDTHxHEIGHT
    spec = SynthSpec(
        width=width,
        height=height,
        features=args.features,
        radius_min=radius[0],
        radius_max=radius[1],
        family=args.family,
        magnitude=args.magnitude,
        drift=args.drift,
        seed=args.seed,
    )
    result = synth(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean_path = out_dir / "clean.pgm"
    distorted_path = out_dir / "distorted.pgm"
    truth_path = out_dir / "truth_warp.txt"
    write_raster(result.clean, clean_path)
    write_raster(result.distorted, distorted_path)
    save_warp(result.truth, truth_path)
    print(f"{clean_path}\n{distorted_path}\n{truth_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speckle-forge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"speckle-forge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[], help="Dice score between two speckle graymaps")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--pixel-size", type=float, help="um/px override for both inputs")
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("align", help="exhaustive affine prealignment of a moving speckle")
    p.add_argument("moving", type=Path)
    p.add_argument("fixed", type=Path)
    p.add_argument("--tx", default="-10:10:1", help="x-translation lattice a:b:step")
    p.add_argument("--ty", default="-10:10:1", help="y-translation lattice a:b:step")
    p.add_argument("--rot", default="0", help="rotation lattice in degrees a:b:step")
    p.add_argument("-o", "--out", type=Path, default=Path("align_params.txt"))
    p.set_defaults(handler=_cmd_align)

    p = sub.add_parser("optimize", help="full correction run (prealign + CMA-ES + regeneration)")
    _add_run_flags(p)
    p.set_defaults(handler=_cmd_optimize)

    p = sub.add_parser("repeat", help="repeatability study: rerun optimize over derived seeds")
    _add_run_flags(p)
    p.add_argument("--runs", type=int, required=True, help="number of repeats (>= 2)")
    p.set_defaults(handler=_cmd_repeat)

    p = sub.add_parser("apply", help="apply a saved warp to a speckle and/or an EBSD map")
    p.add_argument("--warp", type=Path, required=True)
    p.add_argument("--speckle", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--ebsd-map", type=Path)
    p.add_argument("--phases", type=Path, help="reference speckle supplying phase ids")
    p.add_argument("--out-map", type=Path)
    p.add_argument("--precipitate-phase", type=int, default=2)
    p.add_argument("--matrix-phase", type=int, default=1)
    p.set_defaults(handler=_cmd_apply)

    p = sub.add_parser("synth", help="generate a synthetic clean/distorted speckle pair")
    p.add_argument("--size", default="512x512", help="raster WIDTHxHEIGHT")
    p.add_argument("--features", type=int, default=200)
    p.add_argument("--radius", default="3:8", help="disk radius range MIN:MAX in px")
    p.add_argument("--family", default="poly3", choices=["affine", "barrel", "poly3"])
    p.add_argument("--magnitude", type=float, default=12.0, help="max border displacement in px")
    p.add_argument("--drift", type=float, default=0.0, help="row-wise drift amplitude in px")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.set_defaults(handler=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SpeckleForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
