"""Command-line front end: synth / run / eval / export plus stage debuggers."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fuse_filter
from .colmap import parse_colmap_model
from .densify import DensifyConfig, densify_multilevel
from .errors import RgbxError
from .imgcore import Image, load_image, save_image
from .matching import ClassicalBackend, accumulate_matches, load_matchset, match_pair, save_matchset
from .pipeline import PipelineConfig, evaluate_run, export_dataset, run_pipeline
from .synthbench import SceneConfig, gen_sequence, save_bundle

logger = logging.getLogger(__name__)


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic ground-truth benchmark bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--modality", default="thermal-like",
                   choices=("thermal-like", "nir-like", "sar-like"))
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--disparities", type=float, nargs="+", default=None,
                   help="per-layer RGB->X disparity in px (one value per layer)")
    p.add_argument("--homogeneous-fraction", type=float, default=0.15)
    p.add_argument("--corrupt-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)


def _cmd_synth(args: argparse.Namespace) -> int:
    disparities = args.disparities
    if disparities is None:
        disparities = [0.0] if args.layers == 1 else list(np.linspace(0.0, 8.0, args.layers))
    cfg = SceneConfig(
        seed=args.seed,
        size=args.size,
        frames=args.frames,
        modality=args.modality,
        layers=args.layers,
        layer_disparities=tuple(disparities),
        homogeneous_fraction=args.homogeneous_fraction,
        corrupt_patch_fraction=args.corrupt_fraction,
    )
    bundle = gen_sequence(cfg)
    save_bundle(bundle, args.out)
    print(f"wrote {bundle.frames}-frame {cfg.modality} bundle to {args.out}")
    return 0


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="run the full match-densify-consolidate pipeline")
    p.add_argument("--input", required=True, help="directory with rgb/, x/ (or x_raw/), masks/")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of PipelineConfig fields")
    p.add_argument("--backend", choices=("oracle", "classical", "file"))
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-levels", action="store_true", default=None)
    p.add_argument("--no-confidence", dest="use_matching_confidence", action="store_false",
                   default=None, help="force the propagation confidence map to 1")
    p.add_argument("--no-area-sampling", dest="enable_area_sampling", action="store_false",
                   default=None)
    p.add_argument("--no-filtering", dest="enable_filtering", action="store_false", default=None)
    p.add_argument("--oracle-sigma", type=float)
    p.add_argument("--oracle-outliers", type=float)
    p.add_argument("--oracle-rho", type=float)
    p.add_argument("--oracle-count", type=int)
    p.set_defaults(func=_cmd_run)


def _cmd_run(args: argparse.Namespace) -> int:
    payload = {}
    if args.config:
        payload = json.loads(Path(args.config).read_text())
    payload["input_dir"] = args.input
    payload["output_dir"] = args.out
    for key in ("backend", "seed", "window", "workers", "dump_levels",
                "use_matching_confidence", "enable_area_sampling", "enable_filtering",
                "oracle_sigma", "oracle_outliers", "oracle_rho", "oracle_count"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    cfg = PipelineConfig.from_json(payload)
    manifest = run_pipeline(cfg)
    ok = sum(1 for f in manifest.frames if f.status == "ok")
    print(f"{ok}/{len(manifest.frames)} frames ok, {manifest.failed} failed -> {args.out}")
    return 0 if manifest.failed == 0 else 1


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="score a run against its benchmark ground truth")
    p.add_argument("--input", required=True, help="benchmark bundle directory")
    p.add_argument("--run", required=True, help="pipeline output directory")
    p.set_defaults(func=_cmd_eval)


def _cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_run(args.input, args.run)
    run_dir = Path(args.run)
    report.write_csv(run_dir / "metrics.csv")
    report.write_json(run_dir / "metrics.json")
    agg = report.aggregate()
    print(f"PSNR {agg.psnr:.3f} dB  SSIM {agg.ssim:.4f}  RMSE {agg.rmse:.5f}  "
          f"consistency {agg.consistency:.5f}")
    return 0


def _add_export(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("export", help="export an aligned RGB-X dataset for a 3DGS trainer")
    p.add_argument("--run", required=True, help="pipeline output directory (with manifest.json)")
    p.add_argument("--model", required=True, help="COLMAP text model directory")
    p.add_argument("--out", required=True)
    p.add_argument("--name-format", default="{frame}.png")
    p.set_defaults(func=_cmd_export)


def _cmd_export(args: argparse.Namespace) -> int:
    from .pipeline import FrameRecord, RunManifest

    payload = json.loads((Path(args.run) / "manifest.json").read_text())
    manifest = RunManifest(config=payload["config"])
    manifest.frames = [FrameRecord(**f) for f in payload["frames"]]
    model = parse_colmap_model(args.model)
    result = export_dataset(manifest, model, args.out, run_dir=args.run,
                            name_format=args.name_format)
    print(f"exported {len(result['images'])} aligned pairs to {args.out} "
          f"({len(result['warnings'])} warnings)")
    return 0


def _add_match(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("match", help="match one RGB/X pair with the classical backend")
    p.add_argument("--rgb", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)


def _cmd_match(args: argparse.Namespace) -> int:
    ms = match_pair(ClassicalBackend(), load_image(args.rgb), load_image(args.x))
    save_matchset(ms, args.out)
    print(f"{len(ms)} matches -> {args.out}")
    return 0


def _add_densify(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("densify", help="densify a match file against an RGB frame")
    p.add_argument("--rgb", required=True)
    p.add_argument("--x", required=True, help="X frame supplying matched values")
    p.add_argument("--matches", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_densify)


def _cmd_densify(args: argparse.Namespace) -> int:
    rgb = load_image(args.rgb)
    ms = load_matchset(args.matches)
    sparse, conf = accumulate_matches([ms], [load_image(args.x)], ms.rgb_frame, rgb.shape)
    levels = densify_multilevel(rgb, sparse, conf, DensifyConfig())
    fused = fuse_filter.fuse_levels([fuse_filter.enhance(img, rgb) for img in levels.values()])
    save_image(fused, args.out, bit_depth=16)
    print(f"densified {sparse.num_known} known pixels over {len(levels)} levels -> {args.out}")
    return 0


def _add_filter(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("filter", help="self-match filter a densified X image")
    p.add_argument("--rgb", required=True)
    p.add_argument("--xd", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--patch", type=int, default=32)
    p.set_defaults(func=_cmd_filter)


def _cmd_filter(args: argparse.Namespace) -> int:
    rgb = load_image(args.rgb)
    xd = load_image(args.xd)
    grid = fuse_filter.PatchGrid(xd.shape[0], xd.shape[1], args.patch)
    sim = fuse_filter.similarity_matrix(
        fuse_filter.patch_descriptors(rgb, grid), fuse_filter.patch_descriptors(xd, grid)
    )
    score = fuse_filter.self_match_score(sim)
    result = fuse_filter.concentration_and_filter(xd, sim, grid)
    save_image(Image(result.rejected.bits.astype(np.float64)),
               Path(args.out_prefix + "_rejected.png"), bit_depth=8)
    save_image(Image(result.sparse.to_float_raster(void_value=0.0)),
               Path(args.out_prefix + "_filtered.png"), bit_depth=16)
    print(f"q={result.q:.4f} theta={result.threshold:.4f} "
          f"rejected={int(result.rejected_patches.sum())}/{grid.patches} lsim={score:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rgbxalign",
        description="Produce view-aligned RGB-X image pairs from unaligned cross-sensor input.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_synth, _add_run, _add_eval, _add_export, _add_match, _add_densify, _add_filter):
        add(sub)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RgbxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
