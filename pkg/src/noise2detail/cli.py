"""Command-line entry point: ``n2d denoise | eval | ablate | phantom``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .imageio import load_image, read_config, save_image
from .noise import NoiseSpec, phantom, psnr
from .pipeline import PipelineConfig, PipelineError

log = logging.getLogger("noise2detail")

CSV_SCHEMA_VERSION = "n2d-eval-csv v1"
CSV_COLUMNS = ["image", "sigma_or_lambda", "psnr_noisy", "psnr_xbar", "psnr_blend", "psnr_final", "seconds_total"]
ABLATION_SETS = ((), (2,), (2, 4), (2, 4, 8))
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")

_CONFIG_KEYS = {
    "iterations": int, "iters": int, "lr": float, "j": str, "seed": int,
    "stage3_iterations": int, "stage3_init": str,
}


def _parse_j(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text or text in ("none", "{}"):
        return ()
    return tuple(int(t) for t in text.replace("{", "").replace("}", "").split(",") if t.strip())


def _parse_level(text: str) -> float | tuple[float, float]:
    parts = [float(t) for t in text.split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise argparse.ArgumentTypeError(f"expected a value or lo,hi range, got {text!r}")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge CLI flags over an optional key=value config file over defaults."""
    values: dict = {}
    if getattr(args, "config", None):
        for key, raw in read_config(args.config).items():
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{args.config}: unknown config key {key!r}")
            values["iterations" if key == "iters" else key] = _CONFIG_KEYS[key](raw)
    for key in ("iterations", "lr", "seed", "stage3_iterations", "stage3_init"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "j", None) is not None:
        values["j"] = args.j
    if "j" in values:
        values["J"] = _parse_j(values.pop("j"))
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def _noise_spec(args: argparse.Namespace) -> NoiseSpec:
    if args.noise == "gaussian":
        if args.sigma is None:
            raise ValueError("--noise gaussian needs --sigma")
        return NoiseSpec("gaussian", args.sigma, seed=args.seed if args.seed is not None else 0)
    if args.lam is None:
        raise ValueError("--noise poisson needs --lambda")
    return NoiseSpec("poisson", args.lam, seed=args.seed if args.seed is not None else 0)


def _fmt(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.6f}"


def cmd_denoise(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    y = load_image(args.input)
    clean = load_image(args.gt) if args.gt else None
    try:
        final, outputs, report = pipeline.denoise(y, cfg, clean=clean)
    except PipelineError as err:
        print(err.report.to_text())
        if args.report:
            Path(args.report).write_text(json.dumps(err.report.as_dict(), indent=2))
        print(f"n2d: error in {err.stage}: {err}", file=sys.stderr)
        return 1
    out = Path(args.output)
    save_image(final, out, args.bit_depth)
    if args.debug_stages:
        stem, suffix = out.with_suffix(""), out.suffix
        save_image(outputs.xbar, f"{stem}_xbar{suffix}", args.bit_depth)
        for j, img in outputs.refined.items():
            save_image(img, f"{stem}_refined_j{j}{suffix}", args.bit_depth)
        save_image(outputs.blend, f"{stem}_blend{suffix}", args.bit_depth)
    print(report.to_text())
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), indent=2))
    return 0


def _clean_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise ValueError(f"{folder}: not a directory")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{folder}: no PNG/PGM/PPM images found")
    return files


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    spec = _noise_spec(args)
    files = _clean_images(Path(args.clean_dir))
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, path in enumerate(files):
        clean = load_image(path)
        noisy, level = spec.apply(clean, seed=[spec.seed, idx])
        t0 = time.perf_counter()
        final, outputs, report = pipeline.denoise(noisy, cfg, clean=clean)
        rows.append({
            "image": path.name,
            "sigma_or_lambda": level,
            "psnr_noisy": report.psnr["noisy"],
            "psnr_xbar": report.psnr["xbar"],
            "psnr_blend": report.psnr["blend"],
            "psnr_final": report.psnr["final"],
            "seconds_total": time.perf_counter() - t0,
        })
        if args.save_images:
            save_image(final, outdir / f"{path.stem}_denoised.png")
        log.info("%s: %.2f dB -> %.2f dB", path.name, report.psnr["noisy"], report.psnr["final"])

    with open(outdir / "results.csv", "w", newline="") as fh:
        fh.write(f"# {CSV_SCHEMA_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([
                r["image"], f"{r['sigma_or_lambda']:.6f}",
                *(_fmt(r[k]) for k in ("psnr_noisy", "psnr_xbar", "psnr_blend", "psnr_final")),
                f"{r['seconds_total']:.3f}" if args.record_time else "",
            ])

    means = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr_noisy", "psnr_xbar", "psnr_blend", "psnr_final")}
    lines = [
        f"noise: {spec.kind} level={spec.level} seed={spec.seed}; images: {len(rows)}",
        f"{'image':<28s} {'level':>8s} {'noisy':>8s} {'xbar':>8s} {'blend':>8s} {'final':>8s} {'sec':>8s}",
    ]
    for r in rows:
        lines.append(
            f"{r['image']:<28s} {r['sigma_or_lambda']:8.2f} {r['psnr_noisy']:8.2f} {r['psnr_xbar']:8.2f} "
            f"{r['psnr_blend']:8.2f} {r['psnr_final']:8.2f} {r['seconds_total']:8.1f}"
        )
    lines.append(
        f"{'mean':<28s} {'':>8s} {means['psnr_noisy']:8.2f} {means['psnr_xbar']:8.2f} "
        f"{means['psnr_blend']:8.2f} {means['psnr_final']:8.2f}"
    )
    summary = "\n".join(lines)
    (outdir / "summary.txt").write_text(summary + "\n")
    (outdir / "summary.json").write_text(json.dumps({"noise": spec.kind, "level": spec.level, "seed": spec.seed,
                                                    "images": len(rows), "mean": means}, indent=2) + "\n")
    print(summary)
    return 0


def run_ablation(clean: np.ndarray, noisy: np.ndarray, cfg: PipelineConfig, j_sets=ABLATION_SETS,
                 final: bool = False) -> list[dict]:
    """PSNR of the blend for each J-set, sharing one stage-1 network.

    With ``final`` each row also runs stage 3 on its blend.
    """
    net = pipeline.train_stage1(noisy, cfg)
    xbar = pipeline.residual_denoise(noisy, net)
    needed = sorted({j for s in j_sets for j in s})
    refined = {j: pipeline.refine_pd(noisy, net, j) for j in needed}
    rows = []
    for js in j_sets:
        mixed = pipeline.blend(xbar, {j: refined[j] for j in js})
        row = {"J": tuple(js), "psnr_blend": psnr(mixed, clean)}
        if final:
            net3 = pipeline.train_stage3(mixed, noisy, cfg, net)
            row["psnr_final"] = psnr(pipeline.detail_recover(mixed, net3), clean)
        rows.append(row)
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    spec = _noise_spec(args)
    clean = load_image(args.image)
    noisy, level = spec.apply(clean)
    j_sets = [_parse_j(s) for s in args.j_sets] if args.j_sets else list(ABLATION_SETS)
    rows = run_ablation(clean, noisy, cfg, j_sets, final=args.final)
    strides = sorted({j for s in j_sets for j in s})
    header = ["xbar"] + [f"j{j}" for j in strides] + ["psnr_blend"] + (["psnr_final"] if args.final else [])
    print(f"noise: {spec.kind} level={level:.3f}  noisy PSNR {psnr(noisy, clean):.2f} dB")
    print("  ".join(f"{h:>10s}" for h in header))
    for r in rows:
        cells = ["x"] + ["x" if j in r["J"] else "" for j in strides] + [f"{r['psnr_blend']:.2f}"]
        if args.final:
            cells.append(f"{r['psnr_final']:.2f}")
        print("  ".join(f"{c:>10s}" for c in cells))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["J"] + header[-(2 if args.final else 1):])
            for r in rows:
                writer.writerow([",".join(map(str, r["J"]))] + [_fmt(r["psnr_blend"])]
                                + ([_fmt(r["psnr_final"])] if args.final else []))
    return 0


def cmd_phantom(args: argparse.Namespace) -> int:
    save_image(phantom(args.size, args.seed), args.output, args.bit_depth)
    return 0


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--iters", dest="iterations", type=int, default=None, help="training iterations per stage (default 2000)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--j", default=None, help="comma-separated shuffle strides (default 2,4)")
    p.add_argument("--stage3-iters", dest="stage3_iterations", type=int, default=None)
    p.add_argument("--stage3-init", choices=("finetune", "fresh"), default=None)
    p.add_argument("--config", default=None, help="key = value file; flags override it")


def _add_noise_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise", choices=("gaussian", "poisson"), required=True)
    p.add_argument("--sigma", type=_parse_level, default=None, help="Gaussian sigma on the 0-255 scale, or lo,hi")
    p.add_argument("--lambda", dest="lam", type=_parse_level, default=None, help="Poisson peak, or lo,hi")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="n2d", description="Single-image self-supervised denoising.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("input")
    p.add_argument("output")
    _add_pipeline_flags(p)
    p.add_argument("--gt", default=None, help="clean reference image; adds PSNR to the report")
    p.add_argument("--debug-stages", action="store_true", help="also write the intermediate stage images")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="degrade, denoise and score a folder of clean images")
    p.add_argument("clean_dir")
    p.add_argument("output_dir")
    _add_pipeline_flags(p)
    _add_noise_flags(p)
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--record-time", action="store_true", help="fill the seconds_total CSV column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="PSNR of the blend for cumulative J-sets")
    p.add_argument("image")
    _add_pipeline_flags(p)
    _add_noise_flags(p)
    p.add_argument("--j-sets", nargs="*", default=None, help='J-sets such as "" "2" "2,4" "2,4,8"')
    p.add_argument("--final", action="store_true", help="also run stage 3 for every row")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("phantom", help="write the procedural test phantom")
    p.add_argument("output")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"n2d: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
