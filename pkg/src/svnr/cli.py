"""Command-line entry point: ``svnr <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import io as rio
from .config import ConfigError, load_config
from .denoiser import AnalyticDenoiser, GaussianPrior, TinyNet
from .diffusion import run_inference
from .metrics import psnr, ssim
from .noise_model import (Domain, ImageGrid, PresetFileError, delinearize, find_preset,
                          linearize, load_gain_presets, noise_std, simulate_noise)
from .timemap import estimate_timemap, estimated_variance

log = logging.getLogger("svnr")


class CLIError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _setup(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "presets", None):
        cfg.presets = args.presets
    if getattr(args, "white_level", None) is not None:
        cfg.white_level = args.white_level
    return cfg, cfg.schedule.build()


def _preset(cfg, name):
    if not load_gain_presets(cfg.presets):
        log.warning("no gain presets available")
    try:
        return find_preset(name, cfg.presets).params()
    except KeyError as e:
        raise CLIError(str(e)) from e


def _read_linear(path, white_level) -> ImageGrid:
    """PNG inputs are sRGB and get linearized; .f32 inputs are already linear."""
    if str(path).endswith(".f32"):
        return ImageGrid(rio.read_f32(path).astype(float), Domain.LINEAR)
    return linearize(rio.read_png(path), white_level)


def _write_linear(path, img: ImageGrid, white_level, bit_depth=16):
    if str(path).endswith(".f32"):
        rio.write_f32(path, img)
    else:
        rio.write_png(path, delinearize(img, white_level), bit_depth)


def _to_model(lin: ImageGrid) -> np.ndarray:
    return 2.0 * lin.data - 1.0


def _from_model(x: np.ndarray) -> ImageGrid:
    return ImageGrid((x + 1.0) / 2.0, Domain.LINEAR)


def empirical_prior(y: np.ndarray, noise_var: np.ndarray, size: int = 5) -> GaussianPrior:
    """Local-mean / local-variance Gaussian prior estimated from the noisy image itself."""
    mu = uniform_filter(y, size=(size, size, 1), mode="reflect")
    var = uniform_filter(y * y, size=(size, size, 1), mode="reflect") - mu ** 2
    return GaussianPrior(mu, np.maximum(var - noise_var, 1e-4))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg, _ = _setup(args)
    p = _preset(cfg, args.preset)
    rng = np.random.default_rng(cfg.seed)
    clean = linearize(rio.read_png(args.input), cfg.white_level)
    y, _ = simulate_noise(clean, p, rng, clip_at_zero=not args.no_clip)
    _write_linear(args.output, y, cfg.white_level, args.bit_depth)
    if args.dump_sigma:
        rio.write_f32(args.dump_sigma, noise_std(clean, p))
    if args.dump_linear:
        rio.write_f32(args.dump_linear, y)
    return 0


def cmd_estimate_tmap(args):
    cfg, s = _setup(args)
    p = _preset(cfg, args.preset)
    y = _read_linear(args.input, cfg.white_level)
    tmap = estimate_timemap(y, p, s)
    rio.write_f32(args.output, tmap)
    if args.heat:
        from .plotting import save_heatmap
        save_heatmap(tmap, args.heat)
    print(json.dumps({"max_time": float(tmap.max()), "steps": int(np.ceil(tmap.max()))}))
    return 0


def _load_denoiser(spec, y, p, s):
    if spec == "analytic":
        return AnalyticDenoiser(empirical_prior(y, estimated_variance(y, p)), s)
    if spec.startswith("net:"):
        path = spec[4:]
        if not Path(path).exists():
            raise CLIError(f"weight file {path} not found")
        return TinyNet.load(path)
    raise CLIError(f"unknown denoiser {spec!r}; use 'analytic' or 'net:weights.bin'")


def cmd_denoise(args):
    cfg, s = _setup(args)
    p = _preset(cfg, args.preset)
    rng = np.random.default_rng(cfg.seed)
    y = _to_model(_read_linear(args.input, cfg.white_level))
    den = _load_denoiser(args.denoiser, y, p, s)
    trace = None
    if args.trace:
        tdir = Path(args.trace)
        tdir.mkdir(parents=True, exist_ok=True)
        frames = []

        def trace(step, state):
            rio.write_f32(tdir / f"x_{step:04d}.f32", state.x)
            rio.write_f32(tdir / f"t_{step:04d}.f32", state.t)
            frames.append(delinearize(_from_model(np.clip(state.x, -1, 1)), cfg.white_level).data)

    out, steps = run_inference(y, p, s, den, rng, trace=trace)
    _write_linear(args.output, _from_model(out), cfg.white_level, args.bit_depth)
    if args.trace:
        from .plotting import plot_trace
        pick = sorted(set(np.linspace(0, len(frames) - 1, min(len(frames), 8)).astype(int)))
        plot_trace([frames[i] for i in pick], Path(args.trace) / "trace.png", [f"step {i}" for i in pick])
    print(json.dumps({"steps": steps}))
    return 0


def _load_dataset(args, cfg):
    from .training import make_textures
    if args.data:
        files = sorted(Path(args.data).glob("*.png"))
        if not files:
            raise CLIError(f"no PNG files in {args.data}")
        return [rio.read_png(f) for f in files]
    return make_textures(args.n_textures, 32, seed=cfg.seed)


def cmd_train(args):
    from dataclasses import replace
    from .training import TrainConfig, Validator, make_textures, train
    cfg, s = _setup(args)
    tc = cfg.train
    overrides = {k: v for k, v in {"scheme": args.scheme, "iterations": args.iters,
                                    "val_every": args.val_every, "batch": args.batch}.items()
                 if v is not None}
    tc = TrainConfig(**{**tc.to_dict(), **overrides, "seed": cfg.seed})
    data = _load_dataset(args, cfg)
    validator = None
    if not args.no_val:
        validator = Validator(make_textures(args.n_val, 32, seed=cfg.seed + 10_000),
                              _preset(cfg, args.val_preset), s, cfg.white_level)
    result = train(data, tc, s, validator)
    result.net.save(args.out)
    if args.log:
        write_log_csv(args.log, result.log)
    if args.fig:
        from .plotting import plot_training_curves
        plot_training_curves({tc.scheme.value: result.log}, args.fig)
    last = result.log[-1]
    print(json.dumps({"scheme": tc.scheme.value, "iterations": tc.iterations,
                      "val_psnr": last["val_psnr"], "val_ssim": last["val_ssim"]}, default=float))
    return 0


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "val_psnr", "val_ssim"])
        for r in rows:
            w.writerow([r["iter"]] + [f"{r[k]:.6f}" for k in ("loss", "val_psnr", "val_ssim")])


def cmd_metrics(args):
    cfg, _ = _setup(args)

    def srgb(path):
        if str(path).endswith(".f32"):
            return delinearize(_read_linear(path, cfg.white_level), cfg.white_level)
        return rio.read_png(path)

    ref, out = srgb(args.reference), srgb(args.output)
    print(json.dumps({"psnr": psnr(ref, out), "ssim": ssim(ref, out)}))
    return 0


def cmd_verify(args):
    from .verify import junit_xml, report_json, run_all
    cfg, s = _setup(args)
    results = run_all(cfg.seed, s, args.filter, n_draws=args.draws, n_runs=args.runs)
    if not results:
        raise CLIError(f"no checks match filter {args.filter!r}")
    print(report_json(results))
    if args.junit:
        Path(args.junit).write_text(junit_xml(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_schedule_dump(args):
    _, s = _setup(args)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "eta", "gamma"])
        w.writerow([0, "", "", repr(0.0)])
        for t in range(1, s.T + 1):
            w.writerow([t, repr(float(s.beta[t - 1])), repr(float(s.eta[t - 1])), repr(float(s.gamma[t]))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.fig:
        from .plotting import plot_schedule
        plot_schedule(s, args.fig)
    return 0


def cmd_ablation(args):
    from .ablation import AblationSpec, run_ablation, summarize, write_ablation
    cfg, _ = _setup(args)
    spec = AblationSpec(schemes=tuple(args.schemes.split(",")), iterations=args.iters, seed=cfg.seed)
    logs = run_ablation(spec)
    write_ablation(args.out_dir, logs, spec)
    print(json.dumps(summarize(logs), indent=2))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--presets", default=None, help="gain preset JSON file")
    noise.add_argument("--white-level", type=float, default=None, dest="white_level")

    parser = argparse.ArgumentParser(prog="svnr", description="Spatially-variant noise removal with diffusion.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common, noise], help="add simulated sensor noise to a PNG")
    p.add_argument("--preset", required=True)
    p.add_argument("--dump-sigma", default=None, help="write the per-pixel noise std as .f32")
    p.add_argument("--dump-linear", default=None, help="write the unclipped-at-top linear noisy raster as .f32")
    p.add_argument("--no-clip", action="store_true", help="do not clip negative values")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-tmap", parents=[common, noise], help="estimate the per-pixel time map")
    p.add_argument("--preset", required=True)
    p.add_argument("--heat", default=None, help="also render the map as a PNG heat image")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_estimate_tmap)

    p = sub.add_parser("denoise", parents=[common, noise], help="denoise by diffusion started from the input")
    p.add_argument("--preset", required=True)
    p.add_argument("--denoiser", default="analytic", help="'analytic' or 'net:weights.bin'")
    p.add_argument("--trace", default=None, help="directory for per-step rasters")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("train", parents=[common, noise], help="train the tiny denoiser")
    p.add_argument("--scheme", default=None, choices=["A", "B1", "B2", "C1", "C2", "C3"])
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--val-every", type=int, default=None, dest="val_every")
    p.add_argument("--val-preset", default="gain16", dest="val_preset")
    p.add_argument("--n-val", type=int, default=6, dest="n_val")
    p.add_argument("--no-val", action="store_true", dest="no_val")
    p.add_argument("--n-textures", type=int, default=200, dest="n_textures")
    p.add_argument("--data", default=None, help="directory of PNG training images")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="CSV log: iter,loss,val_psnr,val_ssim")
    p.add_argument("--fig", default=None, help="validation-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", parents=[common, noise], help="PSNR / SSIM between two images")
    p.add_argument("reference")
    p.add_argument("output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", parents=[common], help="run the numerical verification suite")
    p.add_argument("--filter", default=None)
    p.add_argument("--junit", default=None)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--runs", type=int, default=10_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("schedule-dump", parents=[common], help="write t,beta,eta,gamma as CSV")
    p.add_argument("--output", "-o", default=None)
    p.add_argument("--fig", default=None)
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("ablation", parents=[common], help="train and compare the ablation schemes")
    p.add_argument("--schemes", default="C1,C2,C3,B1")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, PresetFileError, rio.ImageDecodeError, ValueError, OSError) as e:
        print(f"svnr: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
