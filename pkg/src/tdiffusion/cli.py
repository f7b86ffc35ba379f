"""Command line entry point: ``tdiffusion {degrade,train,enhance,eval,bench}``.

Exit codes: 0 success, 1 usage error (bad flags, config, paths), 2 runtime
error. Failures print a single ``error<TAB>kind<TAB>message`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import plotting
from .backbone import DenoiserNetwork, vanilla_config
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .degrade import MANIFEST_NAME, DegradeParams, build_pair_dataset
from .images import list_images, load_stack, read_image, to_uint8, write_png
from .metrics import BenchReport, QualityReport, QualityRow, error_heatmap, fps_bench, psnr, ssim
from .schedule import ResolutionSchedule, ScheduleError
from .tdiff import NoiseSource, TDiffusion
from .trainer import PairDataset, build_models, fit, models_from_checkpoint

log = logging.getLogger("tdiffusion")

PARAM_RATIO_LIMIT = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_args(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cmd_degrade(args) -> int:
    config = _resolve_config(args)
    src = Path(args.src)
    if not src.is_dir():
        raise UsageError(f"source directory not found: {src}")
    params = DegradeParams(
        tuple(config.degrade.gamma_range), tuple(config.degrade.illum_range), config.seed
    )
    manifest = build_pair_dataset(src, args.dst, params)
    (Path(args.dst) / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    path = Path(args.dst) / MANIFEST_NAME
    print(f"{path}\t{len(manifest.entries)} pairs\t{len(manifest.errors)} errors")
    return 0


def load_pairs(pairs_dir) -> PairDataset:
    pairs_dir = Path(pairs_dir)
    low_dir, normal_dir = pairs_dir / "low", pairs_dir / "normal"
    if not low_dir.is_dir() or not normal_dir.is_dir():
        raise UsageError(f"{pairs_dir} must contain low/ and normal/ subdirectories")
    names = [p.name for p in list_images(normal_dir)]
    missing = sorted(set(names) ^ {p.name for p in list_images(low_dir)})
    if missing:
        raise UsageError(f"low/ and normal/ differ in files: {', '.join(missing)}")
    if not names:
        raise UsageError(f"no training pairs in {pairs_dir}")
    return PairDataset(load_stack([low_dir / n for n in names]), load_stack([normal_dir / n for n in names]), names)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset = load_pairs(args.pairs)
    out = Path(args.out)
    ckpt = fit(config, dataset, out, resume=args.resume, iterations=args.stop_at)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    plotting.loss_curve(out / "metrics.txt", out / "loss.png")
    print(ckpt)
    return 0


def _pad_to(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return torch.nn.functional.pad(x[None], (0, pw, 0, ph), mode="replicate")[0]


def cmd_enhance(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    try:
        config, models = models_from_checkpoint(payload)
    except Exception as exc:
        raise CheckpointError(f"cannot restore models from {args.checkpoint}: {exc}") from exc
    inputs = list_images(args.input) if Path(args.input).is_dir() else None
    if not inputs:
        raise UsageError(f"no input images in {args.input}")
    boundaries = models.diffusion.resolution.boundaries
    multiple = config.network.divisor * 2 ** len(boundaries)
    provenance = json.dumps({"seed": args.seed, "config": config.to_dict()}, sort_keys=True)
    out_dir = Path(args.output)
    # stage into a temp dir so a failure leaves no partial outputs
    with tempfile.TemporaryDirectory(dir=out_dir.parent if out_dir.parent.exists() else None) as tmp:
        for index, path in enumerate(inputs):
            image = torch.from_numpy(read_image(path)).float()
            h, w = image.shape[-2:]
            padded = _pad_to(image, multiple)
            engine = TDiffusion(
                models.diffusion.noise,
                ResolutionSchedule(models.diffusion.T, tuple(padded.shape[-2:]), boundaries),
                models.diffusion.upsample_mode,
                models.diffusion.increase_variance,
            )
            rng = NoiseSource(_seed_for(args.seed, index))
            result = engine.sample(padded, models.denoiser, models.chroma, rng)[:, :h, :w]
            info = PngInfo()
            info.add_text("tdiffusion", provenance)
            Image.fromarray(to_uint8(result)).save(Path(tmp) / (path.stem + ".png"), pnginfo=info)
            log.info("enhanced %s", path.name)
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(Path(tmp).iterdir()):
            shutil.move(str(f), out_dir / f.name)
    print(f"{out_dir}\t{len(inputs)} images")
    return 0


def cmd_eval(args) -> int:
    enhanced, reference = Path(args.enhanced), Path(args.reference)
    for d in (enhanced, reference):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    e_names = {p.name for p in list_images(enhanced)}
    r_names = {p.name for p in list_images(reference)}
    diff = sorted(e_names ^ r_names)
    if diff:
        raise UsageError(f"filename sets differ: {', '.join(diff)}")
    out = Path(args.out)
    rows = []
    for name in sorted(r_names):
        ref, cand = read_image(reference / name), read_image(enhanced / name)
        if ref.shape != cand.shape:
            raise UsageError(f"{name}: shape {cand.shape} does not match reference {ref.shape}")
        rows.append(QualityRow(name, psnr(ref, cand), ssim(ref, cand)))
        write_png(out / "heatmaps" / (Path(name).stem + ".png"), error_heatmap(ref, cand, args.heatmap_scale))
        if args.figures:
            plotting.heatmap_panel(ref, cand, args.heatmap_scale, out / "figures" / (Path(name).stem + ".png"), name)
    report = QualityReport(rows)
    header = "# " + json.dumps({"enhanced": str(enhanced), "reference": str(reference),
                                "heatmap_scale": args.heatmap_scale})
    (out / "report.tsv").write_text(header + "\n" + report.dumps())
    plotting.quality_chart(report, out / "quality.png")
    sys.stdout.write(report.dumps())
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        config, models = models_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        config = _resolve_config(args)
        models = None
    h, w = args.resolution
    if h % 4 or w % 4:
        raise UsageError(f"resolution {h}x{w} must be divisible by 4 (two exact halvings)")
    try:
        if models is None:
            models = build_models(config, (h, w))
        else:
            models.diffusion = TDiffusion(
                models.diffusion.noise,
                ResolutionSchedule(models.diffusion.T, (h, w), models.diffusion.resolution.boundaries),
            )
    except (ValueError, ScheduleError) as exc:
        raise UsageError(str(exc)) from exc
    warmup = config.eval.bench_warmup if args.warmup is None else args.warmup
    timed = config.eval.bench_timed if args.timed is None else args.timed
    if timed < 30:
        raise UsageError(f"--timed must be at least 30, got {timed}")
    reports = [fps_bench(models.denoiser, models.chroma, models.diffusion, (h, w), warmup, timed,
                         config.seed, label="light")]
    ratio = None
    if args.compare == "vanilla":
        vcfg = vanilla_config()
        if h % vcfg.divisor or w % vcfg.divisor:
            raise UsageError(f"resolution {h}x{w} must be divisible by {vcfg.divisor} for the vanilla baseline")
        torch.manual_seed(config.seed)
        vanilla = DenoiserNetwork(vcfg)
        engine = TDiffusion(models.diffusion.noise, ResolutionSchedule(models.diffusion.T, (h, w), ()))
        reports.append(fps_bench(vanilla, None, engine, (h, w), warmup, timed, config.seed, label="vanilla"))
        ratio = reports[0].parameters / reports[1].parameters
    lines = ["# " + json.dumps({"seed": config.seed, "config": config.to_dict()}, sort_keys=True),
             BenchReport.HEADER] + [r.dumps() for r in reports]
    if ratio is not None:
        lines.append(f"# param_ratio\t{ratio:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(text)
        plotting.bench_chart(reports, out / "bench.png")
    sys.stdout.write(text)
    if ratio is not None and not ratio < PARAM_RATIO_LIMIT:
        raise RuntimeError(f"parameter ratio {ratio:.4f} is not below {PARAM_RATIO_LIMIT}")
    return 0


def _resolution(text: str) -> tuple[int, int]:
    try:
        parts = [int(v) for v in text.lower().replace("x", ",").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tdiffusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="synthesise low-light pairs")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    _config_args(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train denoiser + chroma balancer")
    p.add_argument("--pairs", required=True, help="directory with low/ and normal/")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this iteration")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a directory of low-light images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM report and error heatmaps")
    p.add_argument("--enhanced", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap-scale", type=float, default=0.5)
    p.add_argument("--figures", action="store_true", help="also render per-image comparison panels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="parameter count and sampling throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--compare", choices=["vanilla"])
    p.add_argument("--warmup", type=int)
    p.add_argument("--timed", type=int)
    p.add_argument("--out")
    _config_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(code: int, kind: str, message) -> int:
    print(f"error\t{kind}\t{str(message).splitlines()[0] if str(message) else kind}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        return _fail(1, type(exc).__name__, exc)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail(2, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
