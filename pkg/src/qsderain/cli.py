"""Command line entry point: ``qsderain <subcommand> ...``.

Every subcommand reads an optional flat ``key = value`` file (``--config``)
whose settings are overridden by explicit flags.  Exit status is 0 on
success, 1 on runtime failure and 2 on usage errors (bad flags, missing
settings, missing files).
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, merge_settings, write_kv

log = logging.getLogger("qsderain")


class UsageError(Exception):
    pass


def _require(settings, *keys):
    for k in keys:
        if settings.get(k) in (None, ""):
            raise UsageError(f"missing required setting {k!r} (pass --{k.replace('_', '-')} or set it in --config)")


def _seed_everything(seed):
    import torch

    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _pair(s):
    parts = [p for p in s.split(",") if p.strip()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {s!r}")
    return s


# --- defaults per subcommand ----------------------------------------------------

GEN_DEFAULTS = {
    "out": None, "n_train": 8, "n_val": 2, "n_test": 2, "seed": 0, "size": 128, "backgrounds": None,
    "density": 8.0, "angle": (-30.0, 30.0), "length": (8, 24), "width": (1, 3),
    "intensity": (0.02, 0.5), "blur": 0.7,
}

SPARSITY_DEFAULTS = {
    "images": None, "pattern": "*.png", "bins": 24, "epsilon": 0.1, "out": None, "out_csv": None,
    "plots": False, "mixture": True, "seed": 0,
}

NET_DEFAULTS = {"channels": 64, "groups": 4, "units": 12, "rates": (1, 2, 4, 6), "sharing": True}

TRAIN_DEFAULTS = {
    "data": None, "out": None, "seed": 0, "variant": "V4", "crop": 64, "batch_size": 4, "steps": 3000,
    "lr": 1e-3, "plateau_factor": 0.1, "plateau_patience": 5, "eval_interval": 200, "grad_clip": 5.0,
    "lambda_q": 1e-3, "lambda_c": 1.0, "lambda_a": 0.01, "lambda_d": 1e-4, "resume": None,
    **NET_DEFAULTS,
}

EVAL_DEFAULTS = {"checkpoint": None, "data": None, "split": "test", "out": None, "panels": 0, "seed": 0}
DERAIN_DEFAULTS = {"checkpoint": None, "in_path": None, "out": None, "seed": 0}
ABLATE_DEFAULTS = {**TRAIN_DEFAULTS, "train": False, "splits": ("train", "val", "test")}
SCALE_DEFAULTS = {"checkpoint": None, "data": None, "split": "test", "out": None, "seed": 0}
BENCH_DEFAULTS = {"checkpoint": None, "compare": None, "size": 512, "warmup": 10, "runs": 50, "out": None,
                  "seed": 0}


def _settings(args, defaults):
    overrides = {k: getattr(args, k, None) for k in defaults}
    return merge_settings(defaults, args.config, overrides)


# --- subcommands -------------------------------------------------------------


def cmd_gen_data(s):
    from .rain import RainParams, build_dataset, index_digest

    _require(s, "out")
    params = RainParams(streak_count_per_kpx=s["density"], angle_deg=s["angle"], length_px=s["length"],
                        width_px=s["width"], intensity=s["intensity"], blur_sigma=s["blur"], seed=s["seed"])
    index = build_dataset(s["out"], params, s["n_train"], s["n_val"], s["n_test"], seed=s["seed"],
                          size=s["size"], backgrounds_dir=s["backgrounds"])
    print(f"wrote {len(index['samples'])} samples to {s['out']} (index sha256 {index_digest(s['out'])})")


def _collect_images(spec, pattern):
    p = Path(spec)
    if p.is_dir():
        return sorted(p.rglob(pattern))
    if p.is_file():
        return [p]
    hits = sorted(glob.glob(spec))
    if not hits:
        raise UsageError(f"no images match {spec!r}")
    return [Path(h) for h in hits]


def cmd_analyze_sparsity(s):
    from .sparsity import MIN_BINS, corpus_sparsity_statistics, plot_log_histogram, write_reports_csv

    _require(s, "images")
    if s["bins"] < MIN_BINS:
        raise UsageError(f"--bins must be >= {MIN_BINS}, got {s['bins']}")
    if s["out_csv"] is None:
        _require(s, "out")
    out_csv = Path(s["out_csv"]) if s["out_csv"] else Path(s["out"]) / "sparsity.csv"
    paths = _collect_images(s["images"], s["pattern"])
    if not paths:
        raise UsageError(f"no images found under {s['images']!r}")
    res = corpus_sparsity_statistics(paths, n_bins=s["bins"], eps_chord=s["epsilon"], fit_mixture=s["mixture"])
    write_reports_csv(res.reports, out_csv)
    if s["plots"]:
        plot_dir = out_csv.parent / "histograms"
        for r in res.reports:
            plot_log_histogram(r, plot_dir / (Path(r.path).stem + ".png"))
    print(f"sparse fraction: {res.fraction_sparse:.4f} ({res.n_sparse}/{len(res.reports)} images, "
          f"{len(res.skipped)} skipped)")


def _train_configs(s):
    from .losses import LossWeights
    from .network import QSNetConfig
    from .training import TrainConfig

    net = QSNetConfig(channels=s["channels"], groups=s["groups"], n_units=s["units"],
                      atrous_rates=tuple(s["rates"]), feature_sharing=s["sharing"])
    weights = LossWeights(quasi_sparsity=s["lambda_q"], content=s["lambda_c"], auxiliary=s["lambda_a"],
                          detail=s["lambda_d"])
    cfg = TrainConfig(crop=s["crop"], batch_size=s["batch_size"], max_steps=s["steps"], base_lr=s["lr"],
                      plateau_factor=s["plateau_factor"], plateau_patience=s["plateau_patience"],
                      eval_interval=s["eval_interval"], grad_clip=s["grad_clip"], weights=weights,
                      variant=s["variant"], feature_sharing=s["sharing"], seed=s["seed"])
    return net, cfg


def _check_dataset(root):
    if not (Path(root) / "index.json").exists():
        raise UsageError(f"dataset index not found: {Path(root) / 'index.json'}")


def cmd_train(s):
    from .training import train

    _require(s, "data", "out")
    _check_dataset(s["data"])
    if s["resume"] and not Path(s["resume"]).exists():
        raise UsageError(f"resume checkpoint not found: {s['resume']}")
    net, cfg = _train_configs(s)
    res = train(s["data"], net, cfg, out_dir=s["out"], resume_from=s["resume"])
    print(f"trained {res.steps} steps; best val PSNR {res.best_val_psnr:.3f} dB -> {res.best_path}")


def _check_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")


def cmd_eval(s):
    from .evaluation import evaluate

    _require(s, "checkpoint", "data", "out")
    _check_checkpoint(s["checkpoint"])
    _check_dataset(s["data"])
    res = evaluate(s["checkpoint"], s["data"], s["split"], out_dir=s["out"], panels=s["panels"])
    print(f"{s['split']}: PSNR {res.mean_psnr:.3f} dB (input {res.mean_input_psnr:.3f} dB), "
          f"SSIM {res.mean_ssim:.4f} over {len(res.rows)} images")


def cmd_derain(s):
    from .evaluation import forward_numpy
    from .imaging import read_png, write_png
    from .network import load_checkpoint

    _require(s, "checkpoint", "in_path", "out")
    _check_checkpoint(s["checkpoint"])
    if not Path(s["in_path"]).exists():
        raise UsageError(f"input image not found: {s['in_path']}")
    model, _ = load_checkpoint(s["checkpoint"])
    img = read_png(s["in_path"])
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    derained, _, _ = forward_numpy(model, img)
    write_png(s["out"], derained)
    print(f"wrote {s['out']}")


def cmd_ablate(s):
    from .losses import VARIANTS
    from .training import run_ablation, train

    _require(s, "data", "out")
    _check_dataset(s["data"])
    out = Path(s["out"])
    ckpts = {v: out / v / "best.pt" for v in VARIANTS}
    if s["train"]:
        for v in VARIANTS:
            net, cfg = _train_configs({**s, "variant": v})
            train(s["data"], net, cfg, out_dir=out / v)
    missing = [v for v, p in ckpts.items() if not p.exists()]
    if missing:
        raise UsageError(f"missing checkpoints for variants {missing} under {out} (use --train)")
    rows = run_ablation(s["data"], ckpts, splits=tuple(s["splits"]), out_dir=out)
    for r in rows:
        print(f"{r['variant']} {r['split']:>5}: {r['psnr']:.3f} / {r['ssim']:.4f}")


def cmd_scale_study(s):
    from .evaluation import per_scale_decode_eval

    _require(s, "checkpoint", "data", "out")
    _check_checkpoint(s["checkpoint"])
    _check_dataset(s["data"])
    table = per_scale_decode_eval(s["checkpoint"], s["data"], s["split"], out_dir=s["out"])
    print("  ".join(f"{k}: {v['psnr']:.2f}/{v['ssim']:.3f}" for k, v in table.items()))


def cmd_bench(s):
    from .evaluation import benchmark_speed

    _require(s, "checkpoint", "out")
    _check_checkpoint(s["checkpoint"])
    if s["compare"]:
        _check_checkpoint(s["compare"])
    report = {"primary": benchmark_speed(s["checkpoint"], s["size"], s["warmup"], s["runs"], seed=s["seed"])}
    if s["compare"]:
        report["compare"] = benchmark_speed(s["compare"], s["size"], s["warmup"], s["runs"], seed=s["seed"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    for k, r in report.items():
        print(f"{k}: median {r['median_s'] * 1e3:.2f} ms per {r['size']}x{r['size']} image")


COMMANDS = {
    "gen-data": (cmd_gen_data, GEN_DEFAULTS),
    "analyze-sparsity": (cmd_analyze_sparsity, SPARSITY_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "derain": (cmd_derain, DERAIN_DEFAULTS),
    "ablate": (cmd_ablate, ABLATE_DEFAULTS),
    "scale-study": (cmd_scale_study, SCALE_DEFAULTS),
    "bench": (cmd_bench, BENCH_DEFAULTS),
}


def _add_train_flags(p):
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--variant", choices=["V1", "V2", "V3", "V4"])
    p.add_argument("--crop", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--plateau-factor", type=float)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--lambda-q", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--lambda-d", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--units", type=int)
    p.add_argument("--rates", help="comma-separated atrous rates")
    p.add_argument("--sharing", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--resume")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsderain", description="Quasi-sparse single-image deraining toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int)
        return p

    p = add("gen-data", "generate a synthetic paired rain dataset")
    p.add_argument("--out")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--backgrounds", help="directory of background images (procedural if omitted)")
    p.add_argument("--density", type=float, help="streaks per 1000 pixels")
    p.add_argument("--angle", type=_pair, help="lo,hi degrees from vertical")
    p.add_argument("--length", type=_pair)
    p.add_argument("--width", type=_pair)
    p.add_argument("--intensity", type=_pair)
    p.add_argument("--blur", type=float)

    p = add("analyze-sparsity", "chord sparsity test over an image corpus")
    p.add_argument("--images", help="directory, file or glob")
    p.add_argument("--pattern", help="filename pattern inside a directory (default *.png)")
    p.add_argument("--bins", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out")
    p.add_argument("--out-csv")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mixture", action=argparse.BooleanOptionalAction, default=None)

    p = add("train", "train a network")
    _add_train_flags(p)

    for name, help_ in (("eval", "score a checkpoint on a split"), ("scale-study", "per-scale decoding table")):
        p = add(name, help_)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--split", choices=["train", "val", "test"])
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--panels", type=int, help="number of side-by-side PNG panels to write")

    p = add("derain", "derain one PNG")
    p.add_argument("--checkpoint")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")

    p = add("ablate", "V1-V4 loss ablation table")
    _add_train_flags(p)
    p.add_argument("--train", action=argparse.BooleanOptionalAction, default=None,
                   help="train the four variants before scoring")
    p.add_argument("--splits", help="comma-separated splits to score")

    p = add("bench", "inference latency")
    p.add_argument("--checkpoint")
    p.add_argument("--compare", help="second checkpoint (e.g. without feature sharing)")
    p.add_argument("--size", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    func, defaults = COMMANDS[args.command]
    try:
        settings = _settings(args, defaults)
        _seed_everything(settings["seed"])
        func(settings)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"qsderain {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"qsderain {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
