"""Scoring trained checkpoints.

PSNR is reported on luma (the headline number) and as the mean of
per-channel PSNRs; SSIM is computed on luma.
"""
from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .imaging import as_image, psnr, psnr_per_channel, ssim, to_gray, write_png
from .network import QSNet, load_checkpoint
from .rain import load_split
from .sparsity import SparsityReport, analyze_image

__all__ = [
    "EvalResult",
    "score_pair",
    "forward_numpy",
    "evaluate",
    "per_scale_decode_eval",
    "verify_output_sparsity",
    "benchmark_speed",
    "hardware_descriptor",
    "save_panel",
]

ROW_FIELDS = ["id", "psnr", "psnr_rgb", "ssim", "input_psnr", "input_ssim"]


def _model(checkpoint) -> QSNet:
    if isinstance(checkpoint, QSNet):
        checkpoint.eval()
        return checkpoint
    model, _ = load_checkpoint(checkpoint)
    return model


def score_pair(pred, target) -> dict:
    pred, target = as_image(pred), as_image(target)
    return {
        "psnr": psnr(to_gray(pred), to_gray(target)),
        "psnr_rgb": psnr_per_channel(pred, target),
        "ssim": ssim(pred, target),
    }


@torch.no_grad()
def forward_numpy(model: QSNet, rainy: np.ndarray):
    """Run one ``H x W x C`` image; return ``(derained, rain, [aux derained...])`` as float64 arrays."""
    x = torch.from_numpy(np.ascontiguousarray(rainy.transpose(2, 0, 1)))[None].float()
    out = model(x)
    to_np = lambda t: t[0].permute(1, 2, 0).double().numpy()
    derained = to_np((x - out.rain).clamp(0, 1))
    aux = [to_np((x - a).clamp(0, 1)) for a in out.aux_rains]
    return derained, to_np(out.rain), aux


@dataclass
class EvalResult:
    rows: list
    mean_psnr: float
    mean_psnr_rgb: float
    mean_ssim: float
    mean_input_psnr: float
    outputs: dict = field(default_factory=dict, repr=False)

    @property
    def improvement_db(self) -> float:
        return self.mean_psnr - self.mean_input_psnr


def _fmt(v):
    return f"{v:.10f}" if isinstance(v, float) else v


def _write_rows(path, rows, fields):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def evaluate(checkpoint, dataset_root, split: str = "test", out_dir=None, keep_outputs: bool = False,
             panels: int = 0) -> EvalResult:
    """Derain every image of ``split`` and score it against its background.

    With ``out_dir`` writes ``eval_<split>.csv`` (per image),
    ``eval_<split>.json`` (means) and up to ``panels`` side-by-side PNGs.
    """
    model = _model(checkpoint)
    samples = load_split(dataset_root, split)
    if not samples:
        raise ValueError(f"split {split!r} has no samples")
    rows, outputs = [], {}
    for s in samples:
        derained, rain, _ = forward_numpy(model, s.rainy)
        sc = score_pair(derained, s.background)
        rows.append({"id": s.id, **sc, "input_psnr": psnr(to_gray(s.rainy), to_gray(s.background)),
                     "input_ssim": ssim(s.rainy, s.background)})
        if keep_outputs:
            outputs[s.id] = (derained, rain)
        if out_dir is not None and len(rows) <= panels:
            save_panel(Path(out_dir) / "panels" / f"{split}_{s.id}.png", s.rainy, derained, rain, s.background)
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    res = EvalResult(rows, mean("psnr"), mean("psnr_rgb"), mean("ssim"), mean("input_psnr"), outputs)
    if out_dir is not None:
        out = Path(out_dir)
        _write_rows(out / f"eval_{split}.csv", rows, ROW_FIELDS)
        summary = {"split": split, "n_images": len(rows), "mean_psnr": res.mean_psnr,
                   "mean_psnr_rgb": res.mean_psnr_rgb, "mean_ssim": res.mean_ssim,
                   "mean_input_psnr": res.mean_input_psnr, "improvement_db": res.improvement_db}
        (out / f"eval_{split}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return res


def per_scale_decode_eval(checkpoint, dataset_root, split: str = "test", out_dir=None) -> dict:
    """Mean PSNR/SSIM of each auxiliary decoder's background and of the fused output.

    Columns are ``C1 .. Cn`` (pointwise path, then one per atrous rate) and
    ``all``.  All columns come from one forward pass per image.
    """
    model = _model(checkpoint)
    samples = load_split(dataset_root, split)
    if not samples:
        raise ValueError(f"split {split!r} has no samples")
    names = [f"C{i + 1}" for i in range(model.cfg.n_aux)] + ["all"]
    scores = {n: [] for n in names}
    for s in samples:
        derained, _, aux = forward_numpy(model, s.rainy)
        for n, pred in zip(names, aux + [derained]):
            scores[n].append(score_pair(pred, s.background))
    table = {n: {"psnr": float(np.mean([v["psnr"] for v in scores[n]])),
                 "ssim": float(np.mean([v["ssim"] for v in scores[n]]))} for n in names}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"scale_study_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric"] + names)
            for m in ("psnr", "ssim"):
                w.writerow([m] + [f"{table[n][m]:.6f}" for n in names])
    return table


def verify_output_sparsity(checkpoint, images, **kw) -> list[dict]:
    """Sparsity reports for each input, its derained output and its predicted rain layer.

    ``images`` are ``H x W x C`` arrays or objects with a ``rainy`` attribute.
    Degenerate layers (e.g. an all-zero rain prediction) come back flagged
    rather than raising.
    """
    model = _model(checkpoint)
    kw.setdefault("fit_mixture", False)
    out = []
    for k, img in enumerate(images):
        rainy = getattr(img, "rainy", img)
        name = getattr(img, "id", str(k))
        derained, rain, _ = forward_numpy(model, as_image(rainy))
        out.append({
            "id": name,
            "input": analyze_image(rainy, path=f"{name}:input", **kw),
            "derained": analyze_image(derained, path=f"{name}:derained", **kw),
            "rain": analyze_image(rain, path=f"{name}:rain", **kw),
        })
    return out


def hardware_descriptor() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cuda": torch.cuda.is_available(),
    }


@torch.no_grad()
def benchmark_speed(checkpoint, size: int = 512, n_warmup: int = 10, n_runs: int = 50, seed: int = 0) -> dict:
    """Per-image latency of ``clamp(I - S(I))`` at batch size 1.

    Inputs are generated up front, so the timed span is tensor in to tensor
    out with no I/O.
    """
    if n_runs < 1 or n_warmup < 0:
        raise ValueError("need n_runs >= 1 and n_warmup >= 0")
    model = _model(checkpoint)
    gen = torch.Generator().manual_seed(seed)
    inputs = [torch.rand(1, model.cfg.in_channels, size, size, generator=gen) for _ in range(n_warmup + n_runs)]
    times = []
    for k, x in enumerate(inputs):
        t0 = time.perf_counter()
        (x - model(x).rain).clamp_(0, 1)
        dt = time.perf_counter() - t0
        if k >= n_warmup:
            times.append(dt)
    return {
        "size": size,
        "n_warmup": n_warmup,
        "n_runs": n_runs,
        "mean_s": float(np.mean(times)),
        "median_s": float(statistics.median(times)),
        "min_s": float(np.min(times)),
        "std_s": float(np.std(times)),
        "hardware": hardware_descriptor(),
    }


def save_panel(path, rainy, derained, rain, truth) -> None:
    """Write ``input | derained | rain layer | ground truth`` side by side."""
    tiles = [as_image(t) for t in (rainy, derained, rain, truth)]
    c = max(t.shape[2] for t in tiles)
    tiles = [np.repeat(t, c, axis=2) if t.shape[2] == 1 else t for t in tiles]
    gap = np.ones((tiles[0].shape[0], 2, c))
    strip = [tiles[0]]
    for t in tiles[1:]:
        strip += [gap, np.clip(t, 0, 1)]
    write_png(path, np.concatenate(strip, axis=1))
