"""Training loop, ablation variants and the feature-sharing study."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .imaging import psnr
from .losses import VARIANTS, LossWeights, total_loss
from .network import QSNet, QSNetConfig, count_parameters, load_checkpoint, save_checkpoint
from .rain import index_digest, load_split

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "samples_to_tensors",
    "train",
    "run_ablation",
    "run_sharing_study",
    "LOG_FIELDS",
]

LOG_FIELDS = ["step", "lr", "quasi_sparsity", "content", "detail", "auxiliary", "total"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    crop: int = 64
    batch_size: int = 4
    max_steps: int = 3000
    base_lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-3
    eval_interval: int = 200
    grad_clip: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "V4"
    feature_sharing: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.crop < 16 or self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1:
            raise ValueError("invalid crop / batch_size / max_steps / eval_interval")

    @property
    def effective_weights(self) -> LossWeights:
        return self.weights.for_variant(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    best_val_psnr: float
    steps: int
    history: list
    lr_history: list


def samples_to_tensors(samples):
    """Stack samples into ``(rainy, background, location)`` float32 tensors (N x C x H x W)."""
    if not samples:
        raise ValueError("no samples")
    rainy = torch.from_numpy(np.stack([s.rainy for s in samples])).permute(0, 3, 1, 2).float()
    bg = torch.from_numpy(np.stack([s.background for s in samples])).permute(0, 3, 1, 2).float()
    loc = torch.from_numpy(np.stack([s.location for s in samples]))[:, None].float()
    return rainy.contiguous(), bg.contiguous(), loc.contiguous()


def _random_batch(data, cfg: TrainConfig, gen: torch.Generator):
    rainy, bg, loc = data
    n, _, h, w = rainy.shape
    crop = min(cfg.crop, h, w)
    idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
    ii = torch.randint(0, h - crop + 1, (cfg.batch_size,), generator=gen)
    jj = torch.randint(0, w - crop + 1, (cfg.batch_size,), generator=gen)
    sl = [(int(k), slice(int(i), int(i) + crop), slice(int(j), int(j) + crop)) for k, i, j in zip(idx, ii, jj)]
    pick = lambda t: torch.stack([t[k, :, a, b] for k, a, b in sl])
    return pick(rainy), pick(bg), pick(loc), idx.tolist()


@torch.no_grad()
def _evaluate_split(model, data, weights):
    """Mean total loss and mean RGB PSNR of the derained images, one image at a time."""
    model.eval()
    rainy, bg, loc = data
    losses, scores = [], []
    for k in range(rainy.shape[0]):
        x, b, l = rainy[k:k + 1], bg[k:k + 1], loc[k:k + 1]
        out = model(x)
        losses.append(float(total_loss(x, b, l, out, weights).total))
        derained = (x - out.rain).clamp(0, 1)
        scores.append(psnr(derained.double().numpy(), b.double().numpy()))
    model.train()
    return float(np.mean(losses)), float(np.mean(scores))


def _append_log(path, rows):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"], f"{r['lr']:.6g}"] + [f"{r[k]:.9g}" for k in LOG_FIELDS[2:]])


def train(dataset_root, net_cfg: QSNetConfig | None = None, cfg: TrainConfig | None = None,
          out_dir="run", resume_from=None, train_samples=None, val_samples=None) -> TrainResult:
    """Optimise a fresh (or resumed) network on the dataset's train split.

    Writes under ``out_dir``: ``train_log.csv`` (one row per step),
    ``manifest.json`` (both configs, effective loss weights, dataset digest),
    ``best.pt`` (best validation PSNR) and ``last.pt`` (full state for
    resuming).  A non-finite loss aborts with :class:`TrainingDiverged` after
    dumping the offending batch to ``nan_batch.pt``.
    """
    cfg = cfg or TrainConfig()
    net_cfg = net_cfg or QSNetConfig()
    net_cfg = replace(net_cfg, feature_sharing=cfg.feature_sharing)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(dataset_root) if dataset_root is not None else None

    if train_samples is None:
        train_samples = load_split(root, "train")
    if val_samples is None:
        val_samples = load_split(root, "val")
    if not train_samples:
        raise ValueError("training split is empty")
    train_data = samples_to_tensors(train_samples)
    val_data = samples_to_tensors(val_samples) if val_samples else train_data
    weights = cfg.effective_weights

    torch.manual_seed(cfg.seed)
    model = QSNet(net_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8)
    # torch counts patience as bad evals tolerated; ours is the eval that triggers
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=max(cfg.plateau_patience - 1, 0),
        threshold=cfg.plateau_threshold, threshold_mode="rel")
    gen = torch.Generator().manual_seed(cfg.seed)
    step, best_psnr = 0, -math.inf
    log_path = out / "train_log.csv"

    if resume_from is not None:
        state = torch.load(resume_from, map_location="cpu", weights_only=False)
        model.load_state_dict(state["state_dict"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        gen.set_state(state["generator"])
        step, best_psnr = state["step"], state["best_val_psnr"]
    elif log_path.exists():
        log_path.unlink()

    manifest = {
        "train_config": cfg.to_dict(),
        "net_config": net_cfg.to_dict(),
        "effective_weights": weights.to_dict(),
        "dataset_index_sha256": index_digest(root) if root is not None and (root / "index.json").exists() else None,
        "n_parameters": count_parameters(model),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    history, lr_history, pending = [], [], []
    t0 = time.perf_counter()

    def snapshot(path, **extra):
        save_checkpoint(path, model, step=step, best_val_psnr=best_psnr,
                        train_config=cfg.to_dict(), **extra)

    while step < cfg.max_steps:
        x, b, l, ids = _random_batch(train_data, cfg, gen)
        out_ = model(x)
        parts = total_loss(x, b, l, out_, weights)
        if not torch.isfinite(parts.total):
            torch.save({"step": step, "sample_ids": ids, "rainy": x, "background": b, "location": l},
                       out / "nan_batch.pt")
            _append_log(log_path, pending)
            raise TrainingDiverged(f"non-finite loss at step {step} (batch sample ids {ids}); dumped nan_batch.pt")
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        step += 1
        lr = opt.param_groups[0]["lr"]
        row = {"step": step, "lr": lr, **parts.as_floats()}
        history.append(row)
        lr_history.append(lr)
        pending.append(row)

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            val_loss, val_psnr = _evaluate_split(model, val_data, weights)
            sched.step(val_loss)
            log.info("step %d lr %.2g loss %.5f val_loss %.5f val_psnr %.2f (%.0fs)",
                     step, lr, row["total"], val_loss, val_psnr, time.perf_counter() - t0)
            if val_psnr > best_psnr:
                best_psnr = val_psnr
                snapshot(out / "best.pt", val_loss=val_loss)
            _append_log(log_path, pending)
            pending = []

    _append_log(log_path, pending)
    if not (out / "best.pt").exists():
        snapshot(out / "best.pt")
    state = {"state_dict": model.state_dict(), "optimizer": opt.state_dict(), "scheduler": sched.state_dict(),
             "generator": gen.get_state(), "step": step, "best_val_psnr": best_psnr,
             "config": net_cfg.to_dict(), "train_config": cfg.to_dict()}
    torch.save(state, out / "last.pt")
    (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0, "steps": step}))
    return TrainResult(out / "best.pt", out / "last.pt", best_psnr, step, history, lr_history)


def run_ablation(dataset_root, checkpoints: dict, splits=("train", "val", "test"), out_dir=None):
    """PSNR/SSIM of each variant's checkpoint on each split: one row per (variant, split)."""
    from .evaluation import evaluate

    missing = [v for v in VARIANTS if v not in checkpoints or not Path(checkpoints[v]).exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints for variants: {missing}")
    rows = []
    for variant in VARIANTS:
        for split in splits:
            res = evaluate(checkpoints[variant], dataset_root, split)
            rows.append({"variant": variant, "split": split, "psnr": res.mean_psnr, "ssim": res.mean_ssim})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["variant", "split", "psnr", "ssim"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({**r, "psnr": f"{r['psnr']:.6f}", "ssim": f"{r['ssim']:.6f}"})
    return rows


def run_sharing_study(dataset_root, with_sharing, without_sharing, split="test", size=256,
                      n_warmup=3, n_runs=10, out_dir=None):
    """Quality and latency of two checkpoints that differ only in feature sharing."""
    from .evaluation import benchmark_speed, evaluate

    report = {}
    for name, ckpt in (("sharing", with_sharing), ("no_sharing", without_sharing)):
        model, _ = load_checkpoint(ckpt)
        res = evaluate(ckpt, dataset_root, split)
        speed = benchmark_speed(ckpt, size=size, n_warmup=n_warmup, n_runs=n_runs)
        report[name] = {"psnr": res.mean_psnr, "ssim": res.mean_ssim, "n_parameters": count_parameters(model),
                        "feature_sharing": model.cfg.feature_sharing, **speed}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sharing_study.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
