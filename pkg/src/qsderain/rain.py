"""Synthetic paired rain data.

A rain layer is a set of oriented line segments (one dominant fall angle per
image with small per-streak jitter), Gaussian blurred and clamped.  Samples
obey the additive model exactly: ``rainy = background + rain`` elementwise,
because the stored rain layer is reduced wherever the clamp to ``[0, 1]``
was active.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import as_image, read_png, write_png
from .kernels import stamp_segments

log = logging.getLogger(__name__)

__all__ = [
    "TAU_LOC",
    "SPLITS",
    "RainParams",
    "RainySample",
    "draw_streaks",
    "synthesize_rain_layer",
    "make_sample",
    "procedural_background",
    "build_dataset",
    "load_split",
    "index_digest",
]

TAU_LOC = 0.04
SPLITS = ("train", "val", "test")
ANGLE_JITTER_DEG = 4.0


@dataclass
class RainParams:
    streak_count_per_kpx: float = 8.0
    angle_deg: tuple[float, float] = (-30.0, 30.0)
    length_px: tuple[int, int] = (8, 24)
    width_px: tuple[int, int] = (1, 3)
    intensity: tuple[float, float] = (0.02, 0.5)
    blur_sigma: float = 0.7
    seed: int = 0

    def __post_init__(self):
        self.angle_deg = tuple(float(v) for v in self.angle_deg)
        self.length_px = tuple(int(v) for v in self.length_px)
        self.width_px = tuple(int(v) for v in self.width_px)
        self.intensity = tuple(float(v) for v in self.intensity)
        for name in ("angle_deg", "length_px", "width_px", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        a_lo, a_hi = self.angle_deg
        if a_lo < -30.0 or a_hi > 30.0:
            raise ValueError("angle_deg must lie within [-30, 30]")
        i_lo, i_hi = self.intensity
        if i_lo <= 0.0 or i_hi > 1.0:
            raise ValueError("intensity range must lie in (0, 1]")
        if self.length_px[0] < 1 or self.width_px[0] < 1:
            raise ValueError("length and width must be >= 1 px")
        if self.streak_count_per_kpx < 0 or self.blur_sigma < 0:
            raise ValueError("streak density and blur must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class RainySample:
    rainy: np.ndarray
    background: np.ndarray
    rain: np.ndarray
    location: np.ndarray
    split: str = "train"
    id: str = ""


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def draw_streaks(shape, params: RainParams, rng=None) -> np.ndarray:
    """Streak geometry for one layer: ``n x 7`` rows of
    ``x0, y0, x1, y1, half_width, intensity, angle_deg``.

    Angles are measured from vertical; one dominant angle is drawn per layer
    and each streak deviates from it by at most a few degrees.  Intensities
    are skewed toward the faint end of the range (``lo * (hi/lo) ** u**2``),
    so a few bright streaks sit among many faint ones.
    """
    rng = _rng(params.seed if rng is None else rng)
    h, w = shape
    n = int(round(params.streak_count_per_kpx * h * w / 1000.0))
    base = rng.uniform(*params.angle_deg)
    lo, hi = params.angle_deg
    ang = np.clip(base + rng.uniform(-ANGLE_JITTER_DEG, ANGLE_JITTER_DEG, n), lo, hi)
    length = rng.integers(params.length_px[0], params.length_px[1] + 1, n)
    width = rng.integers(params.width_px[0], params.width_px[1] + 1, n)
    i_lo, i_hi = params.intensity
    val = i_lo * (i_hi / i_lo) ** (rng.random(n) ** 2)
    cx = rng.uniform(-0.5, w - 0.5, n)
    cy = rng.uniform(-0.5, h - 0.5, n)
    th = np.deg2rad(ang)
    hx, hy = 0.5 * (length - 1) * np.sin(th), 0.5 * (length - 1) * np.cos(th)
    return np.column_stack([cx - hx, cy - hy, cx + hx, cy + hy, 0.5 * width, val, ang])


def synthesize_rain_layer(shape, params: RainParams, rng=None, tau_loc: float = TAU_LOC):
    """Render a single-channel rain layer ``R`` and its location map ``L``.

    Deterministic given ``params.seed`` (or the supplied generator).
    """
    h, w = int(shape[0]), int(shape[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"zero-area shape {shape}")
    if h < 64 or w < 64:
        raise ValueError(f"rain layers need at least 64 x 64 pixels, got {h} x {w}")
    segs = draw_streaks((h, w), params, rng)
    canvas = stamp_segments(np.zeros((h, w)), segs[:, :6])
    if params.blur_sigma > 0:
        canvas = ndimage.gaussian_filter(canvas, params.blur_sigma, mode="constant")
    rain = np.clip(canvas, 0.0, 1.0)
    return rain, rain > tau_loc


def make_sample(background, params: RainParams, rng=None, tau_loc: float = TAU_LOC,
                split: str = "train", id: str = "") -> RainySample:
    """Add a synthetic rain layer to ``background``.

    The stored rain is ``clamp(B + R) - B`` so ``rainy - background == rain``
    holds exactly; the location map marks pixels where any channel of the
    stored rain exceeds ``tau_loc``.
    """
    bg = as_image(background)
    r, _ = synthesize_rain_layer(bg.shape[:2], params, rng, tau_loc)
    rainy = np.clip(bg + r[:, :, None], 0.0, 1.0)
    rain = rainy - bg
    loc = rain.max(axis=2) > tau_loc
    return RainySample(rainy, bg, rain, loc, split, id)


# --- procedural backgrounds -------------------------------------------------


def _pink_noise(shape, rng, exponent=1.0):
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spec = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) / f ** exponent
    spec[0, 0] = 0.0
    n = np.fft.irfft2(spec, s=(h, w))
    return n / (n.std() + 1e-12)


def _dead_leaves(shape, rng, n_disks):
    """Occluding disks and boxes; returns the image and a per-pixel texture amplitude."""
    h, w = shape
    img = np.full((h, w, 3), rng.uniform(0.2, 0.8, 3))
    amp = np.full((h, w), np.exp(rng.uniform(np.log(0.002), np.log(0.04))))
    yy, xx = np.mgrid[0:h, 0:w]
    rmin, rmax = 0.03 * min(h, w), 0.35 * min(h, w)
    for _ in range(n_disks):
        # power-law radii give the scale invariance of natural scenes
        r = 1.0 / rng.uniform(1.0 / rmax, 1.0 / rmin)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        col = np.clip(rng.uniform(0.05, 0.95) + rng.normal(0, 0.08, 3), 0, 1)
        if rng.random() < 0.5:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.3, 1.0))
        shade = 1.0 + rng.uniform(-0.15, 0.15) * (yy[m] - cy) / max(r, 1.0)
        img[m] = np.clip(col[None, :] * shade[:, None], 0, 1)
        amp[m] = np.exp(rng.uniform(np.log(0.002), np.log(0.04)))
    return img, amp


def procedural_background(shape, rng=None, kind=None) -> np.ndarray:
    """Texture with natural-image-like (heavy-tailed) gradient statistics.

    ``kind`` is ``"leaves"`` (occluding shaded disks and boxes), ``"checker"``
    (checkerboard with random cell levels under a smooth gradient) or
    ``"noise"`` (1/f noise under a log-normal amplitude envelope).  Every
    region carries its own texture amplitude; mixing amplitudes is what makes
    the filtered-value distribution sparse rather than Gaussian.  Chosen at
    random when ``None``.
    """
    rng = _rng(rng)
    h, w = shape
    kind = kind or rng.choice(["leaves", "leaves", "checker", "noise"])
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "leaves":
        img, amp = _dead_leaves((h, w), rng, int(rng.integers(40, 120)))
        img = ndimage.gaussian_filter(img, (0.6, 0.6, 0))
    elif kind == "checker":
        period = int(rng.integers(6, max(8, min(h, w) // 3)))
        cells = (h // period + 1, w // period + 1)
        ci, cj = yy // period, xx // period
        levels = rng.uniform(0.1, 0.9, cells)
        ramp = (xx / max(w - 1, 1)) * rng.uniform(-0.2, 0.2) + (yy / max(h - 1, 1)) * rng.uniform(-0.2, 0.2)
        base = ndimage.gaussian_filter(levels[ci, cj], 0.7) + ramp
        img = base[:, :, None] * rng.uniform(0.8, 1.2, 3)
        amp = np.exp(rng.uniform(np.log(0.002), np.log(0.04), cells))[ci, cj]
    elif kind == "noise":
        n = _pink_noise((h, w), rng, exponent=1.2)
        envelope = np.exp(1.2 * _pink_noise((h, w), rng, exponent=2.0))
        img = rng.uniform(0.35, 0.65, 3) + (0.03 * n * envelope)[:, :, None] * rng.uniform(0.8, 1.2, 3)
        amp = np.full((h, w), 0.003)
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    img = img + (amp * _pink_noise((h, w), rng))[:, :, None]
    return np.clip(img, 0.0, 1.0)


# --- datasets on disk --------------------------------------------------------


def _list_images(directory):
    if directory is None:
        return []
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"background directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


def _fit_to(img, size, rng):
    """Random crop (reflect-padding small images) to ``size x size``."""
    h, w = img.shape[:2]
    if h < size or w < size:
        img = np.pad(img, ((0, max(0, size - h)), (0, max(0, size - w)), (0, 0)), mode="reflect")
        h, w = img.shape[:2]
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    out = img[i:i + size, j:j + size]
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    return out


def build_dataset(out_dir, params: RainParams | None = None, n_train: int = 8, n_val: int = 2,
                  n_test: int = 2, seed: int = 0, size: int = 128, backgrounds_dir=None) -> dict:
    """Write paired PNGs under ``out_dir/{train,val,test}`` plus ``index.json``.

    Backgrounds come from ``backgrounds_dir`` when it holds images, otherwise
    they are generated procedurally (one fresh texture per sample).  Splits
    never share a background: with fewer files than samples the files are
    partitioned between splits and reused (with different crops and rain)
    within a split.
    """
    params = params or RainParams()
    counts = {"train": int(n_train), "val": int(n_val), "test": int(n_test)}
    if any(v < 0 for v in counts.values()):
        raise ValueError("split sizes must be non-negative")
    for split, n in counts.items():
        if n == 0:
            log.warning("split %r is empty", split)
    total = sum(counts.values())
    out = Path(out_dir)
    files = _list_images(backgrounds_dir)
    active = [s for s in SPLITS if counts[s] > 0]
    if files and len(files) < len(active):
        raise ValueError(f"{len(files)} background images cannot give {len(active)} disjoint splits")

    assign = {}
    if files:
        if len(files) >= total:
            order = list(range(total))
            pos = 0
            for s in SPLITS:
                assign[s] = order[pos:pos + counts[s]]
                pos += counts[s]
        else:
            # proportional partition, at least one file per non-empty split
            alloc = {s: 1 for s in active}
            spare = len(files) - len(active)
            for s in sorted(active, key=lambda s: -counts[s]):
                extra = min(spare, int(np.floor(spare * counts[s] / total + 0.5)))
                alloc[s] += extra
                spare -= extra
            pos = 0
            for s in SPLITS:
                k = alloc.get(s, 0)
                pool = list(range(pos, pos + k))
                assign[s] = [pool[i % k] for i in range(counts[s])] if k else []
                pos += k

    master = np.random.default_rng(seed)
    sample_seeds = master.integers(0, 2**63 - 1, total)
    entries = []
    k = 0
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        for n in range(counts[split]):
            rng = np.random.default_rng(int(sample_seeds[k]))
            if files:
                src = files[assign[split][n]]
                bg = _fit_to(read_png(src), size, rng)
                bg_name = src.name
            else:
                bg = procedural_background((size, size), rng)
                bg_name = f"procedural-{k:05d}"
            sid = f"{k:05d}"
            sample = make_sample(bg, params, rng, split=split, id=sid)
            base = out / split / sid
            write_png(f"{base}_bg.png", sample.background)
            write_png(f"{base}_rainy.png", sample.rainy)
            write_png(f"{base}_rain.png", sample.rain)
            write_png(f"{base}_loc.png", sample.location.astype(np.float64))
            entries.append({"id": sid, "split": split, "seed": int(sample_seeds[k]), "background": bg_name})
            k += 1
    index = {"seed": int(seed), "size": int(size), "params": params.to_dict(),
             "counts": counts, "tau_loc": TAU_LOC, "samples": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return index


def index_digest(root) -> str:
    return hashlib.sha256((Path(root) / "index.json").read_bytes()).hexdigest()


def load_split(root, split: str) -> list[RainySample]:
    """Read the samples of one split back as float arrays."""
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    samples = []
    for e in index["samples"]:
        if e["split"] != split:
            continue
        base = root / split / e["id"]
        paths = {k: Path(f"{base}_{k}.png") for k in ("rainy", "bg", "rain", "loc")}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing files for sample {e['id']}: {missing}")
        bg = read_png(paths["bg"])
        rainy = read_png(paths["rainy"])
        rain = rainy - bg
        samples.append(RainySample(rainy, bg, rain, read_png(paths["loc"])[:, :, 0] > 0.5, split, e["id"]))
    return samples
