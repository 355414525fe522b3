"""Images, the derivative filter bank and reference quality metrics.

Images are plain ``H x W x C`` float arrays with intensities in ``[0, 1]``;
grayscale images carry a single channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .kernels import correlate_same

__all__ = [
    "LUMA_WEIGHTS",
    "PSNR_CAP",
    "FilterBank",
    "default_bank",
    "as_image",
    "to_gray",
    "read_png",
    "write_png",
    "apply_filter_bank",
    "psnr",
    "psnr_per_channel",
    "ssim",
]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0


@dataclass(frozen=True)
class FilterBank:
    kernels: tuple = field(repr=False)
    names: tuple

    def __post_init__(self):
        if len(self.kernels) != len(self.names):
            raise ValueError("one name per kernel")
        for name, k in zip(self.names, self.kernels):
            k = np.asarray(k)
            if k.ndim != 2:
                raise ValueError(f"kernel {name} must be 2-D")
            if abs(k.sum()) > 1e-12:
                raise ValueError(f"kernel {name} does not sum to zero")

    def __len__(self):
        return len(self.kernels)

    @property
    def support(self) -> tuple[int, int]:
        return (max(k.shape[0] for k in self.kernels), max(k.shape[1] for k in self.kernels))


def default_bank() -> FilterBank:
    """First and second derivatives, horizontal and vertical."""
    dx1 = np.array([[-1.0, 1.0]])
    dx2 = np.array([[1.0, -2.0, 1.0]])
    return FilterBank(kernels=(dx1, dx1.T.copy(), dx2, dx2.T.copy()), names=("dx1", "dy1", "dx2", "dy2"))


def as_image(data, min_size: int = 1) -> np.ndarray:
    """Validate and return ``data`` as a float64 ``H x W x C`` array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be H x W or H x W x C, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise ValueError(f"image {img.shape[:2]} smaller than {min_size} x {min_size}")
    return img


def to_gray(img) -> np.ndarray:
    """BT.601 luma, returned as ``H x W``; single-channel input passes through."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    if img.shape[2] != 3:
        raise ValueError("luma conversion needs 1 or 3 channels")
    return img @ LUMA_WEIGHTS


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def write_png(path, img) -> None:
    img = as_image(img)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(u8).save(path)


def apply_filter_bank(img, bank: FilterBank | None = None, backend=None) -> np.ndarray:
    """Filter every channel with every kernel: returns ``H x W x C x K``.

    Kernels are applied as correlations with symmetric padding (see
    :func:`qsderain.kernels.correlate_same`), so the result keeps the image
    size and constant images map to exactly zero.
    """
    bank = bank or default_bank()
    img = as_image(img)
    kh, kw = bank.support
    if img.shape[0] < kh or img.shape[1] < kw:
        raise ValueError(f"image {img.shape[:2]} smaller than filter support {(kh, kw)}")
    return np.stack([correlate_same(img, k, backend=backend) for k in bank.kernels], axis=-1)


def _check_pair(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all elements; capped at 100 dB."""
    x, y = _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def psnr_per_channel(x, y, peak: float = 1.0) -> float:
    x, y = _check_pair(as_image(x), as_image(y))
    return float(np.mean([psnr(x[..., c], y[..., c], peak) for c in range(x.shape[2])]))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all full (valid) Gaussian windows, computed on luma."""
    x, y = _check_pair(x, y)
    x, y = to_gray(x), to_gray(y)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than the {window} x {window} SSIM window")
    w = _gaussian_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    half = window // 2
    crop = (slice(half, x.shape[0] - (window - 1 - half)), slice(half, x.shape[1] - (window - 1 - half)))

    def blur(a):
        return ndimage.correlate(a, w, mode="constant")[crop]

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
