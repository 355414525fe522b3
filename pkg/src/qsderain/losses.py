"""Training losses: quasi-sparsity, content, detail and multi-scale auxiliary.

Every term is a per-element mean so the weights do not depend on batch size
or resolution.  Tensors are ``N x C x H x W``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import FilterBank, default_bank

__all__ = [
    "VARIANTS",
    "LossWeights",
    "LossBreakdown",
    "filter_responses",
    "quasi_sparsity_loss",
    "content_loss",
    "detail_loss",
    "auxiliary_loss",
    "total_loss",
]

# which terms each ablation variant keeps: content, +quasi-sparsity, +detail, +auxiliary
VARIANTS = {
    "V1": ("content",),
    "V2": ("content", "quasi_sparsity"),
    "V3": ("content", "quasi_sparsity", "detail"),
    "V4": ("content", "quasi_sparsity", "detail", "auxiliary"),
}


@dataclass(frozen=True)
class LossWeights:
    quasi_sparsity: float = 1e-3
    content: float = 1.0
    auxiliary: float = 0.01
    detail: float = 1e-4

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")

    def for_variant(self, variant: str) -> "LossWeights":
        """Zero the weights of the terms ``variant`` leaves out."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        keep = VARIANTS[variant]
        return LossWeights(**{k: (v if k in keep else 0.0) for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)


class LossBreakdown(NamedTuple):
    quasi_sparsity: torch.Tensor
    content: torch.Tensor
    detail: torch.Tensor
    auxiliary: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def _sym_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    idx = np.where(idx < 0, -idx - 1, idx)
    return np.where(idx >= n, 2 * n - idx - 1, idx)


def filter_responses(x: torch.Tensor, bank: FilterBank | None = None) -> torch.Tensor:
    """Correlate every channel with every kernel; returns ``N x C x K x H x W``.

    Same anchor and symmetric padding as :func:`qsderain.imaging.apply_filter_bank`.
    """
    bank = bank or default_bank()
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    outs = []
    for k in bank.kernels:
        kh, kw = k.shape
        ay, ax = (kh - 1) // 2, (kw - 1) // 2
        rows = torch.as_tensor(_sym_index(h, ay, kh - 1 - ay))
        cols = torch.as_tensor(_sym_index(w, ax, kw - 1 - ax))
        padded = flat.index_select(2, rows).index_select(3, cols)
        weight = torch.as_tensor(np.asarray(k), dtype=x.dtype).view(1, 1, kh, kw)
        outs.append(F.conv2d(padded, weight))
    return torch.stack(outs, dim=1).view(n, c, len(bank), h, w)


def quasi_sparsity_loss(rainy, rain_pred, bank: FilterBank | None = None):
    """Mean of ``|w_k * R| + |w_k * (I - R)|`` over batch, channels, pixels and filters."""
    if rainy.shape != rain_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(rainy.shape)} vs {tuple(rain_pred.shape)}")
    fr = filter_responses(rain_pred, bank)
    fb = filter_responses(rainy - rain_pred, bank)
    return (fr.abs() + fb.abs()).mean()


def content_loss(rainy, rain_pred, background):
    return (rainy - rain_pred - background).abs().mean()


def detail_loss(rain_pred, location):
    """Mean of ``|(1 - L) * R|``: rain predicted outside the rain mask."""
    loc = location.to(rain_pred.dtype)
    if not torch.all((loc == 0) | (loc == 1)):
        raise ValueError("location map must be binary")
    return ((1.0 - loc) * rain_pred).abs().expand_as(rain_pred).mean()


def auxiliary_loss(rainy, aux_rains, background, n_aux: int = 5):
    """Average over decoders of the per-element MSE of ``I - A_i - B``."""
    if len(aux_rains) != n_aux:
        raise ValueError(f"expected {n_aux} auxiliary predictions, got {len(aux_rains)}")
    target = rainy - background
    return sum(((target - a) ** 2).mean() for a in aux_rains) / n_aux


def total_loss(rainy, background, location, output, weights: LossWeights | None = None,
               bank: FilterBank | None = None) -> LossBreakdown:
    """All four terms for one batch and their weighted sum.

    ``output`` is a :class:`qsderain.network.ForwardOutput` (or any object
    with ``rain`` and ``aux_rains``).
    """
    weights = weights or LossWeights()
    r = output.rain
    q = quasi_sparsity_loss(rainy, r, bank)
    c = content_loss(rainy, r, background)
    d = detail_loss(r, location)
    a = auxiliary_loss(rainy, output.aux_rains, background, n_aux=len(output.aux_rains))
    total = weights.quasi_sparsity * q + weights.content * c + weights.auxiliary * a + weights.detail * d
    return LossBreakdown(q, c, d, a, total)
