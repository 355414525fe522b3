"""Quasi-sparse deraining network.

A shuffling encoder (stride-1 ShuffleNet-style residual units), a multi-scale
extraction head (one pointwise path plus dilated 3x3 paths), one auxiliary
decoder per scale and a main decoder that fuses all scales with the auxiliary
rain predictions.  The network predicts the rain layer ``R``; the background
is ``clamp(I - R, 0, 1)``.  No layer changes spatial resolution.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "QSNetConfig",
    "ForwardOutput",
    "QSNet",
    "channel_shuffle",
    "scale_exchange",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class QSNetConfig:
    channels: int = 64
    groups: int = 4
    n_units: int = 12
    atrous_rates: tuple[int, ...] = (1, 2, 4, 6)
    feature_sharing: bool = True
    in_channels: int = 3

    def __post_init__(self):
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)
        if self.channels <= 0 or self.groups <= 0 or self.n_units < 0:
            raise ValueError("channels, groups must be positive and n_units non-negative")
        if self.channels % self.groups:
            raise ValueError(f"channels={self.channels} not divisible by groups={self.groups}")
        if (self.n_aux * self.channels) % self.groups:
            raise ValueError("n_aux * channels must be divisible by groups")
        if any(r < 1 for r in self.atrous_rates):
            raise ValueError("atrous rates must be >= 1")

    @property
    def n_aux(self) -> int:
        return 1 + len(self.atrous_rates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["atrous_rates"] = list(self.atrous_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QSNetConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class ForwardOutput(NamedTuple):
    rain: torch.Tensor
    aux_rains: list[torch.Tensor]
    features: list[torch.Tensor]


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Permute channels by reshaping ``C`` to ``(groups, C // groups)`` and transposing."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel count {c} not divisible by groups={groups}")
    if groups == 1:
        return x
    return x.view(n, groups, c // groups, h, w).transpose(1, 2).reshape(n, c, h, w)


def scale_exchange(features: list[torch.Tensor]) -> torch.Tensor:
    """Interleave equal-width feature stacks channel by channel.

    Equivalent to concatenating the stacks and shuffling with one group per
    stack, so every contiguous block of the result holds channels from every
    scale.
    """
    widths = {f.shape[1] for f in features}
    if len(widths) != 1:
        raise ValueError(f"feature stacks must share a width, got {sorted(widths)}")
    return channel_shuffle(torch.cat(features, dim=1), len(features))


def _check_spatial(tensors: list[torch.Tensor]) -> None:
    sizes = {tuple(t.shape[-2:]) for t in tensors}
    if len(sizes) != 1:
        raise ValueError(f"mismatched spatial sizes: {sorted(sizes)}")


class ShuffleUnit(nn.Module):
    """Stride-1 residual unit: gconv1x1 -> shuffle -> dw3x3 -> gconv1x1, plus skip."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.reduce = nn.Conv2d(channels, channels, 1, groups=groups)
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.expand = nn.Conv2d(channels, channels, 1, groups=groups)

    def forward(self, x):
        y = F.relu(self.reduce(x))
        y = channel_shuffle(y, self.groups)
        y = self.depthwise(y)
        y = self.expand(y)
        return x + y


class Encoder(nn.Module):
    def __init__(self, cfg: QSNetConfig):
        super().__init__()
        self.stem = nn.Conv2d(cfg.in_channels, cfg.channels, 3, padding=1)
        self.units = nn.Sequential(*[ShuffleUnit(cfg.channels, cfg.groups) for _ in range(cfg.n_units)])

    def forward(self, x):
        return self.units(self.stem(x))


class MultiScaleExtract(nn.Module):
    """Pointwise shortcut path plus one dilated 3x3 group conv per atrous rate."""

    def __init__(self, cfg: QSNetConfig):
        super().__init__()
        c = cfg.channels
        convs = [nn.Conv2d(c, c, 1)]
        convs += [nn.Conv2d(c, c, 3, padding=r, dilation=r, groups=cfg.groups) for r in cfg.atrous_rates]
        self.convs = nn.ModuleList(convs)

    def forward(self, trunk):
        return [F.relu(conv(trunk)) for conv in self.convs]


class AuxDecoder(nn.Module):
    """Two group convs (channel shuffle between them when sharing) then a 3x3 head."""

    def __init__(self, cfg: QSNetConfig):
        super().__init__()
        c, g = cfg.channels, cfg.groups
        self.groups = g
        self.feature_sharing = cfg.feature_sharing
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, groups=g)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, groups=g)
        self.head = nn.Conv2d(c, cfg.in_channels, 3, padding=1)

    def forward(self, f):
        y = F.relu(self.conv1(f))
        if self.feature_sharing:
            y = channel_shuffle(y, self.groups)
        y = F.relu(self.conv2(y))
        return self.head(y)


class MainDecoder(nn.Module):
    """Fuse the (optionally scale-exchanged) features with the auxiliary rains.

    The first layer is one convolution over ``[features || aux_rains]`` whose
    weight is block structured: a grouped 1x1 over the feature stacks and a
    dense 3x3 over the auxiliary predictions.  Grouping is what makes the
    cross-scale exchange matter; without it each group sees one or two scales.
    """

    def __init__(self, cfg: QSNetConfig):
        super().__init__()
        c, n = cfg.channels, cfg.n_aux
        self.feature_sharing = cfg.feature_sharing
        self.fuse_features = nn.Conv2d(n * c, c, 1, groups=cfg.groups)
        self.fuse_aux = nn.Conv2d(n * cfg.in_channels, c, 3, padding=1, bias=False)
        self.head = nn.Conv2d(c, cfg.in_channels, 3, padding=1)

    def forward(self, features, aux_rains):
        _check_spatial(list(features) + list(aux_rains))
        if self.feature_sharing:
            stacked = scale_exchange(features)
        else:
            stacked = torch.cat(features, dim=1)
        y = self.fuse_features(stacked) + self.fuse_aux(torch.cat(aux_rains, dim=1))
        return self.head(F.relu(y))


class QSNet(nn.Module):
    def __init__(self, cfg: QSNetConfig | None = None, zero_head: bool = True):
        super().__init__()
        self.cfg = cfg or QSNetConfig()
        self.encoder = Encoder(self.cfg)
        self.extract = MultiScaleExtract(self.cfg)
        self.aux = nn.ModuleList([AuxDecoder(self.cfg) for _ in range(self.cfg.n_aux)])
        self.main = MainDecoder(self.cfg)
        self.reset_parameters(zero_head=zero_head)

    def reset_parameters(self, zero_head: bool = True) -> None:
        """Fan-in uniform init everywhere; prediction heads zeroed when ``zero_head``."""
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.weight, -bound, bound)
                if m.bias is not None:
                    nn.init.uniform_(m.bias, -bound, bound)
        if zero_head:
            for head in self.heads():
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def heads(self) -> list[nn.Conv2d]:
        return [d.head for d in self.aux] + [self.main.head]

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected N x {self.cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        trunk = self.encoder(x)
        features = self.extract(trunk)
        aux_rains = [dec(f) for dec, f in zip(self.aux, features)]
        rain = self.main(features, aux_rains)
        return ForwardOutput(rain, aux_rains, features)

    @torch.no_grad()
    def derain(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self(x).rain).clamp(0.0, 1.0)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: QSNet, step: int = 0, **extra) -> None:
    """Write ``path`` (torch state) and ``path.json`` (config sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"state_dict": model.state_dict(), "config": model.cfg.to_dict(), "step": step}
    payload.update(extra)
    torch.save(payload, path)
    sidecar = {"config": model.cfg.to_dict(), "step": step}
    sidecar.update({k: v for k, v in extra.items() if isinstance(v, (int, float, str, bool, dict, list))})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[QSNet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = QSNet(QSNetConfig.from_dict(payload["config"]), zero_head=False)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
