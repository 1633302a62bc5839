"""Conditional PatchGAN critic on mid-resolution LST."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass
class DiscriminatorConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    slope: float = 0.2
    in_channels: int = 2  # LST patch + coarse condition

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 1:
            raise ValueError("discriminator needs at least one level")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)


class Discriminator(nn.Module):
    """All levels but the last halve the resolution (k4 s2 p1); the last level and
    the output layer use stride 1, so a 32x32 input gives a 2x2 score map with the
    default four levels. Scores are raw reals for the least-squares objective."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        ch = self.cfg.channels
        layers = []
        prev = self.cfg.in_channels
        for i, c in enumerate(ch):
            stride = 2 if i < len(ch) - 1 else 1
            layers.append(nn.Conv2d(prev, c, 4, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.LeakyReLU(self.cfg.slope))
            prev = c
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, lst_mid: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if lst_mid.shape != condition.shape:
            raise ValueError(
                f"LST patch {tuple(lst_mid.shape)} and condition {tuple(condition.shape)} differ"
            )
        return self.net(torch.cat([lst_mid, condition], dim=1))

    def probability(self, lst_mid: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        """Sigmoid view of the scores, for reporting only."""
        return torch.sigmoid(self.forward(lst_mid, condition))


def score_map_size(size: int, levels: int = 4) -> int:
    """Output side for a square input through :class:`Discriminator`."""
    for i in range(levels):
        size = (size + 2 - 4) // (2 if i < levels - 1 else 1) + 1
    return size + 2 - 4 + 1
