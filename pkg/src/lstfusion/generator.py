"""Four-stage fusion generator.

Five encoders turn the fine indices, mid indices, mid LST and the two coarse
LST inputs (all already on the fine grid) into feature pyramids. The pyramids
are fused by cosine-similarity refinement, AdaIN and temporal attention, a
U-Net style decoder reconstructs normalised fine LST and a fixed Gaussian
blur suppresses high-frequency noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .raster import gaussian_smooth

COS_EPS = 1e-8
ADAIN_EPS = 1e-5

Pyramid = list  # list[torch.Tensor], level i of shape [B, C_i, H / 2**i, W / 2**i]


@dataclass
class GeneratorConfig:
    levels: int = 5
    channels: tuple[int, ...] = (32, 64, 128, 192, 256)
    res_blocks: int = 2
    base_size: int = 96
    slope: float = 0.2
    smooth_sigma: float = 1.0
    index_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels < 2:
            raise ValueError("need at least two pyramid levels")
        if len(self.channels) != self.levels:
            raise ValueError(f"{self.levels} levels but {len(self.channels)} channel widths")
        if self.base_size % (2 ** (self.levels - 1)):
            raise ValueError(f"base size {self.base_size} does not halve cleanly {self.levels - 1} times")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


class ResBlock(nn.Module):
    """conv-act-conv with identity skip, no normalisation."""

    def __init__(self, c: int, act: nn.Module):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1),
            act,
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.in_channels = in_channels
        ch = cfg.channels

        def act():
            return nn.LeakyReLU(cfg.slope)

        stages = []
        for i, c in enumerate(ch):
            if i == 0:
                head = [nn.Conv2d(in_channels, c, 3, padding=1), act()]
            else:
                head = [nn.Conv2d(ch[i - 1], c, 3, stride=2, padding=1), act()]
            stages.append(nn.Sequential(*head, *[ResBlock(c, act()) for _ in range(cfg.res_blocks)]))
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> Pyramid:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} channels, got {x.shape[1]}")
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


def _check_pyramids(*pyrs):
    n = len(pyrs[0])
    if any(len(p) != n for p in pyrs):
        raise ValueError(f"pyramid level counts differ: {[len(p) for p in pyrs]}")
    for i in range(n):
        shapes = {tuple(p[i].shape) for p in pyrs}
        if len(shapes) != 1:
            raise ValueError(f"level {i} shapes differ: {sorted(shapes)}")


def cosine_similarity_map(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine between the channel vectors of ``u`` and ``v`` -> [B, 1, H, W]."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")
    dot = (u * v).sum(dim=1, keepdim=True)
    nu = u.norm(dim=1, keepdim=True).clamp_min(COS_EPS)
    nv = v.norm(dim=1, keepdim=True).clamp_min(COS_EPS)
    return dot / (nu * nv)


def refine_features(f_mid: Pyramid, l_mid: Pyramid, l_fine: Pyramid) -> Pyramid:
    _check_pyramids(f_mid, l_mid, l_fine)
    return [f * cosine_similarity_map(lm, lf) for f, lm, lf in zip(f_mid, l_mid, l_fine)]


def _mean_std(x: torch.Tensor):
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = ((x - mu) ** 2).mean(dim=(-2, -1), keepdim=True)
    # sqrt(max(var, eps^2)) == max(std, eps), with a finite gradient everywhere
    return mu, var.clamp_min(ADAIN_EPS**2).sqrt()


def adain(content: Pyramid, style: Pyramid) -> Pyramid:
    _check_pyramids(content, style)
    out = []
    for c, s in zip(content, style):
        mc, sc = _mean_std(c)
        ms, ss = _mean_std(s)
        out.append(ss * (c - mc) / sc + ms)
    return out


class TemporalAttention(nn.Module):
    """Per-level sigmoid mask blending target-date coarse features into the spatial ones."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        self.project = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, max(c // 2, 1), 1), nn.BatchNorm2d(max(c // 2, 1))) for c in channels
        )
        self.gate = nn.ModuleList(
            nn.Sequential(nn.Conv2d(max(c // 2, 1), c, 1), nn.BatchNorm2d(c)) for c in channels
        )

    def masks(self, f1: Pyramid, f2: Pyramid) -> Pyramid:
        out = []
        for proj, gate, a, b in zip(self.project, self.gate, f1, f2):
            # one projection for both dates, normalised with shared batch statistics
            p = proj(torch.cat([a, b], dim=0))
            delta = p[: a.shape[0]] - p[a.shape[0] :]
            out.append(torch.sigmoid(gate(delta)))
        return out

    def forward(self, f1_coarse: Pyramid, f2_coarse: Pyramid, f_norm: Pyramid, force_theta=None) -> Pyramid:
        _check_pyramids(f1_coarse, f2_coarse, f_norm)
        if len(f_norm) != len(self.gate):
            raise ValueError(f"expected {len(self.gate)} levels, got {len(f_norm)}")
        if force_theta is None:
            thetas = self.masks(f1_coarse, f2_coarse)
        else:
            thetas = [torch.full_like(f, float(force_theta)) for f in f_norm]
        return [f2 * t + fn * (1 - t) for f2, fn, t in zip(f2_coarse, f_norm, thetas)]


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels
        n = cfg.levels

        def act():
            return nn.ReLU()

        self.bottom = nn.Sequential(
            nn.Conv2d(2 * ch[-1], ch[-1], 1),
            act(),
            *[ResBlock(ch[-1], act()) for _ in range(cfg.res_blocks)],
        )
        self.up = nn.ModuleList(
            nn.Sequential(nn.ConvTranspose2d(ch[i + 1], ch[i], 4, stride=2, padding=1), act())
            for i in range(n - 1)
        )
        self.merge = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(2 * ch[i], ch[i], 3, padding=1),
                act(),
                *[ResBlock(ch[i], act()) for _ in range(cfg.res_blocks)],
            )
            for i in range(n - 1)
        )
        self.head = nn.Conv2d(ch[0], 1, 3, padding=1)

    def forward(self, fused: Pyramid, coarse_t2: Pyramid) -> torch.Tensor:
        _check_pyramids(fused, coarse_t2)
        x = self.bottom(torch.cat([fused[-1], coarse_t2[-1]], dim=1))
        for i in reversed(range(len(fused) - 1)):
            x = self.up[i](x)
            x = self.merge[i](torch.cat([x, fused[i]], dim=1))
        return self.head(x)


@dataclass
class GeneratorOutput:
    """Intermediate products of one forward pass."""

    l_fine: Pyramid
    l_mid: Pyramid
    f_mid: Pyramid
    f1_coarse: Pyramid
    f2_coarse: Pyramid
    refined: Pyramid
    normalized: Pyramid
    fused: Pyramid
    decoded: torch.Tensor
    output: torch.Tensor
    extras: dict = field(default_factory=dict)


INPUT_KEYS = ("fine_idx_t1", "mid_idx_t1_up", "mid_lst_t1_up", "coarse_lst_t1_up", "coarse_lst_t2_up")


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        k = self.cfg.index_channels
        # encoders 1-5: fine indices, mid indices, mid LST (t1), coarse LST (t1), coarse LST (t2)
        self.encoders = nn.ModuleList(
            [Encoder(k, self.cfg), Encoder(k, self.cfg), Encoder(1, self.cfg), Encoder(1, self.cfg), Encoder(1, self.cfg)]
        )
        self.attention = TemporalAttention(self.cfg.channels)
        self.decoder = Decoder(self.cfg)

    def encode(self, x: torch.Tensor, encoder_id: int) -> Pyramid:
        if not 1 <= encoder_id <= 5:
            raise ValueError(f"encoder_id must be in 1..5, got {encoder_id}")
        return self.encoders[encoder_id - 1](x)

    def run(self, inputs, force_theta=None) -> GeneratorOutput:
        """Forward pass keeping every stage; ``inputs`` is a mapping keyed by :data:`INPUT_KEYS`
        or a sequence in that order, each ``[B, C, H, W]`` with H, W divisible by 2**(levels-1)."""
        if isinstance(inputs, dict):
            inputs = [inputs[k] for k in INPUT_KEYS]
        if len(inputs) != 5:
            raise ValueError("generator needs five input tensors")
        h, w = inputs[0].shape[-2:]
        step = 2 ** (self.cfg.levels - 1)
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} is not divisible by {step}")
        for x in inputs[1:]:
            if x.shape[-2:] != (h, w):
                raise ValueError("all generator inputs must share one spatial frame")
        l_fine, l_mid, f_mid, f1, f2 = (self.encode(x, i + 1) for i, x in enumerate(inputs))
        refined = refine_features(f_mid, l_mid, l_fine)
        normalized = adain(refined, f2)
        fused = self.attention(f1, f2, normalized, force_theta=force_theta)
        decoded = self.decoder(fused, f2)
        output = gaussian_smooth(decoded, self.cfg.smooth_sigma)
        return GeneratorOutput(l_fine, l_mid, f_mid, f1, f2, refined, normalized, fused, decoded, output)

    def forward(self, inputs, force_theta=None) -> torch.Tensor:
        return self.run(inputs, force_theta=force_theta).output
