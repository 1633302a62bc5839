"""Weakly supervised adversarial training.

The generator's fine output is only ever compared with mid-resolution LST
after 3x3 average pooling. The critic follows the least-squares objective.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DEFAULT_HI_K, DEFAULT_LO_K, PatchSet
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import INPUT_KEYS, Generator, GeneratorConfig
from .metrics import ms_ssim_torch

log = logging.getLogger(__name__)

POOL = 3
SPECTRUM_EPS = 1e-8
VISION_DATA_RANGE = 2.0  # normalised LST spans [-1, 1]
TERMS = ("l_gan", "l_content", "l_spectrum", "l_vision")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(*parts)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    betas: tuple[float, float] = (0.5, 0.999)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    out_dir: str | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        self.betas = tuple(self.betas)


class NonFiniteLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------- losses


def weak_supervision_pool(fine: torch.Tensor, factor: int = POOL) -> torch.Tensor:
    """Non-overlapping ``factor x factor`` means of ``[..., H, W]``."""
    h, w = fine.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"map {h}x{w} is not divisible by {factor}")
    lead = fine.shape[:-2]
    x = fine.reshape(-1, 1, h, w)
    return F.avg_pool2d(x, factor).reshape(*lead, h // factor, w // factor)


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * (fake_scores**2).mean() + 0.5 * ((real_scores - 1) ** 2).mean()


def spectrum_loss(gen: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    g = gen.flatten(1)
    r = ref.flatten(1)
    ng, nr = g.norm(dim=1), r.norm(dim=1)
    if bool((ng < SPECTRUM_EPS).any() or (nr < SPECTRUM_EPS).any()):
        log.warning("zero-norm patch in spectrum loss; norm guarded at %g", SPECTRUM_EPS)
    cos = (g * r).sum(dim=1) / (ng.clamp_min(SPECTRUM_EPS) * nr.clamp_min(SPECTRUM_EPS))
    return (1 - cos).mean()


def generator_loss(
    fake_scores: torch.Tensor, gen_pooled: torch.Tensor, ref_mid: torch.Tensor, w: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of adversarial, L1, cosine and MS-SSIM terms.

    Terms with zero weight are reported but kept out of the graph.
    """
    if gen_pooled.shape != ref_mid.shape:
        raise ValueError(f"pooled output {tuple(gen_pooled.shape)} vs reference {tuple(ref_mid.shape)}")
    fns = {
        "l_gan": (w.alpha, lambda: ((fake_scores - 1) ** 2).mean()),
        "l_content": (w.beta, lambda: (gen_pooled - ref_mid).abs().mean()),
        "l_spectrum": (w.gamma, lambda: spectrum_loss(gen_pooled, ref_mid)),
        "l_vision": (w.delta, lambda: 1 - ms_ssim_torch(gen_pooled, ref_mid, VISION_DATA_RANGE).mean()),
    }
    terms = {}
    total = gen_pooled.new_zeros(())
    for name, (weight, fn) in fns.items():
        if weight > 0:
            terms[name] = fn()
            total = total + weight * terms[name]
        else:
            with torch.no_grad():
                terms[name] = fn()
    return total, terms


# --------------------------------------------------------------------------- batches


def batch_tensors(ps: PatchSet, idx, dtype=torch.float32) -> dict[str, torch.Tensor]:
    idx = np.sort(np.asarray(idx))
    return {k: torch.from_numpy(np.asarray(ps.arrays[k][idx], dtype=np.float32)).to(dtype) for k in ps.arrays}


def generator_pass(G: Generator, D: Discriminator, batch: dict, w: LossWeights):
    """Generator loss for one batch -> (total, terms, pooled fake, condition)."""
    fake = G({k: batch[k] for k in INPUT_KEYS})
    fake_mid = weak_supervision_pool(fake)
    cond = weak_supervision_pool(batch["coarse_lst_t2_up"])
    scores = D(fake_mid, cond)
    total, terms = generator_loss(scores, fake_mid, batch["mid_lst_t2"], w)
    return total, terms, fake_mid, cond


class BatchSampler:
    """Seeded epoch-wise shuffling; batches never straddle epochs."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self._queue:
            perm = self.rng.permutation(self.n)
            nb = self.n // self.batch_size
            self._queue = [perm[i * self.batch_size : (i + 1) * self.batch_size] for i in range(nb)]
        return self._queue.pop(0)


# --------------------------------------------------------------------------- trace and checkpoints


@dataclass
class LossTrace:
    step: list[int] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    terms: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in TERMS})

    COLUMNS = ("step", "loss_G", "loss_D", *TERMS)

    def append(self, step: int, loss_g: float, loss_d: float, terms: dict[str, float]) -> None:
        if self.step and step <= self.step[-1]:
            raise ValueError("trace steps must increase")
        vals = [loss_g, loss_d, *terms.values()]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite value at step {step}")
        self.step.append(step)
        self.loss_g.append(loss_g)
        self.loss_d.append(loss_d)
        for k in TERMS:
            self.terms[k].append(terms[k])

    def __len__(self) -> int:
        return len(self.step)

    def rows(self):
        for i, s in enumerate(self.step):
            yield [s, self.loss_g[i], self.loss_d[i], *(self.terms[k][i] for k in TERMS)]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for row in self.rows():
                wr.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossTrace":
        tr = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                tr.append(
                    int(row["step"]),
                    float(row["loss_G"]),
                    float(row["loss_D"]),
                    {k: float(row[k]) for k in TERMS},
                )
        return tr


def save_checkpoint(
    path: str | Path,
    G: Generator,
    D: Discriminator | None = None,
    lo_k: float = DEFAULT_LO_K,
    hi_k: float = DEFAULT_HI_K,
    extra: dict | None = None,
) -> Path:
    """One ``.npz`` archive: named parameter/buffer arrays plus a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"generator.{k}": v.detach().cpu().numpy() for k, v in G.state_dict().items()}
    header = {
        "generator_config": G.cfg.to_dict(),
        "normalization": {"lo_k": lo_k, "hi_k": hi_k},
        "dtype": str(next(G.parameters()).dtype).replace("torch.", ""),
    }
    if D is not None:
        arrays.update({f"discriminator.{k}": v.detach().cpu().numpy() for k, v in D.state_dict().items()})
        header["discriminator_config"] = D.cfg.to_dict()
    header.update(extra or {})
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    generator: Generator
    discriminator: Discriminator | None
    header: dict

    @property
    def lo_k(self) -> float:
        return self.header["normalization"]["lo_k"]

    @property
    def hi_k(self) -> float:
        return self.header["normalization"]["hi_k"]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        state = {k: z[k] for k in z.files if k != "__header__"}
    dtype = getattr(torch, header.get("dtype", "float32"))
    G = Generator(GeneratorConfig.from_dict(header["generator_config"])).to(dtype)
    G.load_state_dict({k[len("generator.") :]: torch.from_numpy(v) for k, v in state.items() if k.startswith("generator.")})
    D = None
    if "discriminator_config" in header:
        D = Discriminator(DiscriminatorConfig.from_dict(header["discriminator_config"])).to(dtype)
        D.load_state_dict(
            {k[len("discriminator.") :]: torch.from_numpy(v) for k, v in state.items() if k.startswith("discriminator.")}
        )
    G.eval()
    if D is not None:
        D.eval()
    return Checkpoint(G, D, header)


# --------------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    trace: LossTrace
    checkpoints: list[Path] = field(default_factory=list)


def _snapshot(batch: dict, out_dir: str | None, step: int) -> str:
    if out_dir is None:
        return "(no output directory for a snapshot)"
    p = Path(out_dir) / f"nonfinite_step{step}.npz"
    p.parent.mkdir(parents=True, exist_ok=True)
    np.savez(p, **{k: v.detach().cpu().numpy() for k, v in batch.items()})
    return str(p)


def train(
    patches: PatchSet,
    gcfg: GeneratorConfig | None = None,
    dcfg: DiscriminatorConfig | None = None,
    tcfg: TrainConfig | None = None,
    w: LossWeights | None = None,
) -> TrainResult:
    """Alternate one critic update and one generator update per batch."""
    gcfg = gcfg or GeneratorConfig()
    dcfg = dcfg or DiscriminatorConfig()
    tcfg = tcfg or TrainConfig()
    w = w or LossWeights()
    if len(patches) == 0:
        raise ValueError("empty patch set")
    if not patches.has_target:
        raise ValueError("training patches need the target mid LST")

    torch.manual_seed(tcfg.seed)
    G = Generator(gcfg)
    D = Discriminator(dcfg)
    opt_g = torch.optim.Adam(G.parameters(), lr=tcfg.learning_rate, betas=tcfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=tcfg.learning_rate, betas=tcfg.betas)
    sampler = BatchSampler(len(patches), tcfg.batch_size, tcfg.seed)
    trace = LossTrace()
    checkpoints: list[Path] = []
    out_dir = Path(tcfg.out_dir) if tcfg.out_dir else None
    G.train()
    D.train()

    for step in range(tcfg.steps):
        batch = batch_tensors(patches, sampler.next())
        real = batch["mid_lst_t2"]

        fake = G({k: batch[k] for k in INPUT_KEYS})
        fake_mid = weak_supervision_pool(fake)
        cond = weak_supervision_pool(batch["coarse_lst_t2_up"])

        loss_d = discriminator_loss(D(real, cond), D(fake_mid.detach(), cond))
        if not torch.isfinite(loss_d):
            where = _snapshot(batch, tcfg.out_dir, step)
            raise NonFiniteLossError(f"discriminator loss is {loss_d.item()} at step {step}; batch saved to {where}")
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        loss_g, terms = generator_loss(D(fake_mid, cond), fake_mid, real, w)
        if not torch.isfinite(loss_g):
            where = _snapshot(batch, tcfg.out_dir, step)
            raise NonFiniteLossError(f"generator loss is {loss_g.item()} at step {step}; batch saved to {where}")
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        trace.append(step, loss_g.item(), loss_d.item(), {k: v.item() for k, v in terms.items()})
        if tcfg.log_every and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log.info(
                "step %d  G %.4f  D %.4f  content %.4f",
                step,
                trace.loss_g[-1],
                trace.loss_d[-1],
                trace.terms["l_content"][-1],
            )
        if out_dir and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            checkpoints.append(
                save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.npz", G, D, patches.lo_k, patches.hi_k)
            )

    G.eval()
    D.eval()
    if out_dir:
        checkpoints.append(save_checkpoint(out_dir / "checkpoint_final.npz", G, D, patches.lo_k, patches.hi_k,
                                          {"train_config": asdict(tcfg), "loss_weights": asdict(w)}))
        trace.to_csv(out_dir / "loss_trace.csv")
    return TrainResult(G, D, trace, checkpoints)


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < window:
        window = max(x.size, 1)
    return np.convolve(x, np.ones(window) / window, mode="valid")
