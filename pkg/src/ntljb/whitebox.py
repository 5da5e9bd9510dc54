"""White-box fine-tuning attacks, optionally strengthened with disguised data.

Unlike the rest of the attack, these routines take the victim itself and
update its weights. They never accept a sealed oracle.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domains import AttackerDataView, DomainPair, make_batches
from .victim import TrainingDivergedError, VictimMetrics, evaluate_victim

log = logging.getLogger(__name__)

FINETUNE_MODES = ("ftal", "rtal", "transntl", "transntl_plus_jailntl")
PERTURBATION_KINDS = ("gaussian", "blur", "jitter")


@dataclass(frozen=True)
class Perturbation:
    name: str
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("perturbation magnitude must be non-negative")

    def apply(self, x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        m = self.magnitude
        if self.kind == "gaussian":
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            return x + m * noise
        if self.kind == "jitter":
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
            return x + m * noise
        c = x.shape[1]
        kernel = torch.full((c, 1, 3, 3), 1 / 9, dtype=x.dtype)
        blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel, groups=c)
        # magnitude blends between the input (0) and the full 3×3 mean blur (1)
        return (1 - m) * x + m * blurred


@dataclass(frozen=True)
class PerturbationSet:
    perturbations: tuple[Perturbation, ...] = (
        Perturbation("gaussian_0.05", "gaussian", 0.05),
        Perturbation("gaussian_0.1", "gaussian", 0.1),
        Perturbation("blur_3x3", "blur", 1.0),
        Perturbation("jitter_0.05", "jitter", 0.05),
    )

    def __post_init__(self):
        if not self.perturbations:
            raise ValueError("empty perturbation set")
        names = [p.name for p in self.perturbations]
        if len(set(names)) != len(names):
            raise ValueError("perturbation names must be unique")

    def __len__(self):
        return len(self.perturbations)


def generate_third_party(samples: torch.Tensor, perturbations: PerturbationSet | None = None,
                         seed: int = 0, warn: bool = True) -> dict[str, torch.Tensor]:
    """One perturbed copy of ``samples`` per perturbation, clamped back into [-1, 1]."""
    pset = perturbations or PerturbationSet()
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for p in pset.perturbations:
        y = p.apply(samples, gen)
        if y.numel() and (y.min() < -1 or y.max() > 1):
            if warn:
                warnings.warn(f"perturbation {p.name} left [-1, 1]; clamping", RuntimeWarning, stacklevel=2)
            y = y.clamp(-1, 1)
        out[p.name] = y
    return out


def kl_teacher_student(teacher_probs: torch.Tensor, student_logp: torch.Tensor,
                       teacher_logp: torch.Tensor | None = None) -> torch.Tensor:
    """Batch-mean ``KL(teacher || student)`` with ``0 log 0 = 0``.

    Pass ``teacher_logp`` when it is available: computing both log-probabilities
    the same way makes the result exactly 0 for identical predictions.
    """
    t = teacher_probs
    if teacher_logp is None:
        teacher_logp = torch.log(torch.where(t > 0, t, torch.ones_like(t)))
    terms = torch.where(t > 0, t * (teacher_logp - student_logp), torch.zeros_like(t))
    return terms.sum(-1).mean().clamp_min(0.0)


def self_distillation_loss(victim: nn.Module, clean_batch: torch.Tensor, perturbed_batches,
                           temperature: float = 1.0) -> torch.Tensor:
    """KL from detached predictions on clean inputs to predictions on each perturbed copy, averaged."""
    perturbed = list(perturbed_batches.values()) if isinstance(perturbed_batches, dict) else list(perturbed_batches)
    if not perturbed:
        raise ValueError("no perturbed batches")
    for p in perturbed:
        if p.shape != clean_batch.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(clean_batch.shape)}")
    n = len(clean_batch)
    logits = victim(torch.cat([clean_batch, *perturbed]))
    teacher_logp = torch.log_softmax(logits[:n] / temperature, dim=1).detach()
    teacher = teacher_logp.exp()
    terms = [kl_teacher_student(teacher, torch.log_softmax(logits[(i + 1) * n:(i + 2) * n] / temperature, 1),
                                teacher_logp)
             for i in range(len(perturbed))]
    return torch.stack(terms).mean()


@dataclass
class FinetuneConfig:
    mode: str = "transntl"
    lambda_sd: float = 1.0
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 16
    temperature: float = 1.0
    disguised_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"unknown fine-tuning mode {self.mode!r}")
        if not self.lambda_sd >= 0:
            raise ValueError("lambda_sd must be non-negative")
        if self.epochs < 1:
            raise ValueError("no training performed")


@dataclass
class FinetuneResult:
    model: nn.Module
    metrics: VictimMetrics | None
    accessed: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def finetune_attack(victim: nn.Module, view: AttackerDataView, disguised_data: torch.Tensor | None,
                    cfg: FinetuneConfig, pair: DomainPair | None = None,
                    perturbations: PerturbationSet | None = None) -> FinetuneResult:
    """Fine-tune a copy of the victim on the attacker's data.

    ``accessed`` lists every training-data source read, so callers can check
    that ftal and rtal touch nothing but the authorized subset.
    """
    if cfg.mode == "transntl_plus_jailntl" and disguised_data is None:
        raise ValueError("mode transntl_plus_jailntl requires disguised data")
    accessed: list[str] = []
    model = copy.deepcopy(victim)
    for p in model.parameters():
        p.requires_grad_(True)
    torch.manual_seed(cfg.seed)
    if cfg.mode == "rtal":
        model.net.head.reset_parameters()

    subset = view.authorized_subset
    accessed.append("authorized_subset")
    use_sd = cfg.mode in ("transntl", "transntl_plus_jailntl") and cfg.lambda_sd > 0
    disguised = None
    if cfg.mode == "transntl_plus_jailntl":
        accessed.append("disguised_data")
        disguised = disguised_data.detach()

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    pick = torch.Generator().manual_seed(cfg.seed + 1)
    losses = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        batches = make_batches(subset, cfg.batch_size, seed=cfg.seed * 10_007 + epoch, drop_last=False)
        for x, y in batches:
            loss = F.cross_entropy(model(x), y)
            if use_sd:
                third = generate_third_party(x, perturbations, seed=cfg.seed * 100_003 + step, warn=False)
                sd = self_distillation_loss(model, x, third, cfg.temperature)
                if disguised is not None:
                    xd = disguised[torch.randperm(len(disguised), generator=pick)[:cfg.batch_size]]
                    d_third = generate_third_party(xd, perturbations, cfg.seed * 100_019 + step, warn=False)
                    sd = sd + cfg.disguised_weight * self_distillation_loss(model, xd, d_third, cfg.temperature)
                loss = loss + cfg.lambda_sd * sd
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite fine-tuning loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
    model.eval()
    metrics = evaluate_victim(model, pair) if pair is not None else None
    return FinetuneResult(model, metrics, accessed, losses)
