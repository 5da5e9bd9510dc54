"""Model-guided statistics and zero-order gradients through the sealed oracle.

Everything that depends on the victim is evaluated through forward queries
only. Gradients of the model-guided loss with respect to disguised images come
from antithetic finite differences, and are then pushed into ``f_d`` by
ordinary back-propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


# --------------------------------------------------------------------------- statistics

def _as_logits(logits) -> torch.Tensor:
    t = torch.as_tensor(logits).double()
    if t.numel() == 0 or t.shape[-1] == 0:
        raise ValueError("empty logits")
    if not torch.isfinite(t).all():
        raise ValueError("non-finite logits")
    return t


def softmax(logits) -> torch.Tensor:
    """Max-shifted softmax along the last axis."""
    t = _as_logits(logits)
    return torch.softmax(t - t.max(dim=-1, keepdim=True).values, dim=-1)


def prediction_entropy(logits) -> torch.Tensor:
    """Entropy of the softmax prediction along the last axis, with ``0 log 0 = 0``.

    Differentiable; a 1-d input yields a 0-d tensor.
    """
    t = _as_logits(logits)
    logp = torch.log_softmax(t, dim=-1)
    p = logp.exp()
    ent = -torch.where(p > 0, p * logp, torch.zeros_like(p)).sum(-1)
    return ent.clamp_min(0.0)


def max_logit_confidence(logits) -> torch.Tensor:
    return _as_logits(logits).max(dim=-1).values


def confidence_loss(logits_a, logits_d) -> torch.Tensor:
    """Mean absolute gap between per-sample prediction entropies, paired by batch position."""
    a, d = _as_logits(logits_a), _as_logits(logits_d)
    if a.shape != d.shape:
        raise ValueError(f"batch-size mismatch: {tuple(a.shape)} vs {tuple(d.shape)}")
    return (prediction_entropy(a) - prediction_entropy(d)).abs().mean()


@dataclass(frozen=True)
class ClassDistribution:
    probabilities: np.ndarray
    sample_count: int

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
            raise ValueError("class probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def class_count(self) -> int:
        return len(self.probabilities)


def class_distribution(predicted_labels, class_count: int) -> ClassDistribution:
    labels = np.asarray(predicted_labels).astype(np.int64).reshape(-1)
    if len(labels) == 0:
        raise ValueError("no predictions")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(f"predicted label out of range [0, {class_count})")
    counts = np.bincount(labels, minlength=class_count)
    return ClassDistribution(counts / len(labels), len(labels))


def _entropy_of(p: torch.Tensor) -> torch.Tensor:
    safe = torch.where(p > 0, p, torch.ones_like(p))
    return (-(p * torch.log(safe)).sum(-1)).clamp_min(0.0)


def balance_entropy(dist: ClassDistribution | torch.Tensor) -> float | torch.Tensor:
    """Entropy of a class distribution. Tensors (soft counts) stay differentiable."""
    if isinstance(dist, ClassDistribution):
        return float(_entropy_of(torch.from_numpy(dist.probabilities)))
    return _entropy_of(dist)


def class_balance_loss(p_disguised, p_authorized):
    if isinstance(p_disguised, ClassDistribution) and isinstance(p_authorized, ClassDistribution):
        if p_disguised.class_count != p_authorized.class_count:
            raise ValueError("class-count mismatch")
        return abs(balance_entropy(p_disguised) - balance_entropy(p_authorized))
    pd, pa = torch.as_tensor(_probs_of(p_disguised)), torch.as_tensor(_probs_of(p_authorized))
    if pd.shape != pa.shape:
        raise ValueError("class-count mismatch")
    return (balance_entropy(pd) - balance_entropy(pa)).abs()


def _probs_of(d):
    return torch.from_numpy(d.probabilities) if isinstance(d, ClassDistribution) else d


def soft_class_distribution(logits) -> torch.Tensor:
    """Mean softmax over the batch: the differentiable stand-in for hard counts."""
    return softmax(logits).mean(0)


@dataclass(frozen=True)
class MgdWeights:
    lambda_cf: float = 0.01
    lambda_ba: float = 0.01

    def __post_init__(self):
        if not (self.lambda_cf >= 0 and self.lambda_ba >= 0):
            raise ValueError("model-guided weights must be non-negative")

    @property
    def active(self) -> bool:
        return self.lambda_cf > 0 or self.lambda_ba > 0


def total_loss(did_total: float, l_cf: float, l_ba: float, lambda_cf: float, lambda_ba: float) -> float:
    terms = (did_total, l_cf, l_ba, lambda_cf, lambda_ba)
    if not all(math.isfinite(float(t)) for t in terms):
        raise ValueError("non-finite loss term")
    return float(did_total) + lambda_cf * float(l_cf) + lambda_ba * float(l_ba)


# --------------------------------------------------------------------------- zero-order estimation

SCHEMES = ("random-spherical", "coordinate-subset")


@dataclass(frozen=True)
class ZoEstimatorConfig:
    probe_count: int = 16
    step: float = 0.05
    scheme: str = "random-spherical"
    seed: int = 0

    def __post_init__(self):
        if self.probe_count < 1:
            raise ValueError("probe_count must be at least 1")
        if not self.step > 0:
            raise ValueError("finite-difference step must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown direction scheme {self.scheme!r}")

    @property
    def evaluations(self) -> int:
        return 2 * self.probe_count


def zo_gradient(loss_fn: Callable[[torch.Tensor], float], x: torch.Tensor, cfg: ZoEstimatorConfig,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Antithetic finite-difference gradient estimate of a black-box scalar loss.

    Exactly ``2 * probe_count`` calls of ``loss_fn`` are made.
    """
    if not cfg.step > 0:
        raise ValueError("finite-difference step must be positive")
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    x = x.detach()
    flat = x.reshape(-1)
    dim = flat.numel()
    h, k = cfg.step, cfg.probe_count
    grad = torch.zeros(dim, dtype=torch.float64)

    if cfg.scheme == "random-spherical":
        directions = torch.randn(k, dim, generator=generator, dtype=torch.float64)
        directions /= directions.norm(dim=1, keepdim=True).clamp_min(1e-12)
        scale = dim / k
    else:
        # K >= D cycles through every coordinate; otherwise a random K-subset, rescaled by D/K
        chosen = torch.arange(k) % dim if k >= dim else torch.randperm(dim, generator=generator)[:k]
        directions = torch.zeros(k, dim, dtype=torch.float64)
        directions[torch.arange(k), chosen] = 1.0
        scale = dim / k

    for u in directions:
        step_vec = (h * u).to(x.dtype).reshape(x.shape)
        plus = float(loss_fn(x + step_vec))
        minus = float(loss_fn(x - step_vec))
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise ValueError("non-finite loss evaluation during zero-order estimation")
        grad += ((plus - minus) / (2 * h)) * u
    return (scale * grad).to(x.dtype).reshape(x.shape)


# --------------------------------------------------------------------------- oracle-guided gradients

@dataclass
class MgdResult:
    image_grad: torch.Tensor | None
    l_cf: float
    l_ba: float
    queries: int


def _stats_from_output(out: torch.Tensor, class_count: int, labels_only: bool, soft_counts: bool):
    if labels_only:
        return None, class_distribution(out.numpy(), class_count)
    if soft_counts:
        return out, soft_class_distribution(out)
    return out, class_distribution(out.argmax(1).numpy(), class_count)


def _mgd_value(ref, cand, weights: MgdWeights, labels_only: bool):
    logits_a, dist_a = ref
    logits_d, dist_d = cand
    l_cf = 0.0 if labels_only else float(confidence_loss(logits_a.double(), logits_d.double()))
    l_ba = float(class_balance_loss(dist_d, dist_a))
    lam_cf = 0.0 if labels_only else weights.lambda_cf
    return lam_cf * l_cf + weights.lambda_ba * l_ba, l_cf, l_ba


def mgd_image_gradient(oracle, batch_a: torch.Tensor, disguised_u: torch.Tensor, weights: MgdWeights,
                       zo_cfg: ZoEstimatorConfig, generator: torch.Generator | None = None,
                       soft_counts: bool = False) -> MgdResult:
    """Zero-order gradient of ``lambda_cf L_cf + lambda_ba L_ba`` w.r.t. the disguised batch.

    Queries ``batch_a`` once, the disguised batch once, and every probe once.
    Nothing is queried when both weights are zero.
    """
    if not weights.active:
        return MgdResult(None, 0.0, 0.0, 0)
    if len(batch_a) != len(disguised_u):
        raise ValueError("authorized and disguised batches must have the same size")
    labels_only = bool(getattr(oracle, "labels_only", False))
    c = oracle.class_count
    start = oracle.query_count
    ref = _stats_from_output(oracle.query(batch_a), c, labels_only, soft_counts)
    x_d = disguised_u.detach()
    _, l_cf, l_ba = _mgd_value(ref, _stats_from_output(oracle.query(x_d), c, labels_only, soft_counts),
                               weights, labels_only)

    def loss_fn(probe: torch.Tensor) -> float:
        out = oracle.query(probe.clamp(-1.0, 1.0))
        return _mgd_value(ref, _stats_from_output(out, c, labels_only, soft_counts), weights, labels_only)[0]

    grad = zo_gradient(loss_fn, x_d, zo_cfg, generator)
    return MgdResult(grad, l_cf, l_ba, oracle.query_count - start)


@dataclass
class MgdContribution:
    parameter_grads: tuple
    result: MgdResult


def attach_mgd_gradients(ensemble, oracle, batch_a: torch.Tensor, batch_u: torch.Tensor, weights: MgdWeights,
                         zo_cfg: ZoEstimatorConfig, generator: torch.Generator | None = None,
                         soft_counts: bool = False) -> MgdContribution:
    """Model-guided gradient for every ``f_d`` parameter via the chain rule through disguised images."""
    params = list(ensemble.f_d.parameters())
    disguised = ensemble.f_d(batch_u)
    res = mgd_image_gradient(oracle, batch_a, disguised, weights, zo_cfg, generator, soft_counts)
    if res.image_grad is None:
        return MgdContribution(tuple(torch.zeros_like(p) for p in params), res)
    grads = torch.autograd.grad(disguised, params, grad_outputs=res.image_grad, allow_unused=True)
    grads = tuple(torch.zeros_like(p) if g is None else g for p, g in zip(params, grads))
    return MgdContribution(grads, res)


def expected_step_queries(batch_size: int, weights: MgdWeights, zo_cfg: ZoEstimatorConfig,
                          mode: str = "jailntl") -> int:
    """Oracle images queried by one training step: the authorized batch, the disguised batch, and 2K probes."""
    if mode == "jailntl_star" or not weights.active:
        return 0
    return (2 + zo_cfg.evaluations) * batch_size
