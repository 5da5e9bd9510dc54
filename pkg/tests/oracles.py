"""Independent reference checks shared by the unit and acceptance suites."""

import math

import torch
import torch.nn as nn

from ntljb.disguise import adv_loss_forward, cycle_loss_forward
from ntljb.guided import (
    ZoEstimatorConfig, class_balance_loss, confidence_loss, prediction_entropy, soft_class_distribution,
    zo_gradient,
)


def toy_setup(seed: int = 0):
    """A 4-image batch, a one-layer tanh generator, and fixed differentiable stand-ins."""
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x_a = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    gen = nn.Conv2d(3, 3, 3, padding=1).double()
    inv = nn.Conv2d(3, 3, 3, padding=1).double()
    disc = nn.Conv2d(3, 1, 4, stride=2, padding=1).double()
    clf = nn.Linear(3 * 8 * 8, 10).double()
    for m in (gen, inv, disc, clf):
        for p in m.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.3)
    for m in (inv, disc, clf):
        m.requires_grad_(False)
    return x, x_a, gen, inv, disc, clf


def toy_losses(x, x_a, gen, inv, disc, clf):
    G = lambda z: torch.tanh(gen(z))  # noqa: E731
    D = lambda z: torch.sigmoid(disc(z))  # noqa: E731
    d = G(x)
    logits_a, logits_d = clf(x_a.flatten(1)), clf(d.flatten(1))
    return {
        "L_adv": adv_loss_forward(D(x_a), D(d)),
        "L_cs": cycle_loss_forward(x, torch.tanh(inv(d))),
        "L_cf": confidence_loss(logits_a, logits_d),
        "L_ba": class_balance_loss(soft_class_distribution(logits_d), soft_class_distribution(logits_a)),
    }


def finite_difference_errors(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Relative error ||analytic - numeric|| / ||numeric|| for each loss w.r.t. the generator."""
    x, x_a, gen, inv, disc, clf = toy_setup(seed)
    params = list(gen.parameters())
    errors = {}
    for name in ("L_adv", "L_cs", "L_cf", "L_ba"):
        loss = toy_losses(x, x_a, gen, inv, disc, clf)[name]
        analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)])
        numeric = []
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + eps
                    up = toy_losses(x, x_a, gen, inv, disc, clf)[name].item()
                    flat[i] = old - eps
                    down = toy_losses(x, x_a, gen, inv, disc, clf)[name].item()
                    flat[i] = old
                    numeric.append((up - down) / (2 * eps))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        errors[name] = ((analytic - numeric).norm() / numeric.norm().clamp_min(1e-300)).item()
    return errors


def entropy_toy(seed: int = 0, dim: int = 16, classes: int = 5):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(classes, dim, generator=g, dtype=torch.float64)
    x = torch.randn(dim, generator=g, dtype=torch.float64) * 0.5

    def loss(z):
        return float(prediction_entropy(W @ z.reshape(-1)))

    xz = x.clone().requires_grad_(True)
    analytic = torch.autograd.grad(prediction_entropy(W @ xz), xz)[0]
    return loss, x, analytic


def zo_cosine(k: int = 64, h: float = 0.01, seed: int = 0) -> float:
    loss, x, analytic = entropy_toy(seed)
    est = zo_gradient(loss, x, ZoEstimatorConfig(k, h, "random-spherical", seed))
    return torch.nn.functional.cosine_similarity(est, analytic, dim=0).item()


def quadratic_estimate(dim: int = 8, h: float = 0.01) -> torch.Tensor:
    x = torch.ones(dim, dtype=torch.float64)
    return zo_gradient(lambda z: float((z ** 2).sum()), x, ZoEstimatorConfig(dim, h, "coordinate-subset", 0))


def hand_adversarial_value() -> float:
    return (math.log(0.9) + math.log(0.8)) / 2 + (math.log(1 - 0.3) + math.log(1 - 0.1)) / 2
