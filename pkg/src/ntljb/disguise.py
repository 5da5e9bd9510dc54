"""Bidirectional disguising networks and the data-intrinsic objectives.

``f_d`` maps unauthorized images into the authorized domain, ``f_d_inv`` maps
the other way and doubles as the feedback network that re-maps disguised data.
``f_c`` separates authorized images from ``f_d`` outputs and ``f_c_inv`` separates
unauthorized images from ``f_d_inv`` outputs. Generators minimize and
discriminators maximize

    L = L_adv + L_adv^r + lambda_cs * (L_cs + L_cs^r)

where each adversarial term is ``E[log D(real)] + E[log(1 - D(fake))]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn

EPS = 1e-7
GAN_LOSSES = ("log", "log_nonsaturating", "lsgan")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, bundle: "LossBundle | None" = None):
        super().__init__(f"non-finite loss term {term}")
        self.term = term
        self.bundle = bundle


# --------------------------------------------------------------------------- networks

class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """7×7 stem, two 7×7 stride-2 downsamplings, residual blocks, two 7×7 upsamplings, tanh.

    With ``residual_head`` the output is ``tanh(atanh(x) + body(x))`` and the last
    convolution starts at zero, so the freshly built network is a near-identity map.
    """

    def __init__(self, channels: int = 3, ngf: int = 8, n_blocks: int = 9, residual_head: bool = False):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        c = ngf
        for _ in range(2):
            layers += [nn.Conv2d(c, 2 * c, 7, stride=2, padding=3), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(c, c // 2, 7, stride=2, padding=3, output_padding=1),
                       nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, channels, 7)]
        self.body = nn.Sequential(*layers)
        self.residual_head = residual_head
        _init_weights(self)
        if residual_head:
            nn.init.zeros_(self.body[-1].weight)
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        out = self.body(x)
        if self.residual_head:
            out = out + torch.atanh(x.clamp(-1 + 1e-3, 1 - 1e-3))
        return torch.tanh(out)


class PatchDiscriminator(nn.Module):
    """PatchGAN: a conv stack whose output is one probability per receptive-field patch."""

    def __init__(self, channels: int = 3, ndf: int = 16, n_layers: int = 2):
        super().__init__()
        layers = [nn.Conv2d(channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for i in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** i, 8)
            stride = 2 if i < n_layers else 1
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride, 1), nn.InstanceNorm2d(ndf * mult),
                       nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(ndf * mult, 1, 4, 1, 1), nn.Sigmoid()]
        self.model = nn.Sequential(*layers)
        _init_weights(self)

    def forward(self, x):
        return self.model(x)


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------- ensemble

@dataclass
class DisguiseConfig:
    ngf: int = 8
    ndf: int = 16
    n_blocks: int = 9
    disc_layers: int = 2
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    gan_loss: str = "log"
    residual_head: bool = False


@dataclass(frozen=True)
class DidWeights:
    lambda_cs: float = 10.0

    def __post_init__(self):
        if not self.lambda_cs >= 0:
            raise ValueError("lambda_cs must be non-negative")


@dataclass
class DisguiseEnsemble:
    f_d: ResnetGenerator
    f_d_inv: ResnetGenerator
    f_c: PatchDiscriminator
    f_c_inv: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: DisguiseConfig
    step: int = 0
    resolution: int = 32
    channels: int = 3

    def networks(self) -> dict[str, nn.Module]:
        return {"f_d": self.f_d, "f_d_inv": self.f_d_inv, "f_c": self.f_c, "f_c_inv": self.f_c_inv}

    def parameter_counts(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in m.parameters()) for k, m in self.networks().items()}

    def set_learning_rate(self, lr: float):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def train(self):
        for m in self.networks().values():
            m.train()

    def eval(self):
        for m in self.networks().values():
            m.eval()


def build_ensemble(resolution: int, channels: int = 3, config: DisguiseConfig | None = None) -> DisguiseEnsemble:
    """Create the four networks and their two Adam optimizers. Uses the global torch RNG."""
    cfg = config or DisguiseConfig()
    if resolution % 4 != 0:
        raise ValueError(f"resolution {resolution} is not divisible by 4 (two downsamplings)")
    if cfg.gan_loss not in GAN_LOSSES:
        raise ValueError(f"unknown gan_loss {cfg.gan_loss!r}")
    f_d = ResnetGenerator(channels, cfg.ngf, cfg.n_blocks, cfg.residual_head)
    f_d_inv = ResnetGenerator(channels, cfg.ngf, cfg.n_blocks, cfg.residual_head)
    f_c = PatchDiscriminator(channels, cfg.ndf, cfg.disc_layers)
    f_c_inv = PatchDiscriminator(channels, cfg.ndf, cfg.disc_layers)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(itertools.chain(f_d.parameters(), f_d_inv.parameters()), lr=cfg.lr, betas=betas)
    opt_d = torch.optim.Adam(itertools.chain(f_c.parameters(), f_c_inv.parameters()), lr=cfg.lr, betas=betas)
    return DisguiseEnsemble(f_d, f_d_inv, f_c, f_c_inv, opt_g, opt_d, cfg, 0, resolution, channels)


# --------------------------------------------------------------------------- losses

def _check_probs(p: torch.Tensor, what: str):
    if not torch.isfinite(p).all() or (p.numel() and (p.min() < 0 or p.max() > 1)):
        raise ValueError(f"{what} must be probabilities in [0, 1]")


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1 - EPS))


def adv_loss_forward(real_probs: torch.Tensor, fake_probs: torch.Tensor) -> torch.Tensor:
    """``E[log f_c(x_a)] + E[log(1 - f_c(f_d(x_u)))]``, averaged over samples and patches."""
    _check_probs(real_probs, "discriminator outputs on real images")
    _check_probs(fake_probs, "discriminator outputs on disguised images")
    return _log(real_probs).mean() + _log(1 - fake_probs).mean()


def adv_loss_reverse(real_probs: torch.Tensor, fake_probs: torch.Tensor) -> torch.Tensor:
    """``E[log f_c_inv(x_u)] + E[log(1 - f_c_inv(f_d_inv(x_a)))]``."""
    return adv_loss_forward(real_probs, fake_probs)


def cycle_loss_forward(x: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Mean absolute per-element difference between ``x_u`` and ``f_d_inv(f_d(x_u))``."""
    if x.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(reconstruction.shape)}")
    return (reconstruction - x).abs().mean()


def cycle_loss_reverse(x: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    return cycle_loss_forward(x, reconstruction)


def did_objective(l_adv, l_adv_r, l_cs, l_cs_r, lambda_cs: float):
    if lambda_cs < 0:
        raise ValueError("lambda_cs must be non-negative")
    terms = (l_adv, l_adv_r, l_cs, l_cs_r)
    if not all(math.isfinite(float(t)) for t in terms):
        raise ValueError("non-finite loss term")
    return l_adv + l_adv_r + lambda_cs * (l_cs + l_cs_r)


def _generator_adv(fake_probs: torch.Tensor, gan_loss: str) -> torch.Tensor:
    if gan_loss == "log":
        return _log(1 - fake_probs).mean()
    if gan_loss == "log_nonsaturating":
        return -_log(fake_probs).mean()
    return (fake_probs - 1).pow(2).mean()


def _discriminator_obj(real_probs, fake_probs, gan_loss: str) -> torch.Tensor:
    """Quantity the discriminators maximize."""
    if gan_loss == "lsgan":
        return -((real_probs - 1).pow(2).mean() + fake_probs.pow(2).mean())
    return adv_loss_forward(real_probs, fake_probs)


@dataclass
class LossBundle:
    step: int
    L_adv: float
    L_adv_r: float
    L_cs: float
    L_cs_r: float
    L_cf: float = 0.0
    L_ba: float = 0.0
    L_total: float = 0.0
    lambda_cs: float = 10.0
    lambda_cf: float = 0.0
    lambda_ba: float = 0.0

    CSV_FIELDS = ("step", "L_adv", "L_adv_r", "L_cs", "L_cs_r", "L_cf", "L_ba", "L_total")

    def as_row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}


# The MGD hook receives the detached disguised batch and returns
# (gradient of the weighted model-guided loss w.r.t. that batch, L_cf, L_ba).
MgdHook = Callable[[torch.Tensor], "tuple[torch.Tensor | None, float, float]"]


def minmax_step(ens: DisguiseEnsemble, batch_a: torch.Tensor, batch_u: torch.Tensor,
                weights: DidWeights, mgd: MgdHook | None = None,
                lambda_cf: float = 0.0, lambda_ba: float = 0.0) -> LossBundle:
    """One generator update followed by one discriminator update."""
    if len(batch_a) == 0 or len(batch_u) == 0:
        raise ValueError("batches must be non-empty")
    if len(batch_a) != len(batch_u):
        raise ValueError("authorized and unauthorized batches must have the same size")
    gan = ens.config.gan_loss
    ens.train()

    for p in itertools.chain(ens.f_c.parameters(), ens.f_c_inv.parameters()):
        p.requires_grad_(False)
    disguised_u = ens.f_d(batch_u)
    disguised_a = ens.f_d_inv(batch_a)
    recon_u = ens.f_d_inv(disguised_u)
    recon_a = ens.f_d(disguised_a)
    l_cs = cycle_loss_forward(batch_u, recon_u)
    l_cs_r = cycle_loss_reverse(batch_a, recon_a)
    g_obj = (_generator_adv(ens.f_c(disguised_u), gan) + _generator_adv(ens.f_c_inv(disguised_a), gan)
             + weights.lambda_cs * (l_cs + l_cs_r))
    l_cf = l_ba = 0.0
    surrogate = g_obj
    if mgd is not None:
        img_grad, l_cf, l_ba = mgd(disguised_u.detach())
        if img_grad is not None:
            if not torch.isfinite(img_grad).all():
                raise NonFiniteLossError("model-guided gradient")
            # injects d(lambda_cf L_cf + lambda_ba L_ba)/d f_d(x_u) into the f_d backward pass
            surrogate = g_obj + (disguised_u * img_grad).sum()
    for name, v in (("L_cs", l_cs), ("L_cs_r", l_cs_r), ("generator objective", g_obj)):
        if not torch.isfinite(v):
            raise NonFiniteLossError(name)
    ens.opt_g.zero_grad(set_to_none=True)
    surrogate.backward()
    ens.opt_g.step()
    for p in itertools.chain(ens.f_c.parameters(), ens.f_c_inv.parameters()):
        p.requires_grad_(True)

    fake_u, fake_a = disguised_u.detach(), disguised_a.detach()
    real_a_probs, fake_u_probs = ens.f_c(batch_a), ens.f_c(fake_u)
    real_u_probs, fake_a_probs = ens.f_c_inv(batch_u), ens.f_c_inv(fake_a)
    l_adv = adv_loss_forward(real_a_probs, fake_u_probs)
    l_adv_r = adv_loss_reverse(real_u_probs, fake_a_probs)
    d_obj = _discriminator_obj(real_a_probs, fake_u_probs, gan) + _discriminator_obj(real_u_probs, fake_a_probs, gan)
    if not torch.isfinite(d_obj):
        raise NonFiniteLossError("discriminator objective")
    ens.opt_d.zero_grad(set_to_none=True)
    (-d_obj).backward()
    ens.opt_d.step()

    ens.step += 1
    did = did_objective(l_adv.item(), l_adv_r.item(), l_cs.item(), l_cs_r.item(), weights.lambda_cs)
    total = did + lambda_cf * l_cf + lambda_ba * l_ba
    return LossBundle(ens.step, l_adv.item(), l_adv_r.item(), l_cs.item(), l_cs_r.item(),
                      float(l_cf), float(l_ba), float(total), weights.lambda_cs, lambda_cf, lambda_ba)


# --------------------------------------------------------------------------- checkpoints

def save_ensemble(ens: DisguiseEnsemble, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {k: m.state_dict() for k, m in ens.networks().items()}
    blob.update(opt_g=ens.opt_g.state_dict(), opt_d=ens.opt_d.state_dict(), step=ens.step,
                config=asdict(ens.config), resolution=ens.resolution, channels=ens.channels)
    torch.save(blob, path)
    return path


def load_ensemble(path: str | Path) -> DisguiseEnsemble:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    ens = build_ensemble(blob["resolution"], blob["channels"], DisguiseConfig(**blob["config"]))
    for k, m in ens.networks().items():
        m.load_state_dict(blob[k])
    ens.opt_g.load_state_dict(blob["opt_g"])
    ens.opt_d.load_state_dict(blob["opt_d"])
    ens.step = blob["step"]
    return ens


def tensor_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


__all__ = [
    "ResnetGenerator", "PatchDiscriminator", "DisguiseConfig", "DidWeights", "DisguiseEnsemble",
    "LossBundle", "NonFiniteLossError", "build_ensemble", "adv_loss_forward", "adv_loss_reverse",
    "cycle_loss_forward", "cycle_loss_reverse", "did_objective", "minmax_step", "save_ensemble",
    "load_ensemble", "tensor_digest",
]
