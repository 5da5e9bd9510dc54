"""Victim classifiers: a supervised reference and two non-transferable variants.

The NTL-style victim keeps cross-entropy on the authorized domain while pushing
its unauthorized-domain predictions away from the true labels (label-smoothed
KL) and separating the two domains' features (RBF-kernel MMD). The CUTI-style
victim additionally applies the same push to a mixed domain that carries
authorized style and unauthorized content, built by swapping channel statistics
of an intermediate feature map.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domains import DomainPair

logger = logging.getLogger(__name__)

METHODS = ("supervised", "ntl", "cuti")


class TrainingDivergedError(RuntimeError):
    pass


def _conv(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class SmallConvNet(nn.Module):
    """Six 3×3 conv layers in three stages, global average pooling, linear head."""

    def __init__(self, channels: int = 3, class_count: int = 10, width: int = 16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(*_conv(channels, w), *_conv(w, w), nn.MaxPool2d(2))
        self.mid = nn.Sequential(*_conv(w, 2 * w), *_conv(2 * w, 2 * w), nn.MaxPool2d(2))
        self.top = nn.Sequential(*_conv(2 * w, 4 * w), *_conv(4 * w, 4 * w),
                                 nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(4 * w, class_count)

    def stem_features(self, x):
        return self.stem(x)

    def features_from_stem(self, h):
        return self.top(self.mid(h))

    def features(self, x):
        return self.features_from_stem(self.stem_features(x))

    def forward(self, x):
        return self.head(self.features(x))


class ResNet18Net(nn.Module):
    """torchvision ResNet-18 with the same stem/features/head split as SmallConvNet."""

    def __init__(self, channels: int = 3, class_count: int = 10, width: int = 64):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(num_classes=class_count)
        if channels != 3:
            net.conv1 = nn.Conv2d(channels, 64, 7, 2, 3, bias=False)
        self._stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self._rest = nn.Sequential(net.layer2, net.layer3, net.layer4, net.avgpool, nn.Flatten())
        self.head = net.fc

    def stem_features(self, x):
        return self._stem(x)

    def features_from_stem(self, h):
        return self._rest(h)

    def features(self, x):
        return self._rest(self._stem(x))

    def forward(self, x):
        return self.head(self.features(x))


BACKBONES = {"small_cnn": SmallConvNet, "resnet18": ResNet18Net}


class VictimModel(nn.Module):
    """A classifier plus the metadata needed to seal and evaluate it."""

    def __init__(self, backbone: str, channels: int, class_count: int, resolution: int,
                 width: int = 16, provenance: dict | None = None):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.net = BACKBONES[backbone](channels, class_count, width)
        self.backbone = backbone
        self.channels = channels
        self.class_count = class_count
        self.resolution = resolution
        self.width = width
        self.provenance = dict(provenance or {})

    def features(self, x):
        return self.net.features(x)

    def forward(self, x):
        return self.net(x)


@dataclass
class VictimConfig:
    method: str = "ntl"
    backbone: str = "small_cnn"
    width: int = 16
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    lambda_kl: float = 0.5
    lambda_mmd: float = 0.1
    kl_clamp: float = 2.5
    mmd_clamp: float = 1.0
    label_smoothing: float = 0.1
    style_mix_weight: float = 1.0
    augment: bool = True
    noise_max: float = 0.1
    brightness: float = 0.05
    accuracy_floor: float = 90.0
    barrier_threshold: float | None = None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class VictimMetrics:
    authorized_acc: float
    unauthorized_acc: float

    def __post_init__(self):
        for v in (self.authorized_acc, self.unauthorized_acc):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")

    @property
    def gap(self) -> float:
        return self.authorized_acc - self.unauthorized_acc


# --------------------------------------------------------------------------- losses

def smoothed_onehot(labels: torch.Tensor, class_count: int, eps: float) -> torch.Tensor:
    return F.one_hot(labels, class_count).float() * (1.0 - eps) + eps / class_count


def kl_to_smoothed_labels(logits: torch.Tensor, labels: torch.Tensor, eps: float) -> torch.Tensor:
    """Mean KL(softmax(logits) || smoothed one-hot(labels)); finite for eps > 0."""
    target = smoothed_onehot(labels, logits.shape[1], eps)
    logp = F.log_softmax(logits, dim=1)
    return (logp.exp() * (logp - target.log())).sum(1).mean()


def mmd_rbf(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Biased RBF-kernel MMD² with the median pairwise distance as bandwidth."""
    z = torch.cat([a, b])
    d2 = torch.cdist(z, z).pow(2)
    bandwidth = d2.detach().median().clamp_min(1e-6)
    k = torch.exp(-d2 / bandwidth)
    n = len(a)
    return k[:n, :n].mean() + k[n:, n:].mean() - 2 * k[:n, n:].mean()


def mix_style(content: torch.Tensor, style: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Give ``content`` feature maps the per-channel mean/std of ``style`` (AdaIN)."""
    c_mean = content.mean((2, 3), keepdim=True)
    c_std = (content.var((2, 3), keepdim=True) + eps).sqrt()
    s_mean = style.mean((2, 3), keepdim=True)
    s_std = (style.var((2, 3), keepdim=True) + eps).sqrt()
    return (content - c_mean) / c_std * s_std + s_mean


# --------------------------------------------------------------------------- training

def _augment(x, g, cfg: VictimConfig):
    n = len(x)
    sigma = torch.rand(n, 1, 1, 1, generator=g) * cfg.noise_max
    shift = (torch.rand(n, 1, 1, 1, generator=g) * 2 - 1) * cfg.brightness
    return (x + sigma * torch.randn(x.shape, generator=g) + shift).clamp(-1, 1)


def _check_finite(loss, epoch, step, terms):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v.item():.4g}" for k, v in terms.items())
        raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}: {detail}")


def _train(pair: DomainPair, cfg: VictimConfig) -> VictimModel:
    if cfg.method not in METHODS:
        raise ValueError(f"unknown victim method {cfg.method!r}")
    if cfg.epochs < 1:
        raise ValueError("no training performed: epochs must be >= 1")
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    model = VictimModel(cfg.backbone, pair.channels, pair.class_count, pair.resolution, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps_per_epoch = len(pair.authorized_train) // cfg.batch_size
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps_per_epoch))
    xa, ya = pair.authorized_train.images(), pair.authorized_train.targets()
    xu, yu = pair.unauthorized_train.images(), pair.unauthorized_train.targets()
    bs = cfg.batch_size
    barrier = cfg.method != "supervised"
    net = model.net
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(xa), generator=g)
        for step, start in enumerate(range(0, len(xa) - bs + 1, bs)):
            idx = order[start:start + bs]
            xb = _augment(xa[idx], g, cfg) if cfg.augment else xa[idx]
            terms = {}
            if not barrier:
                ce = F.cross_entropy(model(xb), ya[idx])
                loss = terms["ce"] = ce
            else:
                j = torch.randint(len(xu), (bs,), generator=g)
                # one joint pass so BatchNorm statistics cover both domains
                h = net.stem_features(torch.cat([xb, xu[j]]))
                ha, hu = h[:bs], h[bs:]
                parts = [ha, hu]
                if cfg.method == "cuti":
                    parts.append(mix_style(hu, ha.detach()))
                feats = net.features_from_stem(torch.cat(parts))
                fa, fu = feats[:bs], feats[bs:2 * bs]
                logits_u = net.head(fu)
                ce = F.cross_entropy(net.head(fa), ya[idx])
                kl_u = kl_to_smoothed_labels(logits_u, yu[j], cfg.label_smoothing)
                mmd = mmd_rbf(fa, fu)
                push = torch.clamp(kl_u, max=cfg.kl_clamp) + cfg.lambda_mmd * torch.clamp(mmd, max=cfg.mmd_clamp)
                terms.update(ce=ce, kl_u=kl_u, mmd=mmd)
                if cfg.method == "cuti":
                    kl_mix = kl_to_smoothed_labels(net.head(feats[2 * bs:]), yu[j], cfg.label_smoothing)
                    push = push + cfg.style_mix_weight * torch.clamp(kl_mix, max=cfg.kl_clamp)
                    terms["kl_mix"] = kl_mix
                loss = ce - cfg.lambda_kl * push
            _check_finite(loss, epoch, step, terms)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        logger.info("victim %s epoch %d: %s", cfg.method, epoch,
                    " ".join(f"{k}={v.item():.3f}" for k, v in terms.items()))
    model.eval()
    metrics = evaluate_victim(model, pair)
    model.provenance = {
        "method": cfg.method,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "config": asdict(cfg),
        "authorized_acc": metrics.authorized_acc,
        "unauthorized_acc": metrics.unauthorized_acc,
    }
    if barrier:
        threshold = cfg.barrier_threshold
        if threshold is None:
            threshold = 2 * 100.0 / pair.class_count
        ok = metrics.unauthorized_acc <= threshold
        model.provenance["barrier_threshold"] = threshold
        model.provenance["barrier_ok"] = ok
        if not ok:
            logger.warning("barrier failure: unauthorized accuracy %.2f > %.2f",
                           metrics.unauthorized_acc, threshold)
    elif metrics.authorized_acc < cfg.accuracy_floor:
        logger.warning("supervised model below floor: %.2f < %.2f", metrics.authorized_acc, cfg.accuracy_floor)
    return model


def train_supervised(pair: DomainPair, config: VictimConfig | None = None) -> VictimModel:
    cfg = VictimConfig(**{**asdict(config or VictimConfig()), "method": "supervised"})
    return _train(pair, cfg)


def train_ntl_victim(pair: DomainPair, config: VictimConfig | None = None) -> VictimModel:
    cfg = VictimConfig(**{**asdict(config or VictimConfig()), "method": "ntl"})
    return _train(pair, cfg)


def train_cuti_victim(pair: DomainPair, config: VictimConfig | None = None) -> VictimModel:
    cfg = VictimConfig(**{**asdict(config or VictimConfig()), "method": "cuti"})
    return _train(pair, cfg)


def train_victim(pair: DomainPair, config: VictimConfig) -> VictimModel:
    return _train(pair, config)


# --------------------------------------------------------------------------- evaluation

@torch.no_grad()
def predict_labels(model, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    out = [model(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)]
    if was_training:
        model.train()
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def accuracy(pred: torch.Tensor, labels: torch.Tensor) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return 100.0 * (pred == labels).sum().item() / len(labels)


def evaluate_victim(model, pair: DomainPair) -> VictimMetrics:
    """Exact top-1 accuracy on both full test splits."""
    res = getattr(model, "resolution", pair.resolution)
    if res != pair.resolution:
        raise ValueError(f"resolution mismatch: model {res}, pair {pair.resolution}")
    a = accuracy(predict_labels(model, pair.authorized_test.images()), pair.authorized_test.targets())
    u = accuracy(predict_labels(model, pair.unauthorized_test.images()), pair.unauthorized_test.targets())
    return VictimMetrics(a, u)


# --------------------------------------------------------------------------- checkpoints

def save_victim(model: VictimModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"backbone": model.backbone, "channels": model.channels, "class_count": model.class_count,
            "resolution": model.resolution, "width": model.width, "provenance": model.provenance}
    torch.save({"state_dict": model.state_dict(), "meta": json.dumps(meta, sort_keys=True)}, path)
    return path


def load_victim(path: str | Path) -> VictimModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    meta = json.loads(blob["meta"])
    provenance = meta.pop("provenance")
    model = VictimModel(provenance=provenance, **meta)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def chance_level(class_count: int) -> float:
    return 100.0 / class_count


def barrier_gap_ok(metrics: VictimMetrics, min_gap: float = 40.0) -> bool:
    return metrics.gap >= min_gap and math.isfinite(metrics.gap)


__all__ = [
    "VictimModel", "VictimConfig", "VictimMetrics", "SmallConvNet", "TrainingDivergedError",
    "train_supervised", "train_ntl_victim", "train_cuti_victim", "train_victim", "evaluate_victim",
    "save_victim", "load_victim", "kl_to_smoothed_labels", "mmd_rbf", "mix_style",
]
