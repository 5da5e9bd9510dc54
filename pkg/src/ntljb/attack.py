"""Training the disguising network against a sealed victim, and evaluating the attack."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import __version__
from .disguise import (
    DidWeights, DisguiseConfig, DisguiseEnsemble, LossBundle, NonFiniteLossError, build_ensemble,
    minmax_step, save_ensemble,
)
from .domains import AttackerDataView, DomainPair, batch_count, make_batches
from .guided import MgdWeights, ZoEstimatorConfig, expected_step_queries, mgd_image_gradient

log = logging.getLogger(__name__)

MODES = ("jailntl", "jailntl_star")


@dataclass
class AttackConfig:
    epochs: int = 4
    batch_size: int = 5
    lambda_cs: float = 10.0
    lambda_cf: float = 0.01
    lambda_ba: float = 0.01
    probe_count: int = 16
    zo_step: float = 0.05
    zo_scheme: str = "random-spherical"
    # hard argmax counts make L_ba piecewise constant, and its finite differences
    # then arrive as rare huge spikes that stall Adam; mean softmax counts avoid that
    soft_counts: bool = True
    seed: int = 0
    mode: str = "jailntl"
    lr: float = 2e-4
    decay_start: int | None = None  # epoch where linear decay begins; default half of the budget
    ngf: int = 8
    ndf: int = 16
    n_blocks: int = 9
    disc_layers: int = 2
    gan_loss: str = "log"
    residual_head: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        self.did_weights()
        self.mgd_weights()
        self.zo_config()

    def did_weights(self) -> DidWeights:
        return DidWeights(self.lambda_cs)

    def mgd_weights(self) -> MgdWeights:
        return MgdWeights(self.lambda_cf, self.lambda_ba)

    def zo_config(self) -> ZoEstimatorConfig:
        return ZoEstimatorConfig(self.probe_count, self.zo_step, self.zo_scheme, self.seed)

    def disguise_config(self) -> DisguiseConfig:
        return DisguiseConfig(ngf=self.ngf, ndf=self.ndf, n_blocks=self.n_blocks, disc_layers=self.disc_layers,
                              lr=self.lr, gan_loss=self.gan_loss, residual_head=self.residual_head)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()

    def lr_factor(self, epoch: int) -> float:
        start = self.epochs // 2 if self.decay_start is None else self.decay_start
        return 1.0 - max(0, epoch + 1 - start) / (self.epochs - start + 1)


@dataclass
class AttackTrainResult:
    ensemble: DisguiseEnsemble
    history: list[LossBundle]
    training_queries: int
    expected_queries: int

    @property
    def f_d(self):
        return self.ensemble.f_d


def steps_per_epoch(view: AttackerDataView, batch_size: int) -> int:
    return batch_count(len(view.unauthorized_unlabeled), batch_size)


def expected_query_count(cfg: AttackConfig, unlabeled_count: int) -> int:
    """Closed-form oracle images queried during training."""
    steps = cfg.epochs * batch_count(unlabeled_count, cfg.batch_size)
    return steps * expected_step_queries(cfg.batch_size, cfg.mgd_weights(), cfg.zo_config(), cfg.mode)


def _authorized_stream(images: torch.Tensor, batch_size: int, seed: int):
    round_ = 0
    while True:
        yield from make_batches(images, batch_size, seed=seed * 7919 + round_)
        round_ += 1


def train_attack(view: AttackerDataView, oracle, cfg: AttackConfig) -> AttackTrainResult:
    """Alternate generator and discriminator updates over the unlabeled test images.

    Every unauthorized batch is paired with the next batch from a reshuffled
    cycle over the authorized subset. In ``jailntl`` mode the oracle sees the
    authorized batch, the disguised batch, and ``2K`` probes of it per step.
    """
    auth = view.authorized_subset.images()
    unl = view.unauthorized_unlabeled.images()
    if len(auth) < cfg.batch_size or len(unl) < cfg.batch_size:
        raise ValueError("need at least one full authorized and one full unauthorized batch")
    torch.manual_seed(cfg.seed)
    ens = build_ensemble(int(unl.shape[-1]), int(unl.shape[1]), cfg.disguise_config())
    weights, mgd_w, zo = cfg.did_weights(), cfg.mgd_weights(), cfg.zo_config()
    probe_gen = torch.Generator().manual_seed(cfg.seed + 104729)
    start_count = oracle.query_count
    use_mgd = cfg.mode == "jailntl" and mgd_w.active
    auth_batches = _authorized_stream(auth, cfg.batch_size, cfg.seed)
    lam_cf = mgd_w.lambda_cf if use_mgd and not getattr(oracle, "labels_only", False) else 0.0
    lam_ba = mgd_w.lambda_ba if use_mgd else 0.0
    history: list[LossBundle] = []

    for epoch in range(cfg.epochs):
        ens.set_learning_rate(cfg.lr * cfg.lr_factor(epoch))
        for bu in make_batches(unl, cfg.batch_size, seed=cfg.seed * 1_000_003 + epoch):
            ba = next(auth_batches)
            hook = None
            if use_mgd:
                def hook(disguised, ba=ba):
                    r = mgd_image_gradient(oracle, ba, disguised, mgd_w, zo, probe_gen, cfg.soft_counts)
                    return r.image_grad, r.l_cf, r.l_ba
            try:
                bundle = minmax_step(ens, ba, bu, weights, hook, lam_cf, lam_ba)
            except NonFiniteLossError as err:
                err.bundle = history[-1] if history else None
                raise
            history.append(bundle)
        last = history[-1]
        log.info("epoch %d/%d  L_adv %.3f  L_cs %.3f  L_cf %.3f  L_ba %.3f", epoch + 1, cfg.epochs,
                 last.L_adv, last.L_cs, last.L_cf, last.L_ba)

    used = oracle.query_count - start_count
    return AttackTrainResult(ens, history, used, expected_query_count(cfg, len(unl)))


# --------------------------------------------------------------------------- evaluation

def attack_predict(f_d, oracle, x: torch.Tensor, batch_size: int = 250):
    """Predicted classes of the victim on disguised inputs. A single ``C×H×W`` image gives an int."""
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    frozen = f_d.eval() if f_d is not None else None
    preds = []
    with torch.no_grad():
        for i in range(0, len(xb), batch_size):
            chunk = xb[i:i + batch_size]
            if frozen is not None:
                chunk = frozen(chunk).clamp(-1, 1)
            preds.append(oracle.query_labels(chunk))
    out = torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)
    return int(out[0]) if single else out


def _acc(pred, labels) -> float:
    return 100.0 * int((pred == labels).sum()) / len(labels)


@dataclass
class AttackReport:
    authorized_acc_before: float
    unauthorized_acc_before: float
    authorized_acc_after: float
    unauthorized_acc_after: float
    query_count: int
    integrity_ok: bool
    config_digest: str = ""
    seed: int = 0
    mode: str = "jailntl"
    training_queries: int = 0
    expected_training_queries: int = 0
    pair: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("authorized_acc_before", "unauthorized_acc_before",
                     "authorized_acc_after", "unauthorized_acc_after"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name}={v} outside [0, 100]")

    @property
    def authorized_delta(self) -> float:
        return self.authorized_acc_after - self.authorized_acc_before

    @property
    def unauthorized_delta(self) -> float:
        return self.unauthorized_acc_after - self.unauthorized_acc_before

    @property
    def valid(self) -> bool:
        return self.integrity_ok

    def to_dict(self) -> dict:
        d = asdict(self)
        d["authorized_delta"] = self.authorized_delta
        d["unauthorized_delta"] = self.unauthorized_delta
        d["valid"] = self.valid
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate_attack(f_d, oracle, pair: DomainPair) -> AttackReport:
    """Accuracy on both test splits before (direct queries) and after (disguised queries).

    Both splits go through exactly the same path; passing ``f_d=None`` means no disguise.
    """
    a_x, a_y = pair.authorized_test.images(), pair.authorized_test.targets()
    u_x, u_y = pair.unauthorized_test.images(), pair.unauthorized_test.targets()
    before_a = _acc(attack_predict(None, oracle, a_x), a_y)
    before_u = _acc(attack_predict(None, oracle, u_x), u_y)
    snapshot = copy.deepcopy(f_d) if f_d is not None else None
    after_a = _acc(attack_predict(snapshot, oracle, a_x), a_y)
    after_u = _acc(attack_predict(snapshot, oracle, u_x), u_y)
    ok = oracle.verify_integrity()
    if not ok:
        log.error("victim parameter digest changed; report marked invalid")
    return AttackReport(before_a, before_u, after_a, after_u, oracle.query_count, ok, pair=pair.name)


def write_losses_csv(history: list[LossBundle], path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LossBundle.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for b in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in b.as_row().items()})


def run_attack(view: AttackerDataView, oracle, pair: DomainPair, cfg: AttackConfig,
               out_dir: str | Path | None = None) -> tuple[AttackReport, AttackTrainResult]:
    """Train, evaluate, and optionally write ``report.json``, ``losses.csv`` and ``disguiser.ckpt``."""
    result = train_attack(view, oracle, cfg)
    report = evaluate_attack(result.f_d, oracle, pair)
    report = replace(report, config_digest=cfg.digest(), seed=cfg.seed, mode=cfg.mode,
                     training_queries=result.training_queries,
                     expected_training_queries=result.expected_queries)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        write_losses_csv(result.history, out / "losses.csv")
        save_ensemble(result.ensemble, out / "disguiser.ckpt")
    return report, result


ABLATION_VARIANTS = ("jailntl_star", "+L_cf", "+L_ba", "full")


def ablation_configs(base: AttackConfig) -> dict[str, AttackConfig]:
    lam_cf = base.lambda_cf or 0.01
    lam_ba = base.lambda_ba or 0.01
    return {
        "jailntl_star": replace(base, mode="jailntl_star"),
        "+L_cf": replace(base, mode="jailntl", lambda_cf=lam_cf, lambda_ba=0.0),
        "+L_ba": replace(base, mode="jailntl", lambda_cf=0.0, lambda_ba=lam_ba),
        "full": replace(base, mode="jailntl", lambda_cf=lam_cf, lambda_ba=lam_ba),
    }


def run_ablation(view: AttackerDataView, oracle, pair: DomainPair, base_cfg: AttackConfig,
                 out_dir: str | Path | None = None, variants=ABLATION_VARIANTS) -> dict[str, AttackReport]:
    configs = ablation_configs(base_cfg)
    reports = {}
    for name in variants:
        sub = None if out_dir is None else Path(out_dir) / name.replace("+", "plus_")
        reports[name], _ = run_attack(view, oracle, pair, configs[name], sub)
    return reports
