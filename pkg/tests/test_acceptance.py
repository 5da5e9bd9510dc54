"""End-to-end acceptance criteria at desk scale.

Each test records one PASS/FAIL line that is printed in the terminal summary.
The attack runs are shared between criteria through a session-scoped cache, so
the whole module needs roughly an hour on a single CPU core.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from ntljb.attack import AttackConfig, run_attack, train_attack
from ntljb.diagnostics import collect_stats, separation
from ntljb.disguise import (
    EPS, ResnetGenerator, adv_loss_forward, cycle_loss_forward, load_ensemble, tensor_digest,
)
from ntljb.domains import AttackerDataView, ImageSet, take_authorized_subset
from ntljb.guided import (
    balance_entropy, class_balance_loss, class_distribution, confidence_loss, prediction_entropy, softmax,
)
from ntljb.oracle import seal
from ntljb.victim import VictimConfig, evaluate_victim, load_victim, save_victim, train_victim
from ntljb.whitebox import FinetuneConfig, finetune_attack, self_distillation_loss

from oracles import finite_difference_errors, quadratic_estimate, zo_cosine

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
KINDS = ("ntl", "cuti")
FRACTION = 0.01
CASES = 10_000


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def victims(digits_pair, tmp_path_factory):
    """Train both victims once; returns {kind: (checkpoint path, seconds)}."""
    root = tmp_path_factory.mktemp("victims")
    out = {}
    for kind in KINDS:
        start = time.perf_counter()
        model = train_victim(digits_pair, VictimConfig(method=kind))
        out[kind] = (save_victim(model, root / f"{kind}.ckpt"), time.perf_counter() - start)
    return out


class Runs:
    """Memoized attack runs keyed by (victim kind, seed, variant)."""

    def __init__(self, pair, victims, root):
        self.pair, self.victims, self.root = pair, victims, root
        self.cache = {}

    def config(self, seed, variant):
        if variant == "star":
            return AttackConfig(seed=seed, mode="jailntl_star")
        if variant == "zero":
            return AttackConfig(seed=seed, lambda_cf=0.0, lambda_ba=0.0)
        return AttackConfig(seed=seed)

    def get(self, kind, seed, variant="full", tag=""):
        key = (kind, seed, variant, tag)
        if key not in self.cache:
            oracle = seal(load_victim(self.victims[kind][0]))
            view = take_authorized_subset(self.pair, FRACTION, seed)
            out = self.root / f"{kind}_{variant}_seed{seed}{tag}"
            report, result = run_attack(view, oracle, self.pair, self.config(seed, variant), out)
            self.cache[key] = (report, result, out, oracle.verify_integrity())
        return self.cache[key]


@pytest.fixture(scope="session")
def runs(digits_pair, victims, tmp_path_factory):
    return Runs(digits_pair, victims, tmp_path_factory.mktemp("attacks"))


def _median(values):
    return statistics.median(values)


# ---------------------------------------------------------------- criterion 1

def _property_suite(rng: torch.Generator) -> dict[str, bool]:
    ok = {}
    c = 10
    logc = math.log(c)

    scales = torch.rand(CASES, 1, generator=rng, dtype=torch.float64) * 50
    logits = torch.randn(CASES, c, generator=rng, dtype=torch.float64) * scales
    logits[: CASES // 10, 0] += 800.0  # near one-hot rows
    ent = prediction_entropy(logits)
    ok["entropy within [0, log C]"] = bool((ent >= 0).all() and (ent <= logc + 1e-12).all())
    p = softmax(logits)
    ok["softmax normalized"] = bool((p >= 0).all() and ((p.sum(1) - 1).abs() < 1e-12).all())

    pairs_a = torch.randn(CASES, 4, c, generator=rng, dtype=torch.float64) * 5
    pairs_d = torch.randn(CASES, 4, c, generator=rng, dtype=torch.float64) * 5
    cf = [confidence_loss(a, d).item() for a, d in zip(pairs_a, pairs_d)]
    same = [confidence_loss(a, a.clone()).item() for a in pairs_a]
    ok["L_cf non-negative, zero on identity"] = min(cf) >= 0 and max(same) == 0.0

    labels_a = torch.randint(0, c, (CASES, 8), generator=rng).numpy()
    labels_d = torch.randint(0, c, (CASES, 8), generator=rng).numpy()
    labels_d[: CASES // 10] = 3  # degenerate single-class batches
    ba_ok, zero_ok, bounds_ok = True, True, True
    for la, ld in zip(labels_a, labels_d):
        pa, pd = class_distribution(la, c), class_distribution(ld, c)
        v = class_balance_loss(pd, pa)
        ba_ok &= 0 <= v <= logc + 1e-12
        zero_ok &= class_balance_loss(pa, pa) == 0.0
        e = balance_entropy(pd)
        bounds_ok &= 0 <= e <= logc + 1e-12 and abs(pd.probabilities.sum() - 1) < 1e-12
    ok["L_ba within [0, log C], zero on identity"] = bool(ba_ok and zero_ok)
    ok["balance entropy within [0, log C]"] = bool(bounds_ok)

    real = torch.rand(CASES, 2, 6, 6, generator=rng)
    fake = torch.rand(CASES, 2, 6, 6, generator=rng)
    real[: CASES // 10] = (real[: CASES // 10] > 0.5).float()  # saturated outputs at 0 and 1
    fake[: CASES // 10] = (fake[: CASES // 10] > 0.5).float()
    lo = 2 * math.log(EPS) - 1e-4
    adv = torch.tensor([adv_loss_forward(r, f).item() for r, f in zip(real, fake)])
    ok["L_adv within [2 log eps, 0]"] = bool((adv <= 0).all() and (adv >= lo).all())

    x = torch.rand(CASES, 3, 4, 4, generator=rng) * 2 - 1
    y = torch.rand(CASES, 3, 4, 4, generator=rng) * 2 - 1
    cs = torch.tensor([cycle_loss_forward(a, b).item() for a, b in zip(x, y)])
    cs_same = torch.tensor([cycle_loss_forward(a, a.clone()).item() for a in x])
    ok["L_cs non-negative, zero on identity"] = bool((cs >= 0).all() and (cs_same == 0).all())

    torch.manual_seed(0)
    gen = ResnetGenerator(3, ngf=4, n_blocks=1).eval()
    imgs = torch.rand(CASES, 3, 8, 8, generator=rng) * 20 - 10  # far outside the image range too
    with torch.no_grad():
        out = torch.cat([gen(imgs[i:i + 1000]) for i in range(0, CASES, 1000)])
    ok["generator output within [-1, 1]"] = bool((out.abs() <= 1).all())
    return ok


def test_c1_property_suite(acceptance_record):
    start = time.perf_counter()
    ok = _property_suite(torch.Generator().manual_seed(20240))
    elapsed = time.perf_counter() - start
    passed = all(ok.values()) and elapsed < 120
    failed = [k for k, v in ok.items() if not v]
    acceptance_record(1, passed, f"{len(ok)} invariants x {CASES} cases in {elapsed:.1f}s"
                      + (f"; failed: {failed}" if failed else ""))
    assert passed, (failed, elapsed)


# ---------------------------------------------------------------- criterion 2

def test_c2_gradient_oracles(acceptance_record):
    start = time.perf_counter()
    errors = finite_difference_errors()
    cosine = zo_cosine(k=64, h=0.01)
    quad = quadratic_estimate()
    elapsed = time.perf_counter() - start
    quad_ok = bool(((quad - 2.0).abs() < 1e-12).all())
    passed = max(errors.values()) < 1e-3 and cosine >= 0.7 and quad_ok and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    acceptance_record(2, passed, f"rel. errors {detail}; ZO cosine {cosine:.3f}; quadratic 2.0 {quad_ok}; "
                                 f"{elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------- criterion 3

def test_c3_black_box_purity(victims, digits_pair, acceptance_record):
    path = victims["ntl"][0]
    full = take_authorized_subset(digits_pair, FRACTION, 0)
    unl = ImageSet(full.unauthorized_unlabeled.pixels[:100])
    view = AttackerDataView(full.authorized_subset, unl, full.subset_indices, FRACTION, 0)
    cfg = AttackConfig(epochs=1, seed=0)

    enabled_oracle = seal(load_victim(path))
    enabled = train_attack(view, enabled_oracle, cfg)
    frozen = load_victim(path)
    disabled_oracle = seal(frozen, hard_disable_grad=True)
    disabled = train_attack(view, disabled_oracle, cfg)

    frozen_ok = all(not p.requires_grad for p in frozen.parameters())
    same = tensor_digest(enabled.f_d) == tensor_digest(disabled.f_d)
    integrity = enabled_oracle.verify_integrity() and disabled_oracle.verify_integrity()
    passed = frozen_ok and same and integrity
    acceptance_record(3, passed, f"bitwise-identical disguiser {same}; victim grads disabled {frozen_ok}; "
                                 f"integrity {integrity}; {enabled.training_queries} queries per run")
    assert passed


# ---------------------------------------------------------------- criterion 4

def test_c4_desk_scale_barrier(victims, digits_pair, acceptance_record):
    parts, passed = [], True
    for kind in KINDS:
        path, seconds = victims[kind]
        m = evaluate_victim(load_victim(path), digits_pair)
        ok = m.gap >= 40 and seconds < 20 * 60
        passed &= ok
        parts.append(f"{kind} {m.authorized_acc:.1f}/{m.unauthorized_acc:.1f} gap {m.gap:.1f} ({seconds:.0f}s)")
    acceptance_record(4, passed, "; ".join(parts))
    assert passed


# ---------------------------------------------------------------- criterion 5

def test_c5_jailbreak_trend(runs, acceptance_record):
    parts, passed = [], True
    for kind in KINDS:
        reps = [runs.get(kind, s)[0] for s in SEEDS]
        gain = _median([r.unauthorized_delta for r in reps])
        drop = _median([-r.authorized_delta for r in reps])
        ok = gain >= 20 and drop <= 10 and all(r.valid for r in reps)
        passed &= ok
        parts.append(f"{kind} median unauthorized gain {gain:+.1f}, authorized drop {drop:.1f} "
                     f"(gains {[round(r.unauthorized_delta, 1) for r in reps]})")
    acceptance_record(5, passed, "; ".join(parts))
    assert passed


# ---------------------------------------------------------------- criterion 6

def test_c6_ablation_ordering(runs, acceptance_record):
    parts, passed = [], True
    for kind in KINDS:
        full = _median([runs.get(kind, s)[0].unauthorized_delta for s in SEEDS])
        star = _median([runs.get(kind, s, "star")[0].unauthorized_delta for s in SEEDS])
        ok = full >= star - 2
        passed &= ok
        parts.append(f"{kind} full {full:+.1f} vs star {star:+.1f}")
    zero = runs.get("ntl", 0, "zero")[1]
    star0 = runs.get("ntl", 0, "star")[1]
    bitwise = all(tensor_digest(getattr(zero.ensemble, n)) == tensor_digest(getattr(star0.ensemble, n))
                  for n in ("f_d", "f_d_inv", "f_c", "f_c_inv"))
    passed &= bitwise and zero.training_queries == 0
    parts.append(f"lambda=0 reproduces star bitwise {bitwise}")
    acceptance_record(6, passed, "; ".join(parts))
    assert passed


# ---------------------------------------------------------------- criterion 7

def _disguised_unlabeled(result, view):
    f_d = result.f_d.eval()
    x = view.unauthorized_unlabeled.images()
    with torch.no_grad():
        return torch.cat([f_d(x[i:i + 250]) for i in range(0, len(x), 250)])


def test_c7_whitebox_integration(runs, victims, digits_pair, acceptance_record):
    parts, passed = [], True
    for kind in KINDS:
        victim = load_victim(victims[kind][0])
        plain, plus = [], []
        for seed in SEEDS:
            view = take_authorized_subset(digits_pair, FRACTION, seed)
            disguised = _disguised_unlabeled(runs.get(kind, seed)[1], view)
            a = finetune_attack(victim, view, None, FinetuneConfig(mode="transntl", seed=seed), digits_pair)
            b = finetune_attack(victim, view, disguised, FinetuneConfig(mode="transntl_plus_jailntl", seed=seed),
                                digits_pair)
            plain.append(a.metrics.unauthorized_acc)
            plus.append(b.metrics.unauthorized_acc)
        ok = _median(plus) >= _median(plain) - 2
        passed &= ok
        parts.append(f"{kind} transntl {_median(plain):.1f} vs +jailntl {_median(plus):.1f}")

    torch.manual_seed(0)
    model = load_victim(victims["ntl"][0])
    x = digits_pair.authorized_test.images()[:32]
    sd_zero = all(self_distillation_loss(model.train(mode), x, [x.clone(), x.clone()]).item() == 0.0
                  for mode in (False, True))
    passed &= sd_zero
    parts.append(f"L_sd exactly 0 on identical predictions {sd_zero}")
    acceptance_record(7, passed, "; ".join(parts))
    assert passed


# ---------------------------------------------------------------- criterion 8

def test_c8_diagnostics_separation(runs, victims, digits_pair, acceptance_record):
    parts, passed = [], True
    for kind in KINDS:
        oracle = seal(load_victim(victims[kind][0]))
        f_d = load_ensemble(runs.get(kind, 0)[2] / "disguiser.ckpt").f_d.eval()
        a = collect_stats(oracle, digits_pair.authorized_test, "authorized")
        u = collect_stats(oracle, digits_pair.unauthorized_test, "unauthorized")
        d = collect_stats(oracle, digits_pair.unauthorized_test, "disguised", transform=f_d)
        sep = separation(a, u, d)
        ok = (sep["entropy_gap"] > 0 and sep["balance_gap"] > 0
              and sep["balance_distance_disguised"] < sep["balance_distance_unauthorized"])
        passed &= ok
        parts.append(f"{kind} entropy a/u {a.mean_entropy:.3f}/{u.mean_entropy:.3f}, balance a/u/d "
                     f"{a.balance_entropy:.3f}/{u.balance_entropy:.3f}/{d.balance_entropy:.3f}")
    acceptance_record(8, passed, "; ".join(parts))
    assert passed


# ---------------------------------------------------------------- criterion 9

def test_c9_determinism_and_accounting(runs, acceptance_record):
    _, _, first_dir, _ = runs.get("ntl", 0)
    _, _, again_dir, _ = runs.get("ntl", 0, tag="_rerun")
    identical = all((first_dir / f).read_bytes() == (again_dir / f).read_bytes()
                    for f in ("report.json", "losses.csv"))
    exact = True
    counted = 0
    for key, (report, result, _, integrity) in runs.cache.items():
        exact &= report.training_queries == report.expected_training_queries == result.expected_queries
        exact &= integrity and report.integrity_ok
        counted += 1
    full = runs.get("ntl", 0)[0]
    per_step = (2 + 2 * 16) * 5
    closed = 4 * (1150 // 5) * per_step
    exact &= full.training_queries == closed
    passed = identical and exact
    acceptance_record(9, passed, f"byte-identical rerun {identical}; query counts exact over {counted} runs "
                                 f"{exact} (full run {full.training_queries} = {closed})")
    assert passed
