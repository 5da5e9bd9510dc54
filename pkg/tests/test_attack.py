import csv
import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from ntljb.attack import (
    ABLATION_VARIANTS, AttackConfig, AttackReport, attack_predict, evaluate_attack, expected_query_count,
    run_ablation, run_attack, train_attack,
)
from ntljb.disguise import build_ensemble, tensor_digest
from ntljb.domains import AttackerDataView, ImageSet, take_authorized_subset
from ntljb.oracle import seal
from ntljb.victim import VictimConfig, load_victim, save_victim, train_victim

FAST = dict(epochs=1, batch_size=5, ngf=4, ndf=4, n_blocks=1, probe_count=2)


@pytest.fixture(scope="module")
def victim_path(tiny_pair, tmp_path_factory):
    model = train_victim(tiny_pair, VictimConfig(method="ntl", epochs=1, width=8))
    return save_victim(model, tmp_path_factory.mktemp("victim") / "victim.ckpt")


@pytest.fixture
def oracle(victim_path):
    return seal(load_victim(victim_path))


@pytest.fixture(scope="module")
def view(tiny_pair):
    full = take_authorized_subset(tiny_pair, 0.05, seed=0)
    unl = ImageSet(full.unauthorized_unlabeled.pixels[:40])
    return AttackerDataView(full.authorized_subset, unl, full.subset_indices, 0.05, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epochs=0)
    with pytest.raises(ValueError):
        AttackConfig(batch_size=0)
    with pytest.raises(ValueError):
        AttackConfig(mode="jailntl_plus")
    with pytest.raises(ValueError):
        AttackConfig(lambda_cf=-1)
    assert AttackConfig().digest() == AttackConfig().digest() != AttackConfig(seed=1).digest()


def test_star_mode_never_queries(view, oracle):
    result = train_attack(view, oracle, AttackConfig(mode="jailntl_star", **FAST))
    assert oracle.query_count == 0 and result.training_queries == 0 == result.expected_queries


def test_query_count_matches_closed_form(view, oracle):
    cfg = AttackConfig(**{**FAST, "epochs": 2})
    result = train_attack(view, oracle, cfg)
    steps = 2 * (40 // 5)
    assert result.training_queries == oracle.query_count == steps * (2 + 2 * 2) * 5
    assert result.training_queries == expected_query_count(cfg, 40)
    assert len(result.history) == steps


def test_losses_are_deterministic(view, victim_path):
    cfg = AttackConfig(**FAST)
    a = train_attack(view, seal(load_victim(victim_path)), cfg)
    b = train_attack(view, seal(load_victim(victim_path)), cfg)
    assert [x.as_row() for x in a.history] == [x.as_row() for x in b.history]
    assert tensor_digest(a.f_d) == tensor_digest(b.f_d)


def test_zero_weights_reproduce_star_bitwise(view, victim_path):
    zero = train_attack(view, seal(load_victim(victim_path)), AttackConfig(lambda_cf=0, lambda_ba=0, **FAST))
    star = train_attack(view, seal(load_victim(victim_path)), AttackConfig(mode="jailntl_star", **FAST))
    assert tensor_digest(zero.ensemble.f_d) == tensor_digest(star.ensemble.f_d)
    assert tensor_digest(zero.ensemble.f_c) == tensor_digest(star.ensemble.f_c)


def test_purity_with_victim_gradients_disabled(view, victim_path):
    cfg = AttackConfig(**FAST)
    enabled = train_attack(view, seal(load_victim(victim_path)), cfg)
    frozen = load_victim(victim_path)
    oracle = seal(frozen, hard_disable_grad=True)
    disabled = train_attack(view, oracle, cfg)
    assert tensor_digest(enabled.f_d) == tensor_digest(disabled.f_d)
    assert oracle.verify_integrity()


def test_attack_predict_identity_and_paths(oracle, tiny_pair):
    x = tiny_pair.unauthorized_test.images()[:12]
    direct = oracle.query(x).argmax(1)
    assert torch.equal(attack_predict(None, oracle, x), direct)
    assert torch.equal(attack_predict(nn.Identity(), oracle, x), direct)
    torch.manual_seed(0)
    f_d = build_ensemble(16, 3, AttackConfig(**FAST).disguise_config()).f_d
    batch = attack_predict(f_d, oracle, x, batch_size=5)
    single = [attack_predict(f_d, oracle, xi) for xi in x]
    assert batch.tolist() == single
    assert attack_predict(f_d, oracle, x[0]) == attack_predict(f_d, oracle, x[0])


def test_evaluate_attack_report(oracle, tiny_pair):
    torch.manual_seed(0)
    f_d = build_ensemble(16, 3, AttackConfig(**FAST).disguise_config()).f_d
    rep = evaluate_attack(f_d, oracle, tiny_pair)
    assert rep.integrity_ok and rep.valid
    assert rep.unauthorized_delta == rep.unauthorized_acc_after - rep.unauthorized_acc_before
    assert rep.authorized_delta == rep.authorized_acc_after - rep.authorized_acc_before
    same = evaluate_attack(None, oracle, tiny_pair)
    assert same.authorized_acc_after == same.authorized_acc_before
    assert same.unauthorized_acc_after == same.unauthorized_acc_before


def test_report_flags_integrity_failure(victim_path, tiny_pair):
    victim = load_victim(victim_path)
    oracle = seal(victim)
    with torch.no_grad():
        victim.net.head.weight.mul_(1.01)
    assert not evaluate_attack(None, oracle, tiny_pair).valid


def test_report_validation():
    with pytest.raises(ValueError):
        AttackReport(101, 0, 0, 0, 0, True)


def test_run_attack_writes_outputs(tmp_path, view, oracle, tiny_pair):
    cfg = AttackConfig(**FAST)
    report, _ = run_attack(view, oracle, tiny_pair, cfg, tmp_path / "run")
    files = {p.name for p in (tmp_path / "run").iterdir()}
    assert files == {"report.json", "losses.csv", "disguiser.ckpt"}
    data = json.loads((tmp_path / "run" / "report.json").read_text())
    assert data["config_digest"] == cfg.digest() and data["seed"] == 0 and data["version"]
    assert data["training_queries"] == data["expected_training_queries"]
    with open(tmp_path / "run" / "losses.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L_adv", "L_adv_r", "L_cs", "L_cs_r", "L_cf", "L_ba", "L_total"]
    assert len(rows) == 1 + 40 // 5


def test_reports_are_byte_identical(tmp_path, view, victim_path, tiny_pair):
    cfg = AttackConfig(**FAST)
    for name in ("a", "b"):
        run_attack(view, seal(load_victim(victim_path)), tiny_pair, cfg, tmp_path / name)
    for f in ("report.json", "losses.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ablation_variants(view, oracle, tiny_pair):
    reports = run_ablation(view, oracle, tiny_pair, AttackConfig(**FAST))
    assert tuple(reports) == ABLATION_VARIANTS
    assert reports["jailntl_star"].training_queries == 0
    assert all(r.training_queries == r.expected_training_queries for r in reports.values())
    assert all(r.valid for r in reports.values())


def test_too_little_data_rejected(view, oracle):
    tiny = AttackerDataView(view.authorized_subset.subset(np.arange(2)), view.unauthorized_unlabeled,
                            np.arange(2), 0.05, 0)
    with pytest.raises(ValueError):
        train_attack(tiny, oracle, AttackConfig(**FAST))


def test_labels_only_oracle_trains(view, victim_path):
    oracle = seal(load_victim(victim_path), labels_only=True)
    result = train_attack(view, oracle, AttackConfig(**FAST))
    assert all(b.L_cf == 0 and b.lambda_cf == 0 for b in result.history)
    assert result.training_queries == result.expected_queries
