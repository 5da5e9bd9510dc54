"""Command-line driver: ``ntljb <subcommand> [--config run.yaml] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config

log = logging.getLogger("ntljb")

SWEEP_VALUES = (0.5, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0001)
FINETUNE_CHOICES = ("ftal", "rtal", "transntl", "transntl+jailntl", "transntl_plus_jailntl")


def _parse_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    text = text.strip()
    if not text:
        return []
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. attack.epochs=2 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--data-root", help="dataset cache directory (falls back to $NTLJB_DATA_ROOT)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ntljb", description=__doc__)
    p.add_argument("--version", action="version", version=f"ntljb {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="train a victim with a non-transferable barrier")
    s.add_argument("--method", choices=("ntl", "cuti", "supervised"))
    s.add_argument("--output", help="checkpoint path (default <out>/victim.ckpt)")

    s = sub.add_parser("seal-check", parents=[common], help="seal a victim and print its digest")
    s.add_argument("--victim", required=True)

    for name, helptext in (("attack", "train and evaluate the disguising network"),
                           ("ablate", "run the four-way ablation")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--victim", required=True)
        s.add_argument("--run-dir")
        if name == "attack":
            s.add_argument("--mode", choices=("jailntl", "jailntl_star"))

    s = sub.add_parser("finetune", parents=[common], help="white-box fine-tuning attacks")
    s.add_argument("--victim", required=True)
    s.add_argument("--mode", choices=FINETUNE_CHOICES)
    s.add_argument("--disguiser", help="disguiser.ckpt from an attack run (needed for transntl+jailntl)")
    s.add_argument("--run-dir")

    s = sub.add_parser("diagnose", parents=[common], help="export prediction statistics per domain")
    s.add_argument("--victim", required=True)
    s.add_argument("--disguiser", help="also collect statistics on disguised unauthorized test images")
    s.add_argument("--run-dir")

    s = sub.add_parser("sweep", parents=[common], help="grid over the model-guided loss weights")
    s.add_argument("--victim", required=True)
    s.add_argument("--lambda-cf", help="comma-separated values (default: the seven-point set)")
    s.add_argument("--lambda-ba", help="comma-separated values (default: the configured value)")
    s.add_argument("--run-dir")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output_root={args.out}")
    if getattr(args, "method", None):
        overrides.append(f"victim.method={args.method}")
    if args.command == "attack" and args.mode:
        overrides.append(f"attack.mode={args.mode}")
    if args.command == "finetune" and args.mode:
        overrides.append(f"finetune.mode={args.mode.replace('+', '_plus_')}")
    cfg = apply_overrides(cfg, overrides)
    if args.data_root:
        cfg = replace(cfg, data=replace(cfg.data, data_root=args.data_root))
    elif cfg.resolved_data_root():
        cfg = replace(cfg, data=replace(cfg.data, data_root=cfg.resolved_data_root()))
    return cfg.seeded()


def _stamp(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "config_digest": cfg.digest(), "version": __version__}


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_pair(cfg: RunConfig):
    from .domains import load_domain_pair

    d = cfg.data
    return load_domain_pair(d.pair, d.resolution, d.data_root, d.download)


def _view(cfg: RunConfig, pair):
    from .domains import take_authorized_subset

    seed = cfg.seed if cfg.data.subset_seed is None else cfg.data.subset_seed
    return take_authorized_subset(pair, cfg.data.fraction, seed, cfg.data.pool_test)


def _oracle(path):
    from .oracle import seal
    from .victim import load_victim

    return seal(load_victim(path))


def _run_dir(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.run_dir) if getattr(args, "run_dir", None) else Path(cfg.output_root) / default


def _report(report, cfg: RunConfig):
    report.extra.update(run_config_digest=cfg.digest())
    return replace(report, seed=cfg.seed, version=__version__)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .victim import evaluate_victim, save_victim, train_victim

    pair = _load_pair(cfg)
    model = train_victim(pair, cfg.victim)
    metrics = evaluate_victim(model, pair)
    out = Path(args.output) if args.output else Path(cfg.output_root) / "victim.ckpt"
    save_victim(model, out)
    _write_json(out.with_suffix(".json"), {**_stamp(cfg), "authorized_acc": metrics.authorized_acc,
                                           "unauthorized_acc": metrics.unauthorized_acc, "gap": metrics.gap,
                                           "barrier_ok": model.provenance.get("barrier_ok")})
    print(f"victim saved to {out}: authorized {metrics.authorized_acc:.2f}%  "
          f"unauthorized {metrics.unauthorized_acc:.2f}%")
    return 0


def cmd_seal_check(args, cfg: RunConfig) -> int:
    oracle = _oracle(args.victim)
    ok = oracle.verify_integrity()
    print(f"digest {oracle.parameter_digest.hex()}  integrity {'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_attack(args, cfg: RunConfig) -> int:
    from .attack import run_attack

    pair = _load_pair(cfg)
    oracle = _oracle(args.victim)
    run_dir = _run_dir(args, cfg, f"attack_{cfg.attack.mode}_seed{cfg.seed}")
    report, _ = run_attack(_view(cfg, pair), oracle, pair, cfg.attack, run_dir)
    report = _report(report, cfg)
    (run_dir / "report.json").write_text(report.to_json())
    print(f"{run_dir}: authorized {report.authorized_acc_before:.2f} -> {report.authorized_acc_after:.2f}  "
          f"unauthorized {report.unauthorized_acc_before:.2f} -> {report.unauthorized_acc_after:.2f}  "
          f"training queries {report.training_queries}")
    return 0 if report.valid else 1


def _write_table(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _row(name: str, report, cfg: RunConfig, **extra) -> dict:
    return {"variant": name, **extra,
            "authorized_before": report.authorized_acc_before, "authorized_after": report.authorized_acc_after,
            "unauthorized_before": report.unauthorized_acc_before,
            "unauthorized_after": report.unauthorized_acc_after,
            "unauthorized_delta": report.unauthorized_delta, "training_queries": report.training_queries,
            "integrity_ok": report.integrity_ok, **_stamp(cfg)}


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .attack import run_ablation

    pair = _load_pair(cfg)
    oracle = _oracle(args.victim)
    run_dir = _run_dir(args, cfg, f"ablation_seed{cfg.seed}")
    reports = run_ablation(_view(cfg, pair), oracle, pair, cfg.attack, run_dir)
    rows = [_row(k, r, cfg) for k, r in reports.items()]
    _write_table(run_dir / "ablation.csv", rows)
    for r in rows:
        print(f"{r['variant']:>14}: unauthorized {r['unauthorized_before']:.2f} -> {r['unauthorized_after']:.2f}")
    return 0 if all(r.valid for r in reports.values()) else 1


def cmd_sweep(args, cfg: RunConfig) -> int:
    from .attack import run_attack

    grid_cf = _parse_grid(args.lambda_cf)
    grid_ba = _parse_grid(args.lambda_ba)
    grid_cf = list(SWEEP_VALUES) if grid_cf is None else grid_cf
    grid_ba = [cfg.attack.lambda_ba] if grid_ba is None else grid_ba
    grid = list(itertools.product(grid_cf, grid_ba))
    if not grid:
        raise ConfigError("empty sweep grid")
    pair = _load_pair(cfg)
    oracle = _oracle(args.victim)
    view = _view(cfg, pair)
    run_dir = _run_dir(args, cfg, f"sweep_seed{cfg.seed}")
    rows = []
    for cf, ba in grid:
        sub_cfg = replace(cfg.attack, lambda_cf=cf, lambda_ba=ba, mode="jailntl")
        report, _ = run_attack(view, oracle, pair, sub_cfg, run_dir / f"cf{cf:g}_ba{ba:g}")
        rows.append(_row("jailntl", report, cfg, lambda_cf=cf, lambda_ba=ba))
        print(f"lambda_cf={cf:g} lambda_ba={ba:g}: unauthorized {report.unauthorized_acc_after:.2f}")
    _write_table(run_dir / "sweep.csv", rows)
    return 0


def _disguise_unlabeled(disguiser_path: str, images):
    import torch

    from .disguise import load_ensemble

    f_d = load_ensemble(disguiser_path).f_d.eval()
    with torch.no_grad():
        return torch.cat([f_d(images[i:i + 250]) for i in range(0, len(images), 250)])


def cmd_finetune(args, cfg: RunConfig) -> int:
    from .attack import AttackReport
    from .oracle import parameter_digest
    from .victim import evaluate_victim, load_victim
    from .whitebox import finetune_attack

    pair = _load_pair(cfg)
    victim = load_victim(args.victim)
    digest = parameter_digest(victim)
    view = _view(cfg, pair)
    disguised = None
    if cfg.finetune.mode == "transntl_plus_jailntl":
        if not args.disguiser:
            raise ConfigError("mode transntl+jailntl needs --disguiser")
        disguised = _disguise_unlabeled(args.disguiser, view.unauthorized_unlabeled.images())
    before = evaluate_victim(victim, pair)
    result = finetune_attack(victim, view, disguised, cfg.finetune, pair)
    report = AttackReport(before.authorized_acc, before.unauthorized_acc, result.metrics.authorized_acc,
                          result.metrics.unauthorized_acc, 0, parameter_digest(victim) == digest,
                          config_digest=cfg.digest(), seed=cfg.seed, mode=cfg.finetune.mode, pair=pair.name)
    run_dir = _run_dir(args, cfg, f"finetune_{cfg.finetune.mode}_seed{cfg.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(_report(report, cfg).to_json())
    print(f"{cfg.finetune.mode}: authorized {report.authorized_acc_after:.2f}  "
          f"unauthorized {report.unauthorized_acc_after:.2f}")
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    from .diagnostics import collect_stats, export_stats, separation

    pair = _load_pair(cfg)
    oracle = _oracle(args.victim)
    stats = [collect_stats(oracle, pair.authorized_test, "authorized"),
             collect_stats(oracle, pair.unauthorized_test, "unauthorized")]
    if args.disguiser:
        from .disguise import load_ensemble

        f_d = load_ensemble(args.disguiser).f_d.eval()
        stats.append(collect_stats(oracle, pair.unauthorized_test, "disguised", transform=f_d))
    run_dir = _run_dir(args, cfg, f"diagnostics_seed{cfg.seed}")
    export_stats(stats, run_dir / "stats", log_density=cfg.diagnostics.log_density)
    summary = {**_stamp(cfg), **separation(*stats),
               "mean_entropy": {s.tag: s.mean_entropy for s in stats},
               "balance_entropy": {s.tag: s.balance_entropy for s in stats}}
    _write_json(run_dir / "stats" / "summary.json", summary)
    for s in stats:
        print(f"{s.tag:>12}: mean entropy {s.mean_entropy:.4f}  balance entropy {s.balance_entropy:.4f}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "seal-check": cmd_seal_check, "attack": cmd_attack,
            "ablate": cmd_ablate, "finetune": cmd_finetune, "diagnose": cmd_diagnose, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "sweep":
            grid_cf, grid_ba = _parse_grid(args.lambda_cf), _parse_grid(args.lambda_ba)
            if grid_cf == [] or grid_ba == []:
                raise ConfigError("empty sweep grid")
        if args.dry_run:
            print(dump_config(cfg), end="")
            print(f"# config digest {cfg.digest()}")
            return 0
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, KeyError) as err:
        print(f"ntljb {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
