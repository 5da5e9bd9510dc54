"""Black-box prediction statistics per domain: confidence and class balance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .domains import ImageSet  # noqa: E402
from .guided import balance_entropy, class_distribution, max_logit_confidence, prediction_entropy  # noqa: E402

TAGS = ("authorized", "unauthorized", "disguised")
ENTROPY_BINS = 50


@dataclass
class DomainStats:
    tag: str
    entropies: np.ndarray
    max_logits: np.ndarray
    predicted: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown domain tag {self.tag!r}")
        if not (len(self.entropies) == len(self.max_logits) == len(self.predicted)):
            raise ValueError("per-sample arrays must have equal length")

    def __len__(self):
        return len(self.entropies)

    @property
    def proportions(self) -> np.ndarray:
        return class_distribution(self.predicted, self.class_count).probabilities

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropies))

    @property
    def balance_entropy(self) -> float:
        return balance_entropy(class_distribution(self.predicted, self.class_count))


def collect_stats(oracle, samples, tag: str, transform=None, batch_size: int = 250) -> DomainStats:
    """Query the oracle on ``samples`` (optionally passed through ``transform`` first)."""
    x = samples.images() if isinstance(samples, ImageSet) else samples
    ent, mx, pred = [], [], []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            chunk = x[i:i + batch_size]
            if transform is not None:
                chunk = transform(chunk).clamp(-1, 1)
            logits = oracle.query(chunk).double()
            ent.append(prediction_entropy(logits).numpy())
            mx.append(max_logit_confidence(logits).numpy())
            pred.append(logits.argmax(1).numpy())
    return DomainStats(tag, np.concatenate(ent), np.concatenate(mx), np.concatenate(pred), oracle.class_count)


def separation(authorized: DomainStats, unauthorized: DomainStats, disguised: DomainStats | None = None) -> dict:
    out = {
        "entropy_gap": unauthorized.mean_entropy - authorized.mean_entropy,
        "balance_gap": authorized.balance_entropy - unauthorized.balance_entropy,
    }
    if disguised is not None:
        out["balance_distance_unauthorized"] = abs(unauthorized.balance_entropy - authorized.balance_entropy)
        out["balance_distance_disguised"] = abs(disguised.balance_entropy - authorized.balance_entropy)
    return out


_PNG_META = {"Software": None}


def _entropy_plot(stats: DomainStats, others: list[DomainStats], path: Path, log_density: bool):
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    bins = np.linspace(0.0, math.log(stats.class_count), ENTROPY_BINS + 1)
    for s in [stats, *others]:
        ax.hist(s.entropies, bins=bins, density=True, alpha=0.6 if s is stats else 0.35,
                label=s.tag, log=log_density)
    ax.set_xlabel("prediction entropy")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _balance_plot(stats: DomainStats, others: list[DomainStats], path: Path):
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    group = [stats, *others]
    width = 0.8 / len(group)
    idx = np.arange(stats.class_count)
    for j, s in enumerate(group):
        ax.bar(idx + j * width, s.proportions, width=width, label=s.tag)
    ax.set_xticks(idx + 0.4 - width / 2, [str(i) for i in idx])
    ax.set_xlabel("predicted class")
    ax.set_ylabel("proportion")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def export_stats(stats: list[DomainStats], out_dir: str | Path, log_density: bool = False) -> list[Path]:
    """Write ``<tag>.csv``, ``<tag>_entropy.png`` and ``<tag>_balance.png`` for each stats object.

    Each figure overlays the other exported domains for comparison.
    """
    if not stats:
        raise ValueError("nothing to export")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err
    written = []
    for s in stats:
        others = [o for o in stats if o is not s]
        csv_path = out / f"{s.tag}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "entropy", "max_logit", "predicted_class"])
            for i, (e, m, p) in enumerate(zip(s.entropies, s.max_logits, s.predicted)):
                w.writerow([i, repr(float(e)), repr(float(m)), int(p)])
        ent_path, bal_path = out / f"{s.tag}_entropy.png", out / f"{s.tag}_balance.png"
        _entropy_plot(s, others, ent_path, log_density)
        _balance_plot(s, others, bal_path)
        written += [csv_path, ent_path, bal_path]
    return written
