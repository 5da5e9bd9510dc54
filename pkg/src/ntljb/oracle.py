"""A logits-only query interface around a trained victim.

The oracle exposes forward queries and nothing else: no parameters, no
features, no gradients. It counts every queried image and can prove that the
victim's weights are unchanged since sealing.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np
import torch
import torch.nn as nn


def parameter_digest(model: nn.Module) -> bytes:
    """SHA-256 over every parameter and buffer, little-endian, in declaration order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        arr = t.detach().cpu().contiguous().numpy()
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return h.digest()


class BlackBoxOracle:
    """Sealed victim. Only :meth:`query`, accounting, and integrity checks are public."""

    __slots__ = ("__victim", "__digest", "__count", "__lock", "labels_only", "class_count",
                 "resolution", "channels")

    def __init__(self, victim: nn.Module, labels_only: bool = False, hard_disable_grad: bool = False):
        self.__victim = victim
        victim.eval()
        if hard_disable_grad:
            for p in victim.parameters():
                p.requires_grad_(False)
        self.__digest = parameter_digest(victim)
        self.__count = 0
        self.__lock = threading.Lock()
        self.labels_only = labels_only
        self.class_count = int(victim.class_count)
        self.resolution = int(victim.resolution)
        self.channels = int(getattr(victim, "channels", 3))

    @property
    def query_count(self) -> int:
        return self.__count

    @property
    def parameter_digest(self) -> bytes:
        return self.__digest

    def _check(self, images: torch.Tensor):
        if not isinstance(images, torch.Tensor) or images.ndim != 4:
            raise ValueError("queries must be a 4-d batch of images (n, C, H, W)")
        expected = (self.channels, self.resolution, self.resolution)
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"resolution mismatch: got {tuple(images.shape[1:])}, oracle expects {expected}")
        if not torch.isfinite(images).all():
            raise ValueError("non-finite input image values")
        if images.numel() and (images.min() < -1 or images.max() > 1):
            raise ValueError("input images must lie in [-1, 1]")

    def query(self, images: torch.Tensor) -> torch.Tensor:
        """Return an ``n × class_count`` logits matrix, or ``n`` labels in labels-only mode."""
        self._check(images)
        with self.__lock:
            victim = self.__victim
            victim.eval()
            with torch.no_grad():
                logits = victim(images.detach().float())
            self.__count += len(images)
        if not torch.isfinite(logits).all():
            raise RuntimeError("victim produced non-finite logits")
        if self.labels_only:
            return logits.argmax(1)
        return logits.clone()

    def query_labels(self, images: torch.Tensor) -> torch.Tensor:
        out = self.query(images)
        return out if self.labels_only else out.argmax(1)

    def verify_integrity(self) -> bool:
        with self.__lock:
            return parameter_digest(self.__victim) == self.__digest

    def __repr__(self):
        mode = "labels" if self.labels_only else "logits"
        return f"BlackBoxOracle(classes={self.class_count}, res={self.resolution}, mode={mode}, queries={self.query_count})"


def seal(victim: nn.Module, labels_only: bool = False, hard_disable_grad: bool = False) -> BlackBoxOracle:
    """Wrap a trained victim so that only logits leave it."""
    return BlackBoxOracle(victim, labels_only=labels_only, hard_disable_grad=hard_disable_grad)


def verify_integrity(oracle: BlackBoxOracle) -> bool:
    return oracle.verify_integrity()


def query(oracle: BlackBoxOracle, images: torch.Tensor) -> torch.Tensor:
    return oracle.query(images)
