"""Authorized/unauthorized domain pairs, the attacker's data view, and batching.

Images are stored as read-only ``uint8`` arrays of shape ``(N, C, H, W)`` and
exposed to models as float tensors in ``[-1, 1]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

logger = logging.getLogger(__name__)

SPLITS = ("authorized_train", "authorized_test", "unauthorized_train", "unauthorized_test")


def normalize(pixels: np.ndarray) -> torch.Tensor:
    """Map 8-bit pixels to float32 values in [-1, 1]."""
    return torch.from_numpy(np.asarray(pixels, dtype=np.float32)) / 127.5 - 1.0


def denormalize(images: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`, rounding back to 8-bit pixels."""
    x = (images.detach().cpu().double() + 1.0) * 127.5
    return np.clip(np.rint(x.numpy()), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class DomainSample:
    image: torch.Tensor
    label: int | None = None

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"expected a C×H×W image, got shape {tuple(self.image.shape)}")
        if self.image.numel() and (self.image.min() < -1 or self.image.max() > 1):
            raise ValueError("image values must lie in [-1, 1]")


@dataclass(frozen=True, eq=False)
class ImageSet:
    """An immutable collection of images with optional integer labels."""

    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if pixels.ndim != 4:
            raise ValueError(f"pixels must be N×C×H×W, got shape {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (len(pixels),):
                raise ValueError("labels must be a vector with one entry per image")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> DomainSample:
        label = None if self.labels is None else int(self.labels[i])
        return DomainSample(normalize(self.pixels[i]), label)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def images(self) -> torch.Tensor:
        return normalize(self.pixels)

    def targets(self) -> torch.Tensor:
        if self.labels is None:
            raise ValueError("this image set carries no labels")
        return torch.from_numpy(self.labels.copy())

    def subset(self, idx) -> ImageSet:
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.pixels[idx], None if self.labels is None else self.labels[idx])

    def without_labels(self) -> ImageSet:
        return ImageSet(self.pixels, None)


@dataclass(frozen=True, eq=False)
class DomainPair:
    name: str
    authorized_train: ImageSet
    authorized_test: ImageSet
    unauthorized_train: ImageSet
    unauthorized_test: ImageSet
    class_names: tuple[str, ...]
    resolution: int

    def __post_init__(self):
        for split in SPLITS:
            s = getattr(self, split)
            if s.labels is None:
                raise ValueError(f"{split} must be labeled")
            if s.shape[1:] != (self.resolution, self.resolution):
                raise ValueError(f"{split} has spatial size {s.shape[1:]}, expected {self.resolution}")
            if len(s) and (s.labels.min() < 0 or s.labels.max() >= self.class_count):
                raise ValueError(f"{split} has labels outside [0, {self.class_count})")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> int:
        return self.authorized_train.shape[0]

    def split(self, name: str) -> ImageSet:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True, eq=False)
class AttackerDataView:
    """What the attacker holds: a few labeled authorized samples and unlabeled test images."""

    authorized_subset: ImageSet
    unauthorized_unlabeled: ImageSet
    subset_indices: np.ndarray = field(repr=False)
    fraction: float
    seed: int

    def __post_init__(self):
        if self.unauthorized_unlabeled.labels is not None:
            raise ValueError("unauthorized images must be unlabeled")


# --------------------------------------------------------------------------- registry

PairBuilder = Callable[[int, "Path | None", bool], tuple[dict[str, ImageSet], tuple[str, ...]]]
_PAIRS: dict[str, PairBuilder] = {}


def register_pair(name: str):
    def deco(fn: PairBuilder) -> PairBuilder:
        _PAIRS[name] = fn
        return fn
    return deco


def registered_pairs() -> list[str]:
    return sorted(_PAIRS)


def load_domain_pair(name: str, resolution: int, data_root: str | Path | None = None,
                     download: bool = False) -> DomainPair:
    """Build (or read from cache) a registered domain pair at ``resolution``.

    When ``data_root`` is given the pair is cached under ``<root>/<name>/`` as one
    ``<split>.bin`` file per split plus ``manifest.json``.
    """
    if name not in _PAIRS:
        raise KeyError(f"unregistered pair {name!r}; known pairs: {', '.join(registered_pairs())}")
    if resolution < 8:
        raise ValueError("resolution must be at least 8 pixels")
    root = Path(data_root) if data_root is not None else None
    if root is not None:
        cached = read_pair_cache(root / name, resolution)
        if cached is not None:
            splits, class_names = cached
            return DomainPair(name, **splits, class_names=class_names, resolution=resolution)
    splits, class_names = _PAIRS[name](resolution, root, download)
    pair = DomainPair(name, **splits, class_names=tuple(class_names), resolution=resolution)
    if root is not None:
        write_pair_cache(pair, root / name)
    return pair


def _split_bytes(s: ImageSet) -> bytes:
    return s.pixels.tobytes() + s.labels.astype(np.uint8).tobytes()


def pair_digest(pair: DomainPair) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        h.update(_split_bytes(pair.split(split)))
    return h.hexdigest()


def write_pair_cache(pair: DomainPair, directory: Path) -> Path:
    """Write ``<split>.bin`` files (uint8 NCHW pixels, then uint8 labels) and a manifest."""
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        (directory / f"{split}.bin").write_bytes(_split_bytes(pair.split(split)))
    manifest = {
        "pair": pair.name,
        "resolution": pair.resolution,
        "channels": pair.channels,
        "class_names": list(pair.class_names),
        "counts": {split: len(pair.split(split)) for split in SPLITS},
        "digest": pair_digest(pair),
        "format": "uint8 pixels N*C*H*W followed by uint8 labels N",
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_pair_cache(directory: Path, resolution: int):
    path = directory / "manifest.json"
    if not path.exists():
        return None
    manifest = json.loads(path.read_text())
    if manifest.get("resolution") != resolution:
        return None
    c, r = manifest["channels"], resolution
    splits, h = {}, hashlib.sha256()
    for split in SPLITS:
        raw = (directory / f"{split}.bin").read_bytes()
        n = manifest["counts"][split]
        if len(raw) != n * (c * r * r + 1):
            raise ValueError(f"cache file {split}.bin is truncated or corrupt")
        h.update(raw)
        buf = np.frombuffer(raw, dtype=np.uint8)
        pixels = buf[: n * c * r * r].reshape(n, c, r, r)
        splits[split] = ImageSet(pixels, buf[n * c * r * r:].astype(np.int64))
    if h.hexdigest() != manifest["digest"]:
        raise ValueError(f"cache digest mismatch in {directory}")
    return splits, tuple(manifest["class_names"])


# --------------------------------------------------------------------------- digit pair

DIGIT_NAMES = tuple(str(i) for i in range(10))


def _render_digit(base: np.ndarray, rng: np.random.Generator, res: int) -> np.ndarray:
    """Place an 8×8 digit on a res×res canvas with a random small affine jitter."""
    from scipy import ndimage

    size = int(round(0.75 * res))
    img = ndimage.zoom(base / 16.0, size / 8.0, order=1)
    size = img.shape[0]
    canvas = np.zeros((res, res))
    o = (res - size) // 2
    canvas[o:o + size, o:o + size] = img
    angle = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-2, 2, 2) * res / 32
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / scale
    centre = np.full(2, res / 2)
    offset = centre - rot @ centre - shift
    return np.clip(ndimage.affine_transform(canvas, rot, offset=offset, order=1), 0, 1)


def _gray_style(stroke: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.repeat(stroke[None], 3, 0)


def _color_style(stroke: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    fg = rng.uniform(0.6, 1.0, 3)
    bg = rng.uniform(0.0, 0.35, 3)
    noise = rng.normal(0.0, 0.04, (3,) + stroke.shape)
    return np.clip(bg[:, None, None] * (1 - stroke) + fg[:, None, None] * stroke + noise, 0, 1)


@register_pair("digits_small")
def _build_digits_small(resolution: int, root, download: bool):
    """Two disjoint partitions of the bundled handwritten-digit corpus.

    The authorized domain renders digits as clean gray strokes; the unauthorized
    domain renders a separate set of writers' digits as noisy colored strokes on
    tinted backgrounds. Each base digit is rendered several times with affine jitter.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(digits.images))
    a_idx, u_idx = perm[:1078], perm[1078:]
    plan = {
        "authorized_train": (a_idx[:862], 4, _gray_style),
        "authorized_test": (a_idx[862:], 2, _gray_style),
        "unauthorized_train": (u_idx[:360], 4, _color_style),
        "unauthorized_test": (u_idx[360:], 2, _color_style),
    }
    splits = {}
    for split, (idx, reps, style) in plan.items():
        xs, ys = [], []
        for _ in range(reps):
            for i in idx:
                xs.append(style(_render_digit(digits.images[i], rng, resolution), rng))
                ys.append(digits.target[i])
        pixels = np.rint(np.stack(xs) * 255).astype(np.uint8)
        splits[split] = ImageSet(pixels, np.array(ys))
    return splits, DIGIT_NAMES


# --------------------------------------------------------------------------- CIFAR10 / STL10

CIFAR10_NAMES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
STL10_NAMES = ("airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck")
# car/automobile are synonyms; frog (CIFAR only) and monkey (STL only) are the residual pair.
STL_TO_CIFAR_ALIASES = {"car": "automobile", "monkey": "frog"}


def align_vocabularies(reference: tuple[str, ...], other: tuple[str, ...],
                       aliases: dict[str, str] | None = None) -> np.ndarray:
    """Return ``m`` with ``m[j]`` the index in ``reference`` of class ``other[j]``."""
    aliases = aliases or {}
    index = {n: i for i, n in enumerate(reference)}
    mapping, missing = [], []
    for name in other:
        key = aliases.get(name, name)
        if key not in index:
            missing.append(name)
        else:
            mapping.append(index[key])
    if missing or len(reference) != len(other) or len(set(mapping)) != len(mapping):
        raise ValueError(f"class-vocabulary mismatch between domains (unmatched: {missing})")
    return np.array(mapping, dtype=np.int64)


def _resize_uint8(images_hwc: np.ndarray, resolution: int) -> np.ndarray:
    from PIL import Image

    out = np.empty((len(images_hwc), 3, resolution, resolution), dtype=np.uint8)
    for i, img in enumerate(images_hwc):
        im = Image.fromarray(img).resize((resolution, resolution), Image.BILINEAR)
        out[i] = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
    return out


def _load_cifar_stl(root, download: bool):
    if root is None:
        raise FileNotFoundError("missing data files: CIFAR10/STL10 need --data-root")
    from torchvision import datasets

    raw = Path(root) / "raw"
    try:
        c_tr = datasets.CIFAR10(raw, train=True, download=download)
        c_te = datasets.CIFAR10(raw, train=False, download=download)
        s_tr = datasets.STL10(raw, split="train", download=download)
        s_te = datasets.STL10(raw, split="test", download=download)
    except RuntimeError as exc:
        raise FileNotFoundError(f"missing data files under {raw}: {exc}") from exc
    return c_tr, c_te, s_tr, s_te


def _cifar_stl_splits(resolution, root, download, cifar_authorized: bool):
    c_tr, c_te, s_tr, s_te = _load_cifar_stl(root, download)
    stl_map = align_vocabularies(CIFAR10_NAMES, STL10_NAMES, STL_TO_CIFAR_ALIASES)
    cifar = {
        "train": ImageSet(_resize_uint8(c_tr.data, resolution), np.asarray(c_tr.targets)),
        "test": ImageSet(_resize_uint8(c_te.data, resolution), np.asarray(c_te.targets)),
    }
    stl = {
        "train": ImageSet(_resize_uint8(s_tr.data.transpose(0, 2, 3, 1), resolution), stl_map[s_tr.labels]),
        "test": ImageSet(_resize_uint8(s_te.data.transpose(0, 2, 3, 1), resolution), stl_map[s_te.labels]),
    }
    a, u = (cifar, stl) if cifar_authorized else (stl, cifar)
    splits = {"authorized_train": a["train"], "authorized_test": a["test"],
              "unauthorized_train": u["train"], "unauthorized_test": u["test"]}
    return splits, CIFAR10_NAMES


@register_pair("cifar10_stl10")
def _build_cifar10_stl10(resolution, root, download):
    return _cifar_stl_splits(resolution, root, download, cifar_authorized=True)


@register_pair("stl10_cifar10")
def _build_stl10_cifar10(resolution, root, download):
    return _cifar_stl_splits(resolution, root, download, cifar_authorized=False)


# --------------------------------------------------------------------------- attacker view

def _exact(fraction: float) -> Fraction:
    return Fraction(repr(float(fraction)))


def take_authorized_subset(pair: DomainPair, fraction: float, seed: int,
                           pool_test: bool = True) -> AttackerDataView:
    """Draw the attacker's labeled authorized subset, stratified by class.

    The subset has exactly ``ceil(fraction * N)`` samples, and each class ``c`` gets
    ``floor(fraction * n_c)`` or ``ceil(fraction * n_c)`` of them. The unlabeled
    side contains every test image the attacker is handed; with ``pool_test`` the
    authorized test images are mixed in, since test inputs cannot be told apart.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    f = _exact(fraction)
    rng = np.random.default_rng(seed)
    labels = pair.authorized_train.labels
    total = math.ceil(f * len(labels))
    per_class = []
    for c in range(pair.class_count):
        members = np.flatnonzero(labels == c)
        quota = f * len(members)
        per_class.append((c, rng.permutation(members), math.floor(quota), quota - math.floor(quota)))
    remaining = total - sum(base for _, _, base, _ in per_class)
    # classes with the largest fractional quota get the leftover samples; ties broken at random
    tiebreak = rng.permutation(len(per_class))
    order = sorted(range(len(per_class)), key=lambda i: (-per_class[i][3], tiebreak[i]))
    extra = set(i for i in order[:remaining] if per_class[i][3] > 0)
    chosen = []
    for i, (_, members, base, _) in enumerate(per_class):
        chosen.append(members[: base + (1 if i in extra else 0)])
    idx = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
    subset = pair.authorized_train.subset(idx)

    unlabeled = pair.unauthorized_test.pixels
    if pool_test:
        unlabeled = np.concatenate([unlabeled, pair.authorized_test.pixels])
        unlabeled = unlabeled[rng.permutation(len(unlabeled))]
    return AttackerDataView(subset, ImageSet(unlabeled), idx, float(fraction), seed)


def make_batches(samples, batch_size: int, seed: int, drop_last: bool = True) -> Iterator:
    """Yield shuffled mini-batches.

    ``samples`` may be an :class:`ImageSet` (yields ``(images, labels)`` or plain
    images when unlabeled) or a tensor whose first axis indexes samples.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(samples)
    if n == 0:
        raise ValueError("cannot batch an empty sample collection")
    order = np.random.default_rng(seed).permutation(n)
    if isinstance(samples, ImageSet):
        x = samples.images()
        y = None if samples.labels is None else samples.targets()
    else:
        x, y = samples, None
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = torch.from_numpy(order[start:start + batch_size])
        yield x[idx] if y is None else (x[idx], y[idx])


def batch_count(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)
