"""Synthetic two-class image data and the preparation pipeline.

Benign images (label 0) are smooth low-frequency Gaussian textures. Malware
images (label 1) carry the same texture plus a bright block with a
high-frequency checkerboard, placed at a random position in the lower half of
the image. The block's brightness gives a weak linear cue; its texture is what
a small CNN picks up.

Fractional counts are rounded half-up everywhere (``floor(x + 0.5)``).
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError

__all__ = [
    "Dataset",
    "SplitSpec",
    "round_half_up",
    "generate",
    "downsample_majority",
    "stratified_split",
    "normalize",
    "shard",
    "save_dataset",
    "load_dataset",
    "DEFAULT_SIGNAL",
    "DEFAULT_BLOCK",
    "DEFAULT_BIAS",
]

# calibrated so the reference CNN clears 95% validation accuracy while a
# linear probe on the pixels stays around 0.8
DEFAULT_SIGNAL = 0.6
DEFAULT_BLOCK = 12
DEFAULT_BIAS = 2.0


def round_half_up(x) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float64
    labels: np.ndarray  # (N,) int64, 0 benign / 1 malware
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DomainError("images must be (N, C, H, W) with one label per image")
        if not np.all(np.isfinite(self.images)):
            raise DomainError("images must be finite")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=2)

    @property
    def class_ratio(self) -> float:
        """Fraction of label-1 samples."""
        return float(self.class_counts[1] / max(len(self), 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.seed)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.7, 0.15, 0.15)
    stratified: bool = True

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        object.__setattr__(self, "fractions", f)
        if any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
            raise DomainError("split fractions must be positive and sum to 1")


def _texture(rng, n, h, w, sigma=3.0):
    noise = rng.standard_normal((n, h, w))
    smooth = gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    smooth /= smooth.std(axis=(1, 2), keepdims=True)
    return smooth


def _blocks(rng, n, h, w, size, cell, bias):
    out = np.zeros((n, h, w))
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        phase = rng.integers(0, 2)
        checker = ((yy // cell + xx // cell + phase) % 2) * 2.0 - 1.0
        top = rng.integers(h // 2, h - size + 1)
        left = rng.integers(0, w - size + 1)
        out[i, top:top + size, left:left + size] = bias + checker
    return out


def generate(n: int, h: int = 32, w: int = 32, minority_fraction: float = 0.1444,
             seed: int = 0, signal: float = DEFAULT_SIGNAL, block: int = DEFAULT_BLOCK,
             cell: int = 1, bias: float = DEFAULT_BIAS) -> Dataset:
    """Imbalanced synthetic dataset with ``round_half_up(n * minority_fraction)`` positives.

    ``signal`` scales the malware block; ``block`` is its side length,
    ``cell`` the checkerboard cell size in pixels and ``bias`` the block's
    mean brightness relative to the checkerboard amplitude.
    """
    if n < 10:
        raise DomainError("need n >= 10")
    if not 0.0 < minority_fraction <= 0.5:
        raise DomainError("minority_fraction must lie in (0, 0.5]")
    if block > min(h // 2, w):
        raise DomainError("block does not fit in the lower half of the image")
    rng = np.random.default_rng(seed)
    n_pos = round_half_up(n * minority_fraction)
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(n)]
    images = _texture(rng, n, h, w)
    pos = np.flatnonzero(labels == 1)
    images[pos] += signal * _blocks(rng, pos.size, h, w, block, cell, bias)
    return Dataset(images[:, None], labels, seed)


def downsample_majority(ds: Dataset, target_ratio: float = 0.5, seed: int = 0) -> Dataset:
    """Drop uniformly chosen majority samples until minority/total >= ``target_ratio``.

    Kept samples stay in their original order.
    """
    counts = ds.class_counts
    if np.any(counts == 0):
        raise DomainError("downsampling needs both classes present")
    minority = int(np.argmin(counts))
    majority = 1 - minority
    n_min = int(counts[minority])
    if not 0.0 < target_ratio <= 0.5:
        raise DomainError(f"target ratio {target_ratio} unreachable by dropping majority samples")
    if n_min / len(ds) >= target_ratio:
        return ds.subset(np.arange(len(ds)))
    keep_major = int(math.floor(n_min * (1.0 - target_ratio) / target_ratio + 1e-9))
    if keep_major < 1:
        raise DomainError(f"target ratio {target_ratio} leaves no majority samples")
    rng = np.random.default_rng(seed)
    major_idx = np.flatnonzero(ds.labels == majority)
    chosen = rng.choice(major_idx, size=keep_major, replace=False)
    keep = np.sort(np.concatenate([np.flatnonzero(ds.labels == minority), chosen]))
    return ds.subset(keep)


def _split_sizes(n: int, fractions: Sequence[float]) -> list:
    sizes = [round_half_up(n * f) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise DomainError("split fractions overflow the sample count")
    return sizes


def _apportion(class_sizes, split_sizes, fractions) -> np.ndarray:
    """Integer class-by-split table with the given margins, close to proportional."""
    class_sizes = np.asarray(class_sizes)
    ideal = np.outer(class_sizes, fractions)
    table = np.floor(ideal).astype(np.int64)
    row_need = class_sizes - table.sum(axis=1)
    col_need = np.asarray(split_sizes) - table.sum(axis=0)
    frac = ideal - table
    order = sorted(np.ndindex(*table.shape), key=lambda ij: (-frac[ij], ij))
    for strict in (True, False):
        for i, j in order:
            if row_need[i] > 0 and col_need[j] > 0 and (not strict or frac[i, j] > 0):
                if strict and table[i, j] > math.floor(ideal[i, j]):
                    continue
                table[i, j] += 1
                row_need[i] -= 1
                col_need[j] -= 1
    if np.any(row_need) or np.any(col_need):
        raise DomainError("could not apportion classes to splits")
    return table


def stratified_split(ds: Dataset, spec: SplitSpec = SplitSpec(), seed: int = 0) -> tuple:
    """Exact partition into splits with per-class proportions preserved to one sample."""
    counts = ds.class_counts
    if spec.stratified and np.any(counts < len(spec.fractions)):
        raise DomainError(f"each class needs >= {len(spec.fractions)} samples, got {list(counts)}")
    rng = np.random.default_rng(seed)
    sizes = _split_sizes(len(ds), spec.fractions)
    if not spec.stratified:
        perm = rng.permutation(len(ds))
        bounds = np.cumsum([0] + sizes)
        return tuple(ds.subset(np.sort(perm[a:b])) for a, b in zip(bounds[:-1], bounds[1:]))
    table = _apportion(counts, sizes, spec.fractions)
    parts = [[] for _ in sizes]
    for c in range(len(counts)):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        bounds = np.cumsum(np.concatenate([[0], table[c]]))
        for j in range(len(sizes)):
            parts[j].append(idx[bounds[j]:bounds[j + 1]])
    return tuple(ds.subset(np.sort(np.concatenate(p))) for p in parts)


def normalize(train: Dataset, *others: Dataset, std_floor: float = 1e-6):
    """Per-pixel standardisation with statistics from ``train`` only.

    Returns ``(datasets, (mean, std))`` where ``datasets`` lists the
    normalised train split followed by ``others``.
    """
    if len(train) == 0:
        raise DomainError("train split is empty")
    mean = train.images.mean(axis=0)
    std = np.maximum(train.images.std(axis=0), std_floor)
    out = [Dataset((d.images - mean) / std, d.labels.copy(), d.seed) for d in (train,) + others]
    return out, (mean, std)


def shard(ds: Dataset, n_clients: int, seed: int = 0, mode: str = "stratified",
          beta: float = 0.5) -> list:
    """Split ``ds`` across clients.

    ``mode="stratified"`` deals each class out evenly (shard sizes differ by at
    most one per class). ``mode="dirichlet"`` draws each class's client
    proportions from ``Dirichlet(beta)``, giving label skew for small ``beta``.
    """
    counts = ds.class_counts
    if n_clients < 1 or np.any(counts[counts > 0] < n_clients):
        raise DomainError(f"{n_clients} clients exceed the per-class counts {list(counts)}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(n_clients)]
    start = 0
    for c in range(len(counts)):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if mode == "stratified":
            # rotate the start so the extra samples do not pile on client 0
            order = [(start + k) % n_clients for k in range(n_clients)]
            for k, chunk in zip(order, np.array_split(idx, n_clients)):
                parts[k].append(chunk)
            start = (start + len(idx) % n_clients) % n_clients
        elif mode == "dirichlet":
            if not beta > 0:
                raise DomainError("beta must be > 0")
            prop = rng.dirichlet(np.full(n_clients, beta))
            ideal = prop * len(idx)
            take = np.floor(ideal).astype(np.int64)
            rest = len(idx) - take.sum()
            take[np.argsort(-(ideal - take), kind="stable")[:rest]] += 1
            bounds = np.cumsum(np.concatenate([[0], take]))
            for k in range(n_clients):
                parts[k].append(idx[bounds[k]:bounds[k + 1]])
        else:
            raise DomainError(f"unknown shard mode {mode!r}")
    return [ds.subset(np.sort(np.concatenate(p))) for p in parts]


_MAGIC = b"SPLD"


def save_dataset(ds: Dataset, prefix) -> tuple:
    """Write ``<prefix>.bin`` (little-endian float64 images) and ``<prefix>_labels.csv``."""
    prefix = Path(prefix)
    bin_path = prefix.with_name(prefix.name + ".bin")
    csv_path = prefix.with_name(prefix.name + "_labels.csv")
    shape = ds.images.shape
    header = _MAGIC + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    bin_path.write_bytes(header + np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label"])
    writer.writerows(enumerate(ds.labels.tolist()))
    csv_path.write_text(buf.getvalue(), newline="")
    return bin_path, csv_path


def load_dataset(prefix, seed: int = 0) -> Dataset:
    prefix = Path(prefix)
    blob = prefix.with_name(prefix.name + ".bin").read_bytes()
    if blob[:4] != _MAGIC:
        raise DomainError("not a dataset file")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    images = np.frombuffer(blob, dtype="<f8", offset=8 + 4 * ndim).reshape(shape)
    with open(prefix.with_name(prefix.name + "_labels.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return Dataset(images.astype(np.float64), labels, seed)
