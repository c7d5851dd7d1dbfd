"""CIFAR-100 binary ingestion, class-balanced subsetting, synthetic datasets
and per-batch augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, InvalidArgument
from .numerics import seeded_generator

CIFAR_RECORD_BYTES = 2 + 3 * 32 * 32
CIFAR_SPLITS = {"train": ("train.bin", 50000), "test": ("test.bin", 10000)}
CIFAR_ENV = "CIFAR100_ROOT"


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor  # (n, C, H, W), values in [0, 1]
    labels: torch.Tensor  # (n,), int64
    class_count: int
    split: str = "train"
    coarse_labels: torch.Tensor | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidArgument("images and labels disagree on sample count")
        if self.labels.numel() and not (0 <= int(self.labels.min()) and int(self.labels.max()) < self.class_count):
            raise InvalidArgument(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def select(self, idx: torch.Tensor) -> "Dataset":
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split, coarse)

    def relabel(self, classes: list[int]) -> "Dataset":
        """Keep only ``classes`` and renumber them 0..len(classes)-1."""
        mapping = torch.full((self.class_count,), -1, dtype=torch.long)
        mapping[torch.tensor(classes)] = torch.arange(len(classes))
        keep = (mapping[self.labels] >= 0).nonzero(as_tuple=True)[0]
        sub = self.select(keep)
        return Dataset(sub.images, mapping[sub.labels], len(classes), self.split, sub.coarse_labels)


def cifar_root(path: str | os.PathLike | None = None) -> Path:
    if path is None:
        path = os.environ.get(CIFAR_ENV)
        if not path:
            raise FormatError(f"no CIFAR-100 directory given and ${CIFAR_ENV} is unset")
    root = Path(path)
    if (root / "cifar-100-binary").is_dir():
        root = root / "cifar-100-binary"
    return root


def parse_cifar100(raw: bytes, split: str = "train") -> Dataset:
    if len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"CIFAR-100 data is {len(raw)} bytes, not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    coarse = torch.from_numpy(rec[:, 0].astype(np.int64))
    fine = torch.from_numpy(rec[:, 1].astype(np.int64))
    pixels = torch.from_numpy(rec[:, 2:].copy()).reshape(-1, 3, 32, 32)
    return Dataset(pixels.float() / 255.0, fine, 100, split, coarse)


def load_cifar100(path: str | os.PathLike | None, split: str) -> Dataset:
    """Load ``train.bin`` / ``test.bin`` from the standard binary distribution."""
    if split not in CIFAR_SPLITS:
        raise InvalidArgument(f"split must be one of {sorted(CIFAR_SPLITS)}")
    fname, count = CIFAR_SPLITS[split]
    f = cifar_root(path) / fname
    if not f.is_file():
        raise FormatError(f"missing CIFAR-100 file {f} (expected {count * CIFAR_RECORD_BYTES} bytes)")
    size = f.stat().st_size
    if size != count * CIFAR_RECORD_BYTES:
        raise FormatError(f"{f}: expected {count * CIFAR_RECORD_BYTES} bytes, found {size}")
    return parse_cifar100(f.read_bytes(), split)


def serialize_cifar100(ds: Dataset) -> bytes:
    """Inverse of ``parse_cifar100`` for images that are exact multiples of 1/255."""
    n = len(ds)
    if tuple(ds.images.shape[1:]) != (3, 32, 32):
        raise InvalidArgument(f"CIFAR records hold 3x32x32 images, got {tuple(ds.images.shape[1:])}")
    pix = torch.round(ds.images * 255.0).to(torch.uint8).reshape(n, -1).numpy()
    coarse = ds.coarse_labels if ds.coarse_labels is not None else torch.zeros(n, dtype=torch.long)
    out = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = coarse.numpy().astype(np.uint8)
    out[:, 1] = ds.labels.numpy().astype(np.uint8)
    out[:, 2:] = pix
    return out.tobytes()


def make_synthetic(
    classes: int,
    per_class: int,
    shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
    separation: float = 1.0,
    noise: float = 0.15,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian blobs around random class templates.

    Each class has a smooth random template; samples are
    ``0.5 + separation * template + noise * eps`` clipped to [0, 1].  With
    ``separation=0`` every class has the same distribution.
    """
    if classes < 2:
        raise InvalidArgument("need at least two classes")
    g = seeded_generator(seed)
    c, h, w = shape
    coarse = torch.randn(classes, c, max(h // 4, 1), max(w // 4, 1), generator=g)
    templates = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
    templates = templates / templates.flatten(1).norm(dim=1).view(-1, 1, 1, 1) * (c * h * w) ** 0.5 * 0.2
    # the split seed only perturbs the noise, so train/test share templates
    gn = seeded_generator(seed * 7919 + (0 if split == "train" else 1))
    labels = torch.arange(classes).repeat_interleave(per_class)
    eps = torch.randn(classes * per_class, c, h, w, generator=gn)
    images = (0.5 + separation * templates[labels] + noise * eps).clamp(0.0, 1.0)
    perm = torch.randperm(len(labels), generator=gn)
    return Dataset(images[perm].contiguous(), labels[perm].contiguous(), classes, split)


def subset(ds: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Class-balanced subsample with exactly ``per_class`` items of every class."""
    counts = torch.bincount(ds.labels, minlength=ds.class_count)
    if per_class > int(counts.min()):
        raise InvalidArgument(f"per_class={per_class} exceeds smallest class frequency {int(counts.min())}")
    g = seeded_generator(seed)
    keep = []
    for c in range(ds.class_count):
        idx = (ds.labels == c).nonzero(as_tuple=True)[0]
        keep.append(idx[torch.randperm(idx.numel(), generator=g)[:per_class]])
    idx = torch.sort(torch.cat(keep)).values
    return ds.select(idx)


def augment(x: torch.Tensor, g: torch.Generator, pad: int = 4, flip: bool = True) -> torch.Tensor:
    """Random crop after zero padding plus random horizontal flip; returns a new tensor."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    rows = (dy.view(n, 1) + torch.arange(h).view(1, h))  # (n, h)
    cols = (dx.view(n, 1) + torch.arange(w).view(1, w))  # (n, w)
    out = padded[torch.arange(n).view(n, 1, 1), :, rows.view(n, h, 1), cols.view(n, 1, w)]
    out = out.permute(0, 3, 1, 2)
    if flip:
        mask = torch.rand(n, generator=g) < 0.5
        out = torch.where(mask.view(n, 1, 1, 1), out.flip(3), out)
    return out.contiguous()


def batches(n: int, batch_size: int, g: torch.Generator | None = None):
    order = torch.randperm(n, generator=g) if g is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]
