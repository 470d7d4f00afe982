"""Dataset loading, seeded splits, right-angle augmentation and batching.

On-disk layout::

    <root>/images/<id>.png
    <root>/masks/<id>.png
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from cmunet.errors import DataError

MASK_THRESHOLD = 127


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # C x S x S, float32 in [0, 1]
    mask: np.ndarray  # 1 x S x S, float32 in {0, 1}


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train: tuple[str, ...]
    val: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "val": list(self.val)}


@dataclass(frozen=True)
class Batch:
    ids: tuple[str, ...]
    images: np.ndarray  # N x C x S x S
    masks: np.ndarray  # N x 1 x S x S


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def image_to_array(img: Image.Image, size: int | None, in_channels: int) -> np.ndarray:
    """PIL image -> C x S x S float32 in [0, 1] (bilinear resize)."""
    img = img.convert("L" if in_channels == 1 else "RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], in_channels, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def mask_to_array(img: Image.Image, size: int | None) -> np.ndarray:
    """PIL mask -> 1 x S x S float32 in {0, 1} (threshold, then nearest resize)."""
    binary = (np.asarray(img.convert("L")) > MASK_THRESHOLD).astype(np.uint8) * 255
    out = Image.fromarray(binary)
    if size is not None and out.size != (size, size):
        out = out.resize((size, size), Image.NEAREST)
    return (np.asarray(out)[None] > MASK_THRESHOLD).astype(np.float32)


def read_image(path: str | Path, size: int | None, in_channels: int = 3) -> np.ndarray:
    return image_to_array(_open(Path(path)), size, in_channels)


def load_dataset(root: str | Path, size: int = 256, in_channels: int = 3) -> list[Sample]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    samples = []
    for path in sorted(img_dir.glob("*.png"), key=lambda p: p.stem):
        mask_path = mask_dir / path.name
        if not mask_path.exists():
            raise DataError(f"no mask for image id {path.stem!r} (expected {mask_path})")
        samples.append(Sample(
            id=path.stem,
            image=image_to_array(_open(path), size, in_channels),
            mask=mask_to_array(_open(mask_path), size),
        ))
    if not samples:
        raise DataError(f"no PNG images under {img_dir}")
    return samples


def split(samples: Sequence[Sample] | Sequence[str], seed: int, train_fraction: float = 0.8) -> SplitPlan:
    """Seeded shuffle into train/val. The train share is rounded half-up and
    clamped so both sides are non-empty."""
    ids = [s.id if isinstance(s, Sample) else str(s) for s in samples]
    if len(ids) < 2:
        raise DataError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(math.floor(train_fraction * len(ids) + 0.5), 1), len(ids) - 1)
    shuffled = [ids[i] for i in order]
    return SplitPlan(seed=seed, train=tuple(shuffled[:n_train]), val=tuple(shuffled[n_train:]))


def transform(sample: Sample, quarter_turns: int, hflip: bool, vflip: bool) -> Sample:
    """Rotate by quarter_turns * 90 degrees then flip; same transform on image and mask."""

    def apply(a: np.ndarray) -> np.ndarray:
        a = np.rot90(a, k=quarter_turns, axes=(1, 2))
        if hflip:
            a = a[:, :, ::-1]
        if vflip:
            a = a[:, ::-1, :]
        return np.ascontiguousarray(a)

    return Sample(id=sample.id, image=apply(sample.image), mask=apply(sample.mask))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    k = int(rng.integers(4))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return transform(sample, k, hflip, vflip)


def batches(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int = 0,
            shuffle: bool = True, drop_last: bool = False,
            rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Stacked mini-batches in an order fixed by (seed, epoch).

    If ``rng`` is given every sample is passed through :func:`augment`.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise DataError("cannot batch an empty sample list")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if drop_last and len(chunk) < batch_size:
            return
        if rng is not None:
            chunk = [augment(s, rng) for s in chunk]
        yield Batch(
            ids=tuple(s.id for s in chunk),
            images=np.stack([s.image for s in chunk]),
            masks=np.stack([s.mask for s in chunk]),
        )


# --------------------------------------------------------------------------
# synthetic data

def _synthetic_pair(rng: np.random.Generator, size: int, circles: bool = False) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    ry, rx = rng.uniform(size / 8, size / 4, size=2)
    if circles:
        rx = ry
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    background = rng.uniform(0.15, 0.35)
    foreground = rng.uniform(0.6, 0.85)
    img = np.where(inside, foreground, background) + rng.normal(0.0, 0.06, size=(size, size))
    img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img8, inside.astype(np.uint8) * 255


def synthetic_dataset(n: int, size: int, seed: int, in_channels: int = 3, circles: bool = False) -> list[Sample]:
    """In-memory equivalent of :func:`write_synthetic` followed by :func:`load_dataset`."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img8, mask8 = _synthetic_pair(rng, size, circles)
        samples.append(Sample(
            id=f"synth_{i:04d}",
            image=image_to_array(Image.fromarray(img8), size, in_channels),
            mask=mask_to_array(Image.fromarray(mask8), size),
        ))
    return samples


def write_synthetic(root: str | Path, n: int, size: int, seed: int, circles: bool = False) -> list[str]:
    """Write ``n`` noisy single-ellipse (or circle) images with exact masks under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        img8, mask8 = _synthetic_pair(rng, size, circles)
        name = f"synth_{i:04d}"
        Image.fromarray(img8).save(root / "images" / f"{name}.png")
        Image.fromarray(mask8).save(root / "masks" / f"{name}.png")
        ids.append(name)
    return ids
