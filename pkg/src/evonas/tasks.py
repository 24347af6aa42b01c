"""Image-degradation tasks, datasets, and the PSNR metric."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage


class TaskKind(str, Enum):
    SUPERRES = "Superres2x"
    DENOISE_UNIFORM = "DenoiseUniform"
    DENOISE_GAUSSIAN = "DenoiseGaussian"
    DEBLUR = "Deblur"
    COMPRESSIVE = "CompressiveSensing"
    CHECKERBOARD = "Checkerboard"
    IDENTITY = "Identity"          # target == input; a sanity task, not a benchmark


BENCHMARK_TASKS = tuple(k for k in TaskKind if k is not TaskKind.IDENTITY)


@dataclass(frozen=True)
class RestorationTask:
    kind: TaskKind
    uniform_bound: float = 0.5
    sigma: float = 0.2
    blur_sigma: float = 2.0
    blur_radius: int = 3
    keep_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))

    @property
    def input_channels(self) -> int:
        return 6 if self.kind is TaskKind.COMPRESSIVE else 3


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-(ax * ax) / (2 * sigma * sigma))
    k = np.outer(k1, k1)
    return k / k.sum()


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def degrade_batch(clean: np.ndarray, task: RestorationTask, rng) -> np.ndarray:
    """Corrupt a (B, 3, H, W) batch of images in [0, 1]."""
    rng = _rng(rng)
    x = np.asarray(clean)
    b, c, h, w = x.shape
    kind = task.kind
    if kind is TaskKind.IDENTITY:
        return x.copy()
    if kind is TaskKind.SUPERRES:
        low = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return np.repeat(np.repeat(low, 2, axis=2), 2, axis=3).astype(x.dtype)
    if kind is TaskKind.DENOISE_UNIFORM:
        noise = rng.uniform(-task.uniform_bound, task.uniform_bound, size=x.shape)
        return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)
    if kind is TaskKind.DENOISE_GAUSSIAN:
        noise = rng.normal(0.0, task.sigma, size=x.shape) if task.sigma > 0 else 0.0
        return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)
    if kind is TaskKind.DEBLUR:
        k = gaussian_kernel(task.blur_sigma, task.blur_radius)
        out = ndimage.correlate(x.astype(np.float64), k[None, None], mode="reflect")
        return np.clip(out, 0.0, 1.0).astype(x.dtype)
    if kind is TaskKind.COMPRESSIVE:
        keep = int(round(task.keep_fraction * h * w))
        mask = np.zeros((b, h * w), dtype=x.dtype)
        for i in range(b):
            mask[i, rng.permutation(h * w)[:keep]] = 1
        mask = mask.reshape(b, 1, h, w)
        return np.concatenate([x * mask, np.repeat(mask, 3, axis=1)], axis=1)
    if kind is TaskKind.CHECKERBOARD:
        yy, xx = np.mgrid[0:h, 0:w]
        return (x * ((yy + xx) % 2 == 0)).astype(x.dtype)
    raise ValueError(f"unknown task {kind}")


def degrade(clean: np.ndarray, task: RestorationTask, rng) -> np.ndarray:
    """Corrupt one (3, H, W) image; deterministic given the rng seed."""
    return degrade_batch(np.asarray(clean)[None], task, rng)[0]


def psnr(mse: float) -> float:
    """10 * log10(1 / mse); ``inf`` for an exact reconstruction."""
    mse = float(mse)
    if mse < 0 or math.isnan(mse):
        raise ValueError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_psnr(value: float) -> str:
    return "exact" if value == math.inf else f"{value:.4f}"


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def input_psnr(inputs: np.ndarray, targets: np.ndarray) -> float:
    """PSNR of the corrupted image itself (first three channels) against the clean one."""
    return psnr(mse(inputs[:, :3], targets))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SPLIT_RATIOS = (0.6, 0.2, 0.2)
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray                      # (N, 3, H, W), float32 in [0, 1]
    sources: tuple[str, ...] = ()
    ratios: tuple[float, float, float] = SPLIT_RATIOS
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def bounds(self) -> tuple[int, int]:
        n = len(self.images)
        n_train = int(round(self.ratios[0] * n))
        n_val = int(round(self.ratios[1] * n))
        return n_train, min(n, n_train + n_val)

    def split(self, name: str) -> np.ndarray:
        a, b = self.bounds()
        if name == "train":
            return self.images[:a]
        if name == "validation":
            return self.images[a:b]
        if name == "test":
            return self.images[b:]
        raise KeyError(name)


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.normal(size=(3, size, size)), sigma=(0, size / 8, size / 8),
                                mode="wrap")
    return n / (n.std() + 1e-12)


def synth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One procedural RGB image: colour gradient, a few shapes, band-limited noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0, 1, size=(2, 3, 1, 1))
    a = rng.uniform(0, 2 * np.pi)
    t = np.cos(a) * xx + np.sin(a) * yy
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    img = c0 * (1 - t) + c1 * t
    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.1, 0.45, size=2)
        if rng.random() < 0.5:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        colour = rng.uniform(0, 1, size=(3, 1, 1))
        alpha = rng.uniform(0.5, 1.0) * m
        img = img * (1 - alpha) + colour * alpha
    img = img + rng.uniform(0.0, 0.08) * _smooth_noise(rng, size)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, count: int, size: int) -> ImageDataset:
    """Deterministic procedural stand-in for a natural-image corpus."""
    if size not in (8, 16, 32, 64):
        raise ValueError(f"size must be one of 8, 16, 32, 64, got {size}")
    rng = np.random.default_rng(seed)
    images = np.stack([synth_image(rng, size) for _ in range(count)]).astype(np.float32)
    sources = tuple(f"synthetic:{seed}:{i}" for i in range(count))
    return ImageDataset(images, sources, meta={"kind": "synthetic", "seed": seed, "size": size})


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def read_png(path, size: int | None = None) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                w, h = im.size
                s = min(w, h)
                left, top = (w - s) // 2, (h - s) // 2
                im = im.crop((left, top, left + s, top + s))
                if s != size:
                    im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as e:  # PIL raises a zoo of exception types
        raise OSError(f"{path}: cannot read image ({e})") from e
    return arr.transpose(2, 0, 1).copy()


def write_png(img: np.ndarray, path) -> None:
    """Write a (C, H, W) image in [0, 1] as 8-bit PNG (1 or 3 channels)."""
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    arr = np.round(arr * 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_folder(path, size: int | None = None) -> ImageDataset:
    """All ``*.png`` files in ``path`` in lexicographic order."""
    folder = Path(path)
    if not folder.is_dir():
        raise FileNotFoundError(f"{folder}: not a directory")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"{folder}: no PNG files found")
    images = [read_png(f, size) for f in files]
    shape = images[0].shape
    for f, im in zip(files, images):
        if im.shape != shape:
            raise ValueError(f"{f}: shape {im.shape} differs from {shape}; pass a size to resize")
    return ImageDataset(np.stack(images), tuple(os.fspath(f) for f in files),
                        meta={"kind": "folder", "path": os.fspath(folder)})


def write_manifest(ds: ImageDataset, path) -> None:
    a, b = ds.bounds()
    doc = {
        "count": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "ratios": list(ds.ratios),
        "splits": {"train": [0, a], "validation": [a, b], "test": [b, len(ds)]},
        "sources": list(ds.sources),
        "meta": ds.meta,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------

def sample_batch(images: np.ndarray, task: RestorationTask, batch_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(len(images), size=batch_size)
    clean = images[idx]
    return degrade_batch(clean, task, rng), clean


def fixed_batches(images: np.ndarray, task: RestorationTask, n_batches: int, batch_size: int,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n_batches`` minibatches drawn with a fixed seed, stacked along axis 0."""
    rng = np.random.default_rng(seed)
    xs, ys = zip(*(sample_batch(images, task, batch_size, rng) for _ in range(n_batches)))
    return np.concatenate(xs), np.concatenate(ys)
