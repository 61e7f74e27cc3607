"""Procedural desk-scale dense-prediction tasks.

Three generators, all deterministic per seed with disjoint train/val streams:

* regress: multi-frequency color textures; target is a smooth positive
  function of the blurred luminance, so ratio-based metrics are defined.
* classify: scenes of colored rectangles and disks over background; targets
  are exact per-pixel class maps.
* superres: textures as high-resolution targets with bicubic-downsampled
  inputs.

Augmentation (flips, small rotations, rectangular drops) runs only on
training batches and keeps input/target pairs aligned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .utils import derive_seed

TASK_KINDS = ("regress", "classify", "superres")


@dataclass(frozen=True)
class ToyTaskConfig:
    kind: str = "regress"
    resolution: int = 32  # network input height/width
    num_classes: int = 6
    sr_factor: int = 2
    train_size: int = 200
    val_size: int = 50
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.kind == "classify" and self.num_classes < 2:
            raise ValueError("classification needs >= 2 classes")
        if self.kind == "superres" and self.sr_factor not in (2, 4):
            raise ValueError("sr_factor must be 2 or 4")
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("split sizes must be >= 1")


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, c, h, w) float32
    targets: np.ndarray  # task dependent

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _texture(rng: np.random.Generator, channels: int, res: int) -> np.ndarray:
    """Sum of random plane waves plus a soft blob, scaled into [0, 1]."""
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64) / res
    img = np.zeros((channels, res, res))
    for c in range(channels):
        acc = np.zeros((res, res))
        for _ in range(4):
            fx, fy = rng.uniform(-4, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.1, 0.3)
        acc += rng.uniform(0.5, 1.5) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        lo, hi = acc.min(), acc.max()
        img[c] = (acc - lo) / (hi - lo + 1e-9)
    return img.astype(np.float32)


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication, same resolution."""
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out / 9.0


def _regress_target(x: np.ndarray) -> np.ndarray:
    """Smooth positive operator of the input: squared double-blurred luminance."""
    gray = x.mean(axis=0).astype(np.float64)
    smooth = _box_blur3(_box_blur3(gray))
    target = 0.1 + 0.9 * smooth * smooth
    return target[None].astype(np.float32)


_PALETTE = np.array(
    [
        [0.1, 0.1, 0.1],
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.1],
        [0.8, 0.2, 0.9],
        [0.1, 0.9, 0.9],
        [0.9, 0.5, 0.1],
    ],
    dtype=np.float32,
)


def _classify_sample(rng, channels, res, num_classes):
    labels = np.zeros((res, res), dtype=np.int64)
    img = np.zeros((channels, res, res), dtype=np.float32)
    for c in range(channels):
        img[c] = _PALETTE[0][c % 3]
    ys, xs = np.mgrid[0:res, 0:res]
    for _ in range(rng.integers(3, 9)):
        cls = int(rng.integers(1, num_classes))
        color = _PALETTE[cls % len(_PALETTE)]
        if rng.random() < 0.5:
            h = int(rng.integers(res // 8, res // 2))
            w = int(rng.integers(res // 8, res // 2))
            top = int(rng.integers(0, res - h))
            left = int(rng.integers(0, res - w))
            region = np.zeros((res, res), dtype=bool)
            region[top : top + h, left : left + w] = True
        else:
            cy, cx = rng.integers(0, res, size=2)
            radius = int(rng.integers(res // 8, res // 3))
            region = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius * radius
        labels[region] = cls
        for c in range(channels):
            img[c][region] = color[c % 3]
    img += rng.normal(0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), labels


def _bicubic_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Per-channel bicubic resize to 1/factor of the spatial size."""
    channels, h, w = img.shape
    out = np.zeros((channels, h // factor, w // factor), dtype=np.float32)
    for c in range(channels):
        pil = Image.fromarray(img[c].astype(np.float32), mode="F")
        small = pil.resize((w // factor, h // factor), resample=Image.BICUBIC)
        out[c] = np.asarray(small, dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def _gen_split(cfg: ToyTaskConfig, split: str, size: int) -> Dataset:
    rng = np.random.default_rng(derive_seed(cfg.seed, "toytask", cfg.kind, split))
    inputs, targets = [], []
    for _ in range(size):
        if cfg.kind == "regress":
            x = _texture(rng, cfg.channels, cfg.resolution)
            inputs.append(x)
            targets.append(_regress_target(x))
        elif cfg.kind == "classify":
            x, labels = _classify_sample(rng, cfg.channels, cfg.resolution, cfg.num_classes)
            inputs.append(x)
            targets.append(labels)
        else:
            hr = _texture(rng, cfg.channels, cfg.resolution * cfg.sr_factor)
            inputs.append(_bicubic_downsample(hr, cfg.sr_factor))
            targets.append(hr)
    return Dataset(np.stack(inputs), np.stack(targets))


def gen_task(cfg: ToyTaskConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, val) datasets; the val stream is seeded apart."""
    return _gen_split(cfg, "train", cfg.train_size), _gen_split(cfg, "val", cfg.val_size)


# --- training-time augmentation ----------------------------------------------


def _rotate_channels(arr: np.ndarray, angle: float, nearest: bool) -> np.ndarray:
    resample = Image.NEAREST if nearest else Image.BILINEAR
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        pil = Image.fromarray(arr[c].astype(np.float32), mode="F")
        out[c] = np.asarray(pil.rotate(angle, resample=resample), dtype=arr.dtype)
    return out


def augment_batch(inputs: np.ndarray, targets: np.ndarray, kind: str,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded flips/rotations/drops on aligned (input, target) pairs."""
    x = inputs.copy()
    t = targets.copy()
    for i in range(x.shape[0]):
        if rng.random() < 0.5:  # horizontal flip
            x[i] = x[i, :, :, ::-1]
            t[i] = t[i, ..., ::-1]
        if kind != "superres" and rng.random() < 0.3:
            angle = float(rng.uniform(-5.0, 5.0))
            x[i] = _rotate_channels(x[i], angle, nearest=False)
            if kind == "classify":
                rot = _rotate_channels(t[i][None].astype(np.float32), angle, nearest=True)
                t[i] = rot[0].astype(t.dtype)
            else:
                t[i] = _rotate_channels(t[i], angle, nearest=False)
        if kind != "superres" and rng.random() < 0.3:  # rectangular drop, input only
            h, w = x.shape[2], x.shape[3]
            dh = int(rng.integers(h // 8, h // 4 + 1))
            dw = int(rng.integers(w // 8, w // 4 + 1))
            top = int(rng.integers(0, h - dh))
            left = int(rng.integers(0, w - dw))
            x[i, :, top : top + dh, left : left + dw] = 0.0
    return x, t
