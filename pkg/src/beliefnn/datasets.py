"""Dataset generation and ingestion: synthetic sine curves, CIFAR-10 binary.

The CIFAR-10 binary layout is the standard one: records of 3073 bytes,
one label byte followed by 3072 channel-major pixel bytes (3 x 32 x 32).
Pixels are standardized per channel with statistics computed on the
training split.  A seeded synthetic stand-in generator emits files in the
same binary format for environments without the real archive.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import stream

__all__ = [
    "sine_function",
    "synth_sine",
    "Dataset",
    "load_cifar10",
    "write_cifar_batch",
    "synth_cifar_like",
    "cifar_channel_stats",
    "save_regression_csv",
    "load_regression_csv",
]

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)


def sine_function(x):
    """The synthetic target f(x) = 0.5x + 0.2 sin(2 pi x) + 0.3 sin(4 pi x)."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x + 0.2 * np.sin(2.0 * np.pi * x) + 0.3 * np.sin(4.0 * np.pi * x)


def synth_sine(n: int, x_range=(0.0, 2.0), noise_sigma: float = 0.05, seed: int = 0):
    """n noisy samples of the sine target, x uniform over x_range."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = x_range
    if not hi > lo:
        raise ValueError(f"invalid x range {x_range}")
    rng = stream(seed, 2)
    x = rng.uniform(lo, hi, size=n)
    y = sine_function(x) + rng.normal(0.0, noise_sigma, size=n)
    return x[:, None], y


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    normalization: tuple | None = None  # (per-channel mean, per-channel std)


class CifarFormatError(ValueError):
    pass


def _read_records(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        full = raw.size // RECORD_BYTES
        raise CifarFormatError(
            f"{path}: truncated file, {raw.size} bytes is not a multiple of {RECORD_BYTES}"
            f" (stops inside record {full} at byte offset {full * RECORD_BYTES})"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise CifarFormatError(f"{path}: corrupt record {int(bad[0])}: label {int(labels[bad[0]])} > 9")
    pixels = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64)
    return pixels, labels


def cifar_channel_stats(pixels):
    """Per-channel mean/std over a pixel tensor (N, 3, 32, 32), raw byte scale."""
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean, std


def load_cifar10(path, split="train", limit=None, normalization=None) -> Dataset:
    """Load CIFAR-10 binary batches from a directory or a single .bin file.

    Train split reads data_batch_1..5; test reads test_batch.  Pixels are
    standardized per channel with train-split statistics unless an explicit
    (mean, std) pair is given.
    """
    if os.path.isdir(path):
        if split == "train":
            files = [os.path.join(path, f"data_batch_{i}.bin") for i in range(1, 6)]
        elif split == "test":
            files = [os.path.join(path, "test_batch.bin")]
        else:
            raise ValueError(f"unknown split {split!r}")
        files = [f for f in files if os.path.exists(f)]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} batches under {path}")
    else:
        files = [path]
    parts = [_read_records(f) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    if normalization is None:
        normalization = cifar_channel_stats(pixels)
    mean, std = normalization
    X = (pixels - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(X, labels, normalization=(mean, std))


def write_cifar_batch(path, pixels_u8, labels):
    """Write records in the standard binary layout; inverse of _read_records."""
    pixels_u8 = np.asarray(pixels_u8, dtype=np.uint8).reshape(len(labels), -1)
    if pixels_u8.shape[1] != RECORD_BYTES - 1:
        raise ValueError(f"expected {RECORD_BYTES - 1} pixel bytes per record, got {pixels_u8.shape[1]}")
    rec = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = pixels_u8
    rec.tofile(path)


def synth_cifar_like(out_dir, n_train=5000, n_test=1000, n_classes=10, seed=0):
    """Seeded CIFAR-format stand-in: smooth class templates plus pixel noise.

    Each class gets a random low-frequency template; examples are the
    template with additive noise, quantized to bytes.  Written as
    data_batch_1.bin and test_batch.bin under out_dir.
    """
    rng = stream(seed, 3)
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    templates = np.empty((n_classes, *IMAGE_SHAPE))
    for c in range(n_classes):
        for ch in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            px, py = rng.uniform(0, 2 * np.pi, 2)
            amp = rng.uniform(30, 60)
            base = rng.uniform(80, 176)
            templates[c, ch] = base + amp * np.sin(2 * np.pi * fx * xx + px) * np.cos(2 * np.pi * fy * yy + py)

    def emit(path, n, substream):
        r = stream(seed, 3, substream)
        labels = r.integers(0, n_classes, size=n)
        pix = templates[labels] + r.normal(0.0, 24.0, size=(n, *IMAGE_SHAPE))
        write_cifar_batch(path, np.clip(pix, 0, 255).astype(np.uint8), labels)

    os.makedirs(out_dir, exist_ok=True)
    emit(os.path.join(out_dir, "data_batch_1.bin"), n_train, 1)
    emit(os.path.join(out_dir, "test_batch.bin"), n_test, 2)
    return out_dir


def save_regression_csv(path, X, y):
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    cols = [f"x{i}" for i in range(X.shape[1])] + ["y"]
    data = np.column_stack([X, np.asarray(y, dtype=float)])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(repr(v) for v in row) + "\n")


def load_regression_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    data = np.asarray(rows)
    if header[-1] != "y":
        raise ValueError(f"{path}: expected final column 'y', got {header[-1]!r}")
    return data[:, :-1], data[:, -1]
