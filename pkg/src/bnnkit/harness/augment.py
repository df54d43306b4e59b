"""Random horizontal flip, padded random crop, and per-channel normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    crop: bool = True
    normalize: bool = True
    crop_padding: int = 4

    @classmethod
    def none(cls) -> "AugmentFlags":
        return cls(False, False, False)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, images: np.ndarray) -> "ChannelStats":
        axes = (0, 2, 3)
        return cls(images.mean(axis=axes), np.maximum(images.std(axis=axes), 1e-12))

    @classmethod
    def identity(cls, channels: int) -> "ChannelStats":
        return cls(np.zeros(channels), np.ones(channels))


def normalize(batch: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (batch - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]


def hflip(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def random_crop(batch: np.ndarray, padding: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad by ``padding`` and cut each image back to its size at ``offsets[i] = (dy, dx)``."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment(batch: np.ndarray, flags: AugmentFlags, rng: np.random.Generator,
            stats: ChannelStats | None = None, train: bool = True) -> np.ndarray:
    """Per-image independent flip (p=0.5) and crop, then normalization.

    Random draws happen in a fixed order (flip mask, then crop offsets) so a
    seeded generator gives a reproducible batch. With ``train=False`` only
    normalization is applied.
    """
    out = np.asarray(batch, dtype=np.float64)
    if train and flags.flip:
        out = hflip(out, rng.random(len(out)) < 0.5)
    if train and flags.crop and flags.crop_padding > 0:
        offsets = rng.integers(0, 2 * flags.crop_padding + 1, size=(len(out), 2))
        out = random_crop(out, flags.crop_padding, offsets)
    if flags.normalize:
        if stats is None:
            raise ValueError("normalization needs dataset channel statistics")
        out = normalize(out, stats)
    return out
