"""Synthetic degradations, PSNR, and the procedural test phantom."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSpec",
    "add_gaussian",
    "add_poisson",
    "grid_score",
    "lag1_autocorrelation",
    "phantom",
    "psnr",
    "sample_level",
]


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def add_gaussian(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add white Gaussian noise; ``sigma`` is on the 0-255 scale.

    The result is not clamped.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x)
    n = _rng(seed).standard_normal(x.shape) * (sigma / 255.0)
    return (x + n).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def add_poisson(x: np.ndarray, lam: float, seed) -> np.ndarray:
    """Photon-count noise ``Poisson(lam * x) / lam`` with peak parameter ``lam``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("Poisson noise needs non-negative intensities")
    counts = _rng(seed).poisson(lam * x.astype(np.float64))
    return (counts / lam).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def sample_level(lo: float, hi: float, seed) -> float:
    """Uniform draw from ``[lo, hi)``, deterministic per seed."""
    if not lo < hi:
        raise ValueError(f"invalid level range [{lo}, {hi}]")
    return float(_rng(seed).uniform(lo, hi))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / err))


@dataclass(frozen=True)
class NoiseSpec:
    """A noise kind plus a fixed level or a ``(lo, hi)`` range sampled per image.

    ``level`` is sigma (0-255 scale) for Gaussian noise and the peak count
    lambda for Poisson noise.
    """

    kind: str
    level: float | tuple[float, float]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        lo, hi = self.bounds
        if not (lo > 0 and hi >= lo):
            raise ValueError(f"noise level must be positive, got {self.level}")

    @property
    def bounds(self) -> tuple[float, float]:
        if isinstance(self.level, tuple):
            return float(self.level[0]), float(self.level[1])
        return float(self.level), float(self.level)

    def draw_level(self, seed: int | None = None) -> float:
        lo, hi = self.bounds
        if lo == hi:
            return lo
        level_seq, _ = np.random.SeedSequence(self.seed if seed is None else seed).spawn(2)
        return sample_level(lo, hi, level_seq)

    def apply(self, x: np.ndarray, seed: int | None = None) -> tuple[np.ndarray, float]:
        """Degrade ``x``; returns the noisy image and the level used."""
        level = self.draw_level(seed)
        _, noise_seq = np.random.SeedSequence(self.seed if seed is None else seed).spawn(2)
        if self.kind == "gaussian":
            return add_gaussian(x, level, noise_seq), level
        return add_poisson(x, level, noise_seq), level


def lag1_autocorrelation(field: np.ndarray) -> float:
    """Mean of the horizontal and vertical lag-1 correlation coefficients."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=2)
    f = f - f.mean()
    var = np.mean(f * f)
    if var == 0:
        return 0.0
    horiz = np.mean(f[:, 1:] * f[:, :-1]) / var
    vert = np.mean(f[1:, :] * f[:-1, :]) / var
    return float(0.5 * (horiz + vert))


def grid_score(img: np.ndarray, j: int) -> float:
    """Spectral energy on the lattice of frequencies that are multiples of 1/j.

    A j-periodic grid pattern concentrates its energy on the bins
    ``(k1 * H / j, k2 * W / j)``; the DC bin is excluded.  The score is that
    energy normalised by the total non-DC energy.
    """
    f = np.asarray(img, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=2)
    h, w = f.shape
    h, w = h - h % j, w - w % j
    f = f[:h, :w]
    power = np.abs(np.fft.fft2(f - f.mean())) ** 2
    rows = np.arange(0, h, h // j)
    cols = np.arange(0, w, w // j)
    lattice = power[np.ix_(rows, cols)].sum() - power[0, 0]
    total = power.sum() - power[0, 0]
    return float(lattice / total) if total > 0 else 0.0


def phantom(size: int = 256, seed: int = 0) -> np.ndarray:
    """Procedural grayscale test image in [0, 1], shape ``size x size x 1``.

    A smooth diagonal background ramp and 14 soft-edged disks, about half of
    them filled with an internal linear gradient.  Edges are anti-aliased
    over about one pixel.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = 0.15 + 0.2 * (0.6 * xx + 0.4 * yy)
    px = 1.0 / size

    def disk(cy, cx, r):
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip((r - d) / px + 0.5, 0.0, 1.0)

    for _ in range(14):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.03, 0.16)
        level = rng.uniform(0.25, 0.85)
        if rng.random() < 0.5:
            gy, gx = rng.uniform(-0.25, 0.25, size=2)
            fill = level + gy * (yy - cy) / r * 0.5 + gx * (xx - cx) / r * 0.5
        else:
            fill = level
        m = disk(cy, cx, r)
        img = img * (1 - m) + fill * m
    return np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]
