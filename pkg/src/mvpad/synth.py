"""Deterministic two-class texture corpus for desk-scale runs.

Bona fide samples are low-pass filtered Gaussian fields. Attacks add a periodic overlay:
a halftone dot grid (printout surrogate) or concentric rings around the frame centre
(textured-lens surrogate). The ``test_unknown`` partition draws its attacks with a
different period and amplitude, so a detector tuned to the training overlay must generalize.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .common import Label, atomic_write_bytes, atomic_write_text
from .imaging import Dataset, SampleRecord, encode_png, format_manifest

SYNTH_PARTITIONS = ("train", "test_known", "test_unknown")


@dataclass(frozen=True)
class SynthConfig:
    per_class: int = 50                  # samples per class per partition
    train_per_class: int | None = None   # overrides per_class for the train partition
    size: int = 64                       # crop side fed to the network
    margin: int = 16                     # extra frame border; centres are jittered inside it
    seed: int = 0
    cutoff: float = 0.12                 # low-pass cutoff of the bona fide field, cycles/pixel
    contrast: float = 0.15               # std of the bona fide field
    period: float = 4.0
    amplitude: float = 0.3
    unknown_period: float = 7.0
    unknown_amplitude: float = 0.15
    ring_fraction: float = 0.5           # share of attacks drawn as rings instead of dots

    def __post_init__(self):
        if self.per_class < 1 or (self.train_per_class is not None and self.train_per_class < 1):
            raise ValueError("sample counts must be positive")
        if min(self.period, self.unknown_period) < 2:
            raise ValueError("periods must be at least 2 pixels")
        for a in (self.amplitude, self.unknown_amplitude):
            if not 0 < a <= 1:
                raise ValueError("amplitudes must lie in (0, 1]")
        if self.size < 1 or self.margin < 0:
            raise ValueError("size must be positive and margin nonnegative")
        if not 0 <= self.ring_fraction <= 1:
            raise ValueError("ring_fraction must lie in [0, 1]")

    @property
    def frame(self) -> int:
        return self.size + self.margin

    def count(self, partition: str) -> int:
        if partition == "train" and self.train_per_class is not None:
            return self.train_per_class
        return self.per_class


def band_limited_field(rng: np.random.Generator, side: int, cutoff: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian field with a Gaussian spectral envelope."""
    noise = rng.standard_normal((side, side))
    f = np.fft.fftfreq(side)
    radius2 = f[:, None] ** 2 + f[None, :] ** 2
    out = np.fft.ifft2(np.fft.fft2(noise) * np.exp(-radius2 / (2 * cutoff ** 2))).real
    return (out - out.mean()) / out.std()


def halftone(side: int, period: float, phase: tuple[float, float]) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    w = 2 * math.pi / period
    return (np.cos(w * x + phase[0]) + np.cos(w * y + phase[1])) / 2


def rings(side: int, period: float, center: tuple[float, float], phase: float) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    r = np.hypot(x - center[0], y - center[1])
    return np.cos(2 * math.pi * r / period + phase)


def render(cfg: SynthConfig, rng: np.random.Generator, label: Label, unknown: bool):
    """One frame (pixels in [0, 1]) and its jittered centre (x, y)."""
    side = cfg.frame
    lo = cfg.size / 2
    hi = side - cfg.size / 2
    center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    base = 0.5 + cfg.contrast * band_limited_field(rng, side, cfg.cutoff)
    if label == Label.ATTACK:
        period = cfg.unknown_period if unknown else cfg.period
        amp = cfg.unknown_amplitude if unknown else cfg.amplitude
        if rng.random() < cfg.ring_fraction:
            pattern = rings(side, period, center, rng.uniform(0, 2 * math.pi))
        else:
            pattern = halftone(side, period, tuple(rng.uniform(0, 2 * math.pi, 2)))
        base = (1 - amp) * base + amp * (0.5 + 0.5 * pattern)
    return np.clip(base, 0.0, 1.0), (round(center[0], 2), round(center[1], 2))


def generate(cfg: SynthConfig, out_dir: str | Path, name: str = "synthetic") -> Dataset:
    """Write PNG frames and ``manifest.csv`` under ``out_dir``; returns the dataset."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    records = []
    for p_idx, part in enumerate(SYNTH_PARTITIONS):
        for label in (Label.BONA_FIDE, Label.ATTACK):
            for i in range(cfg.count(part)):
                rng = np.random.default_rng([cfg.seed, p_idx, int(label), i])
                px, center = render(cfg, rng, label, part == "test_unknown")
                sid = f"{part}_{label.manifest_name}_{i:04d}"
                rel = f"images/{sid}.png"
                atomic_write_bytes(out / rel, encode_png(px))
                records.append(SampleRecord(sid, rel, label, part, center))
    ds = Dataset(name, tuple(records), out)
    atomic_write_text(out / "manifest.csv", format_manifest(ds))
    return ds


def dot_energy(pixels: np.ndarray, period: float, width: float = 0.03) -> float:
    """Mean spectral power in an annulus around frequency 1/period (DC removed)."""
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape
    power = np.abs(np.fft.fft2(px - px.mean())) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    ring = np.abs(np.hypot(fx, fy) - 1.0 / period) <= width
    return float(power[ring].mean())
