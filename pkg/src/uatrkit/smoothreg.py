"""Noisy companions of training segments for the KL consistency term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    snr_db_range: tuple = (5.0, 30.0)
    kind: str = "gaussian_white"
    redraw: bool = True
    per_sample: bool = True  # False: one SNR per epoch shared by every segment

    def __post_init__(self):
        lo, hi = self.snr_db_range
        if lo > hi:
            raise PerturbationError("snr_db_range must be (low, high) with low <= high")
        if self.kind != "gaussian_white":
            raise PerturbationError(f"perturbation kind {self.kind!r} is not implemented")


@dataclass
class NoisySegment:
    base_id: object
    label: int
    snr_db: float
    epoch: int
    waveform: np.ndarray


def add_white_noise(x, snr_db, seed) -> np.ndarray:
    """Add Gaussian white noise scaled so the realized SNR equals ``snr_db``."""
    x = np.asarray(x, dtype=np.float64)
    ps = np.mean(x * x)
    if not ps > 0:
        raise PerturbationError("signal power is zero; SNR is undefined")
    if np.isinf(snr_db) and snr_db > 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = rng.standard_normal(x.size)
    pw = np.mean(w * w)
    g = np.sqrt(ps / (pw * 10.0 ** (snr_db / 10.0)))
    return x + g * w


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2)))


def companion_seed(noise_seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(noise_seed), int(epoch), int(index)])


def draw_noisy_batch(segments, spec: PerturbSpec, epoch: int, noise_seed: int, keys=None) -> list[NoisySegment]:
    """One noisy companion per segment.

    SNR and noise are drawn from a stream keyed on ``(noise_seed, epoch,
    key)``, where ``key`` is a stable integer per segment (``keys``, default
    the position). With ``redraw=False`` the epoch is fixed to 0 so each
    segment keeps the same companion for the whole run.
    """
    keys = range(len(segments)) if keys is None else keys
    e = epoch if spec.redraw else 0
    lo, hi = spec.snr_db_range
    shared = None
    if not spec.per_sample:
        shared = np.random.default_rng(companion_seed(noise_seed, e, -1 & 0xFFFFFFFF)).uniform(lo, hi)
    out = []
    for seg, key in zip(segments, keys):
        rng = np.random.default_rng(companion_seed(noise_seed, e, key))
        snr = rng.uniform(lo, hi) if shared is None else shared
        wave = add_white_noise(seg.samples, snr, rng)
        out.append(NoisySegment(getattr(seg, "segment_id", key), seg.label, float(snr), epoch, wave))
    return out
