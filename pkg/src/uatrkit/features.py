"""STFT power, Mel and constant-Q spectrograms, normalization and the ACSP container."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ParameterError

FRAME_LEN_S = 0.050
HOP_LEN_S = 0.025
N_MELS = 300
KINDS = ("stft_power", "mel", "cqt")


class SizeError(ValueError):
    pass


@dataclass(eq=False)
class Spectrogram:
    values: np.ndarray  # frames x bins
    kind: str
    frame_len_s: float
    hop_len_s: float
    sample_rate: int
    bin_labels: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _samples_of(segment):
    x = getattr(segment, "samples", segment)
    return np.asarray(x, dtype=np.float64)


def frame_params(sample_rate, frame_len_s=FRAME_LEN_S, hop_len_s=HOP_LEN_S):
    return int(round(frame_len_s * sample_rate)), int(round(hop_len_s * sample_rate))


def frame_count(n_samples, frame, hop):
    return (n_samples - frame) // hop + 1


def hann(n):
    """Periodic Hann window (exactly zero DC leakage beyond bin 1)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(segment, frame_len_s=FRAME_LEN_S, hop_len_s=HOP_LEN_S, sample_rate=None,
               window="hann") -> Spectrogram:
    """Per-frame |DFT|^2 of the windowed signal over bins 0..frame//2 (no zero padding)."""
    x = _samples_of(segment)
    fs = sample_rate or getattr(getattr(segment, "clip", None), "sample_rate", None)
    if fs is None:
        raise ParameterError("sample_rate is required for raw arrays")
    frame, hop = frame_params(fs, frame_len_s, hop_len_s)
    if frame < 1 or hop < 1:
        raise SizeError("frame and hop must span at least one sample")
    if x.size < frame:
        raise SizeError(f"segment of {x.size} samples is shorter than one {frame}-sample frame")
    n_frames = frame_count(x.size, frame, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][:n_frames]
    w = hann(frame) if window == "hann" else np.ones(frame)
    spec = np.fft.rfft(frames * w, n=frame, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    freqs = np.arange(power.shape[1]) * fs / frame
    return Spectrogram(power, "stft_power", frame_len_s, hop_len_s, int(fs), freqs)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bins, sample_rate, n_mels=N_MELS, fmin=0.0, fmax=None, n_fft=None):
    """Triangular filters, centers uniform in Mel, as an (n_mels, n_bins) matrix.

    Filter edges are the neighbouring Mel points, widened where needed to
    reach at least one DFT bin spacing on either side of the center, so
    that filters narrower than the frequency grid still carry weight. At
    most four centers per DFT bin are allowed.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if n_mels < 1:
        raise ParameterError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ParameterError("need 0 <= fmin < fmax <= Nyquist")
    if n_mels > 4 * n_bins:
        raise ParameterError(f"{n_mels} Mel bands exceed the capacity of {n_bins} frequency bins")
    n_fft = 2 * (n_bins - 1) if n_fft is None else n_fft
    df = sample_rate / n_fft if n_fft > 0 else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_bins) * df
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        center = pts[m + 1]
        lo = min(pts[m], center - df)
        hi = max(pts[m + 2], center + df)
        up = (freqs - lo) / (center - lo)
        down = (hi - freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb, pts[1:-1]


def mel_spectrogram(stft_spec: Spectrogram, n_mels=N_MELS, fmin=0.0, fmax=None) -> Spectrogram:
    if stft_spec.kind != "stft_power":
        raise ParameterError("mel_spectrogram expects an stft_power spectrogram")
    fs = stft_spec.sample_rate
    n_fft = int(round(stft_spec.frame_len_s * fs))
    fb, centers = mel_filterbank(stft_spec.values.shape[1], fs, n_mels, fmin, fmax, n_fft)
    return Spectrogram(stft_spec.values @ fb.T, "mel", stft_spec.frame_len_s, stft_spec.hop_len_s,
                       stft_spec.sample_rate, centers)


def cqt_frequencies(sample_rate, fmin=50.0, bins_per_octave=12, n_bins=None):
    if n_bins is None:
        # largest count with fmin * 2**(n/b) < Nyquist
        n_bins = int(np.ceil(bins_per_octave * np.log2(sample_rate / 2 / fmin)))
        while n_bins > 0 and fmin * 2.0 ** (n_bins / bins_per_octave) >= sample_rate / 2:
            n_bins -= 1
    if n_bins < 1 or fmin * 2.0 ** (n_bins / bins_per_octave) >= sample_rate / 2:
        raise ParameterError("CQT range must stay below Nyquist with at least one bin")
    return fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def cqt_spectrogram(segment, bins_per_octave=12, fmin=50.0, n_bins=None, sample_rate=None,
                    frame_len_s=FRAME_LEN_S, hop_len_s=HOP_LEN_S) -> Spectrogram:
    """Constant-Q magnitudes on the STFT frame grid.

    Bin k correlates a Hann-windowed complex exponential at
    ``fmin * 2**(k/b)`` of length ``ceil(Q * fs / f_k)`` with the signal,
    centered on each STFT frame center; the signal is zero-extended at
    both ends.
    """
    x = _samples_of(segment)
    fs = sample_rate or getattr(getattr(segment, "clip", None), "sample_rate", None)
    if fs is None:
        raise ParameterError("sample_rate is required for raw arrays")
    freqs = cqt_frequencies(fs, fmin, bins_per_octave, n_bins)
    frame, hop = frame_params(fs, frame_len_s, hop_len_s)
    if x.size < frame:
        raise SizeError(f"segment of {x.size} samples is shorter than one {frame}-sample frame")
    n_frames = frame_count(x.size, frame, hop)
    centers = np.arange(n_frames) * hop + frame // 2
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    lengths = np.ceil(q * fs / freqs).astype(int)
    pad = int(lengths.max())
    xp = np.pad(x, (pad, pad))
    out = np.empty((n_frames, freqs.size))
    for k, (fk, nk) in enumerate(zip(freqs, lengths)):
        n = np.arange(nk) - nk // 2
        kernel = hann(nk) * np.exp(-2j * np.pi * fk * n / fs) / nk
        starts = centers - nk // 2 + pad
        windows = np.lib.stride_tricks.sliding_window_view(xp, nk)[starts]
        out[:, k] = np.abs(windows @ kernel)
    return Spectrogram(out, "cqt", frame_len_s, hop_len_s, int(fs), freqs)


def normalize(spec: Spectrogram) -> Spectrogram:
    """``log1p`` compression, then zero mean and unit population std per spectrogram."""
    v = np.log1p(spec.values)
    mu = v.mean()
    sd = v.std()
    if sd == 0 or not np.isfinite(sd) or np.ptp(v) == 0:
        v = np.zeros_like(v)
    else:
        v = (v - mu) / sd
    return Spectrogram(v, spec.kind, spec.frame_len_s, spec.hop_len_s, spec.sample_rate, spec.bin_labels)


def featurize(segment, kind="stft_power", sample_rate=None, n_mels=N_MELS,
              frame_len_s=FRAME_LEN_S, hop_len_s=HOP_LEN_S, cqt_fmin=50.0, cqt_bins_per_octave=12) -> Spectrogram:
    """Raw (unnormalized) spectrogram of the requested kind."""
    if kind in ("stft", "stft_power"):
        return stft_power(segment, frame_len_s, hop_len_s, sample_rate)
    if kind == "mel":
        return mel_spectrogram(stft_power(segment, frame_len_s, hop_len_s, sample_rate), n_mels)
    if kind == "cqt":
        return cqt_spectrogram(segment, cqt_bins_per_octave, cqt_fmin, sample_rate=sample_rate,
                               frame_len_s=frame_len_s, hop_len_s=hop_len_s)
    raise ParameterError(f"unknown feature kind {kind!r}")


# ---------------------------------------------------------------- ACSP container

MAGIC = b"ACSP"
VERSION = 1
_KIND_TAG = {k: i for i, k in enumerate(KINDS)}


class ContainerError(ValueError):
    pass


def to_bytes(spec: Spectrogram) -> bytes:
    """Serialize: magic, u32 version, u32 kind, u32 frames, u32 bins, f32 data, f64 frame, f64 hop, u32 rate."""
    frames, bins = spec.values.shape
    head = MAGIC + struct.pack("<IIII", VERSION, _KIND_TAG[spec.kind], frames, bins)
    body = np.ascontiguousarray(spec.values, dtype="<f4").tobytes()
    meta = struct.pack("<ddI", spec.frame_len_s, spec.hop_len_s, spec.sample_rate)
    return head + body + meta


def from_bytes(buf: bytes) -> Spectrogram:
    if len(buf) < 20 or buf[:4] != MAGIC:
        raise ContainerError("not an ACSP container")
    version, tag, frames, bins = struct.unpack_from("<IIII", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if tag >= len(KINDS):
        raise ContainerError(f"unknown kind tag {tag}")
    n = frames * bins
    if len(buf) != 20 + 4 * n + 20:
        raise ContainerError("container size does not match its header")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=20).reshape(frames, bins).astype(np.float64)
    frame_len, hop_len, rate = struct.unpack_from("<ddI", buf, 20 + 4 * n)
    return Spectrogram(values, KINDS[tag], frame_len, hop_len, rate, np.arange(bins, dtype=np.float64))


def save_container(path, spec: Spectrogram) -> None:
    Path(path).write_bytes(to_bytes(spec))


def load_container(path) -> Spectrogram:
    return from_bytes(Path(path).read_bytes())
