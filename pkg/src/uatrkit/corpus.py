"""Recordings, synthetic ship-noise clips, segmentation and leakage-free splits."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SYNTH_SAMPLE_RATE = 4000


class WavFormatError(ValueError):
    """Malformed or truncated RIFF/WAVE data."""


class WavUnsupportedError(WavFormatError):
    """Well-formed file with an encoding this reader does not handle."""


class EmptyInputError(WavFormatError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int
    source_id: str
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyInputError("clip must hold a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("clip contains non-finite samples")
        if not self.clip_id:
            self.clip_id = self.source_id

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(eq=False)
class Segment:
    clip: AudioClip
    start: int
    length: int
    dup_group: int | None = None

    def __post_init__(self):
        if self.start < 0 or self.start + self.length > self.clip.samples.size:
            raise ParameterError("segment exceeds clip bounds")

    @property
    def label(self) -> int:
        return self.clip.label

    @property
    def source_id(self) -> str:
        return self.clip.source_id

    @property
    def segment_id(self) -> str:
        return f"{self.clip.clip_id}@{self.start}"

    @property
    def samples(self) -> np.ndarray:
        return self.clip.samples[self.start:self.start + self.length]


@dataclass(frozen=True)
class SynthClassSpec:
    fundamental_hz: float
    n_harmonics: int = 4
    harmonic_decay: float = 0.6
    am_rate_hz: float = 0.0
    broadband_level: float = 0.0
    drift: float = 0.0
    am_depth: float = 0.5
    fading: float = 0.0

    def validate(self, sample_rate: int) -> None:
        for name in ("fundamental_hz", "harmonic_decay", "am_rate_hz", "broadband_level", "drift", "am_depth", "fading"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.fundamental_hz <= 0:
            raise ParameterError("fundamental_hz must be > 0")
        if self.n_harmonics < 1:
            raise ParameterError("n_harmonics must be >= 1")
        if self.fundamental_hz * self.n_harmonics >= sample_rate / 2:
            raise ParameterError(
                f"fundamental_hz * n_harmonics = {self.fundamental_hz * self.n_harmonics:g} Hz "
                f"reaches the Nyquist limit {sample_rate / 2:g} Hz"
            )


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple = (0.7, 0.1, 0.2)
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------- WAV I/O

_PCM, _FLOAT = 1, 3
_EXTENSIBLE = 0xFFFE


def load_wav(path, label: int = 0, source_id: str | None = None) -> AudioClip:
    """Read a PCM (8/16/24/32-bit int) or 32-bit float WAV file into a mono clip.

    Stereo input is downmixed by the channel mean.
    """
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    off = 12
    while off + 8 <= len(buf):
        cid = buf[off:off + 4]
        (size,) = struct.unpack_from("<I", buf, off + 4)
        body = buf[off + 8:off + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE and size >= 26:
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        off += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavUnsupportedError(f"{path}: {channels} channels not supported")
    if rate <= 0:
        raise WavFormatError(f"{path}: invalid sample rate {rate}")
    if tag == _PCM and bits in (8, 16, 24, 32):
        pass
    elif tag == _FLOAT and bits == 32:
        pass
    else:
        raise WavUnsupportedError(f"{path}: format tag {tag} with {bits} bits not supported")
    width = bits // 8
    if block_align != width * channels:
        raise WavFormatError(f"{path}: inconsistent block alignment")
    if len(data) == 0:
        raise EmptyInputError(f"{path}: empty data chunk")
    if len(data) % block_align:
        raise WavFormatError(f"{path}: data chunk not a whole number of frames")

    if tag == _FLOAT:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif bits == 8:
        x = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 24:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(data, dtype=f"<i{width}").astype(np.float64) / float(1 << (bits - 1))
    x = x.reshape(-1, channels).mean(axis=1)
    sid = source_id if source_id is not None else path.stem
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate), int(label), sid, clip_id=path.stem)


def write_wav(path, samples, sample_rate: int, bits: int = 32) -> None:
    """Write a mono WAV; ``bits=32`` stores IEEE float, 16 stores PCM."""
    x = np.asarray(samples, dtype=np.float64)
    if bits == 32:
        tag, payload = _FLOAT, x.astype("<f4").tobytes()
    elif bits == 16:
        tag, payload = _PCM, np.round(np.clip(x, -1, 1) * 32767).astype("<i2").tobytes()
    else:
        raise WavUnsupportedError(f"cannot write {bits}-bit WAV")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- synthesis

FADING_TIME_S = 1.0  # correlation time of the harmonic fading
_FADING_RATE = 10  # control points per second, linearly interpolated


def _fading_gains(spec: SynthClassSpec, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Slow log-normal gain per harmonic: ``exp(fading * u(t))`` with ``u`` a unit-variance Ornstein-Uhlenbeck path."""
    n_ctrl = int(np.ceil(n / sample_rate * _FADING_RATE)) + 2
    a = np.exp(-1.0 / (_FADING_RATE * FADING_TIME_S))
    u = np.empty((spec.n_harmonics, n_ctrl))
    u[:, 0] = rng.normal(size=spec.n_harmonics)
    noise = rng.normal(size=(spec.n_harmonics, n_ctrl - 1)) * np.sqrt(1 - a * a)
    for i in range(1, n_ctrl):
        u[:, i] = a * u[:, i - 1] + noise[:, i - 1]
    t_ctrl = np.arange(n_ctrl) / _FADING_RATE
    t = np.arange(n) / sample_rate
    return np.exp(spec.fading * np.stack([np.interp(t, t_ctrl, row) for row in u]))


def _deterministic_part(spec: SynthClassSpec, n: int, sample_rate: int, rng: np.random.Generator):
    t = np.arange(n) / sample_rate
    phases = rng.uniform(0, 2 * np.pi, size=spec.n_harmonics)
    am_phase = rng.uniform(0, 2 * np.pi)
    if spec.drift > 0:
        # random-walk relative jitter of the fundamental, integrated into phase
        steps = rng.normal(0.0, spec.drift / np.sqrt(sample_rate), size=n)
        rel = np.cumsum(steps)
        inst = spec.fundamental_hz * (1.0 + rel)
        base_phase = 2 * np.pi * np.cumsum(inst) / sample_rate
    else:
        base_phase = 2 * np.pi * spec.fundamental_hz * t
    gains = _fading_gains(spec, n, sample_rate, rng) if spec.fading > 0 else np.ones((spec.n_harmonics, 1))
    x = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        x += gains[k - 1] * spec.harmonic_decay ** (k - 1) * np.sin(k * base_phase + phases[k - 1])
    if spec.am_rate_hz > 0:
        x *= 1.0 + spec.am_depth * np.sin(2 * np.pi * spec.am_rate_hz * t + am_phase)
    return x


def synth_clip(
    spec: SynthClassSpec,
    duration_s: float,
    sample_rate: int = SYNTH_SAMPLE_RATE,
    seed: int = 0,
    label: int = 0,
    source_id: str | None = None,
    repeat_s: float | None = None,
) -> AudioClip:
    """Harmonic series with optional rhythm modulation and broadband noise.

    With ``drift == 0`` and ``fading == 0`` the tonal part is periodic;
    ``fading`` lets each harmonic's level wander slowly. Passing ``repeat_s``
    additionally synthesizes only that many seconds of tonal signal and tiles
    it, so windows taken at multiples of ``repeat_s`` are sample-identical
    before noise is added.
    """
    if duration_s <= 0:
        raise ParameterError("duration_s must be > 0")
    spec.validate(sample_rate)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    if repeat_s is not None and spec.drift == 0 and spec.fading == 0:
        block = int(round(repeat_s * sample_rate))
        if block <= 0:
            raise ParameterError("repeat_s must be > 0")
        tone = _deterministic_part(spec, block, sample_rate, rng)
        x = np.tile(tone, -(-n // block))[:n]
    else:
        x = _deterministic_part(spec, n, sample_rate, rng)
    if spec.broadband_level > 0:
        x = x + spec.broadband_level * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.9 / peak)
    sid = source_id if source_id is not None else f"synth{seed}"
    return AudioClip(x, sample_rate, label, sid)


def segment_clip(clip: AudioClip, seg_seconds: float = 30.0, hop_seconds: float = 15.0,
                 dup_group: int | None = None) -> list[Segment]:
    """Fixed-length windows at a fixed hop; clips shorter than one window give none."""
    if seg_seconds <= 0 or not 0 < hop_seconds <= seg_seconds:
        raise ParameterError("need seg_seconds > 0 and 0 < hop_seconds <= seg_seconds")
    seg = int(round(seg_seconds * clip.sample_rate))
    hop = int(round(hop_seconds * clip.sample_rate))
    n = clip.samples.size
    if n < seg:
        log.warning("clip %s (%.2f s) is shorter than one %.2f s segment; skipped",
                    clip.clip_id, clip.duration, seg_seconds)
        return []
    count = (n - seg) // hop + 1
    return [Segment(clip, i * hop, seg, dup_group) for i in range(count)]


def _snap(freq: float, period_s: float, taken=()) -> float:
    """Nearest frequency with a whole number of cycles per ``period_s`` (at least one).

    Cycle counts in ``taken`` are skipped, moving outward from the nearest.
    """
    base = max(1, round(freq * period_s))
    for k in range(len(taken) + 1):
        for cyc in (base + k, base - k):
            if cyc >= 1 and cyc not in taken:
                return cyc / period_s
    return (max(taken) + 1) / period_s


def desk_specs(broadband_level: float = 0.1, drift: float = 0.03, fading: float = 0.5) -> list[SynthClassSpec]:
    """Four low-frequency vessel classes sized for 1 kHz desk-scale experiments.

    Fundamentals 8 Hz apart, differing harmonic decay and modulation rate.
    At 1 kHz the 50 ms frames resolve only 20 Hz, so a small pitch drift is
    invisible in the features; the harmonic fading is what keeps segments of
    a varied recording distinguishable from one another.
    """
    rows = [(40.0, 0.7, 1.0), (48.0, 0.6, 1.5), (56.0, 0.5, 0.5), (64.0, 0.6, 2.0)]
    return [SynthClassSpec(f0, 4, decay, am, broadband_level, drift, fading=fading) for f0, decay, am in rows]


@dataclass
class SynthCorpus:
    clips: list
    segments: list
    n_classes: int


def make_synth_corpus(
    specs: list[SynthClassSpec],
    clips_per_class: int = 10,
    duplication_rate: float = 0.0,
    seed: int = 0,
    clip_seconds: float = 90.0,
    seg_seconds: float = 30.0,
    hop_seconds: float = 15.0,
    sample_rate: int = SYNTH_SAMPLE_RATE,
    jitter: float = 0.03,
    dup_broadband_level: float | None = 0.0,
) -> SynthCorpus:
    """Build a labeled corpus with ground-truth duplicate groups.

    Each class contributes ``clips_per_class`` recordings. A
    ``duplication_rate`` share of each class's recordings are "stable": their
    tonal part has zero drift and is tiled at the segment hop, so all of
    their segments are identical up to the broadband noise and form one
    duplicate group. The remaining recordings drift and every segment is its
    own group. Per-recording fundamentals are jittered by ``jitter`` so
    different recordings of a class are never identical.
    """
    if not specs:
        raise ParameterError("specs must not be empty")
    if not 0 <= duplication_rate < 1:
        raise ParameterError("duplication_rate must lie in [0, 1)")
    root = np.random.SeedSequence(seed)
    clip_seqs = root.spawn(len(specs) * clips_per_class)
    clips, segments = [], []
    group = 0
    n_stable = math.ceil(duplication_rate * clips_per_class) if duplication_rate > 0 else 0
    for label, spec in enumerate(specs):
        spec.validate(sample_rate)
        taken = set()  # fundamentals (in cycles per hop) already used by this class's stable clips
        for j in range(clips_per_class):
            ss = clip_seqs[label * clips_per_class + j]
            rng = np.random.default_rng(ss)
            f0 = spec.fundamental_hz * (1.0 + rng.uniform(-jitter, jitter))
            clip_seed = int(rng.integers(2**63))
            sid = f"c{label}s{j:03d}"
            stable = j < n_stable
            if stable:
                bb = spec.broadband_level if dup_broadband_level is None else dup_broadband_level
                f_stable = _snap(f0, hop_seconds, taken)
                taken.add(round(f_stable * hop_seconds))
                cspec = SynthClassSpec(
                    fundamental_hz=f_stable,
                    n_harmonics=spec.n_harmonics,
                    harmonic_decay=spec.harmonic_decay,
                    am_rate_hz=_snap(spec.am_rate_hz, hop_seconds) if spec.am_rate_hz > 0 else 0.0,
                    broadband_level=bb,
                    drift=0.0,
                    am_depth=spec.am_depth,
                    fading=0.0,
                )
                clip = synth_clip(cspec, clip_seconds, sample_rate, clip_seed, label, sid, repeat_s=hop_seconds)
            else:
                cspec = SynthClassSpec(
                    fundamental_hz=f0,
                    n_harmonics=spec.n_harmonics,
                    harmonic_decay=spec.harmonic_decay,
                    am_rate_hz=spec.am_rate_hz,
                    broadband_level=spec.broadband_level,
                    drift=max(spec.drift, 1e-3),
                    am_depth=spec.am_depth,
                    fading=spec.fading,
                )
                clip = synth_clip(cspec, clip_seconds, sample_rate, clip_seed, label, sid)
            clips.append(clip)
            segs = segment_clip(clip, seg_seconds, hop_seconds)
            for s in segs:
                s.dup_group = group
                if not stable:
                    group += 1
            if stable:
                group += 1
            segments.extend(segs)
    return SynthCorpus(clips=clips, segments=segments, n_classes=len(specs))


# ---------------------------------------------------------------- splitting

def split_dataset(segments, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Assign whole recordings (``source_id``) to train/val/test, stratified by class.

    Per class the sources are shuffled under ``seed`` and cut by
    largest-remainder rounding, with at least one source per split whenever
    the class has three or more. A class with fewer sources than splits
    keeps them in train (then val) and records a warning.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError("ratios must be three positive fractions summing to 1")
    by_class: dict[int, dict[str, list]] = {}
    for s in segments:
        by_class.setdefault(s.label, {}).setdefault(s.source_id, []).append(s)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    warnings = []
    for label in sorted(by_class):
        sources = sorted(by_class[label])
        order = [sources[i] for i in rng.permutation(len(sources))]
        counts = _allocate(len(order), ratios)
        if len(order) < 3:
            msg = f"class {label}: {len(order)} source(s) cannot cover all splits without leakage"
            log.warning(msg)
            warnings.append(msg)
        start = 0
        for k, c in enumerate(counts):
            for sid in order[start:start + c]:
                parts[k].extend(by_class[label][sid])
            start += c
    return DatasetSplit(*parts, ratios=ratios, warnings=warnings)


def _allocate(n: int, ratios) -> list[int]:
    if n < 3:
        return [min(n, 1), max(0, n - 1), 0]
    raw = [r * n for r in ratios]
    counts = [int(math.floor(v)) for v in raw]
    for i in sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)[: n - sum(counts)]:
        counts[i] += 1
    # every split gets a source; take from the largest
    for i in range(3):
        if counts[i] == 0:
            j = max(range(3), key=lambda k: counts[k])
            counts[j] -= 1
            counts[i] += 1
    return counts


# ---------------------------------------------------------------- text files

MANIFEST_FIELDS = ("path", "label", "source_id")
SEGMENT_INDEX_FIELDS = ("clip_id", "offset", "label", "dup_group")


def write_manifest(path, rows) -> None:
    """``rows``: iterable of (path, label, source_id)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow(r)


def read_manifest(path) -> list[tuple[Path, int, str]]:
    base = Path(path).parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ParameterError(f"manifest {path} lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            p = Path(row["path"])
            out.append((p if p.is_absolute() else base / p, int(row["label"]), row["source_id"]))
    return out


def write_segment_index(path, segments) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SEGMENT_INDEX_FIELDS)
        for s in segments:
            w.writerow((s.clip.clip_id, s.start, s.label, "" if s.dup_group is None else s.dup_group))


def read_segment_index(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [
        {
            "clip_id": r["clip_id"],
            "offset": int(r["offset"]),
            "label": int(r["label"]),
            "dup_group": int(r["dup_group"]) if r["dup_group"] != "" else None,
        }
        for r in rows
    ]
