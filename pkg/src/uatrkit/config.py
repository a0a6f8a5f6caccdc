"""Run configuration: defaults, schema validation and YAML round-tripping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields

import numpy as np
import yaml

MODES = ("baseline", "manual_aug", "smooth_reg")
MODE_ALIASES = {"aug": "manual_aug", "smooth": "smooth_reg", "base": "baseline"}
FEATURE_ALIASES = {"stft": "stft_power"}


class ConfigError(ValueError):
    """Carries one message per offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class CorpusConfig:
    seg_seconds: float = 30.0
    hop_seconds: float = 15.0
    split_ratios: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    split_seed: int = 0
    min_clip_pad: bool = False


@dataclass
class FeatureConfig:
    kind: str = "mel"
    frame_len_s: float = 0.050
    hop_len_s: float = 0.025
    n_mels: int = 300
    cqt_fmin: float = 50.0
    cqt_bins_per_octave: int = 12


@dataclass
class ModelSection:
    channels: list = field(default_factory=lambda: [16, 32, 64])
    time_kernel: int = 1
    freq_kernel: int = 3
    n_heads: int = 4
    embed_dim: int = 64
    prune_dim: int = 16
    prune_input: str = "standard"


@dataclass
class TrainConfig:
    mode: str = "smooth_reg"
    prune: bool = True
    alpha: float = 2.0
    epsilon: float = 1e-5
    tau: int = 10
    patience: int = 10
    lr: float = 5e-4
    warmup: int = 5
    max_epoch: int = 100
    batch_size: int = 16
    seed: int = 0
    seed_data: int | None = None
    seed_init: int | None = None
    seed_prune: int | None = None
    seed_noise: int | None = None
    snr_db_range: list = field(default_factory=lambda: [5.0, 30.0])
    noise_redraw: bool = True
    per_sample_snr: bool = True
    prune_measure: str = "kl"
    test_snr_db: float | None = None
    test_noise_seed: int = 12345
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSection = field(default_factory=ModelSection)

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        self.features.kind = FEATURE_ALIASES.get(self.features.kind, self.features.kind)
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.features.kind not in ("stft_power", "mel", "cqt"):
            problems.append(f"features.kind: unknown kind {self.features.kind!r}")
        if self.prune_measure not in ("ce", "ce_min", "kl"):
            problems.append(f"prune_measure: must be one of ce, ce_min, kl, got {self.prune_measure!r}")
        if self.model.prune_input not in ("standard", "raw"):
            problems.append(f"model.prune_input: must be standard or raw, got {self.model.prune_input!r}")
        if self.alpha < 0:
            problems.append("alpha: must be >= 0")
        if not self.epsilon > 0:
            problems.append("epsilon: must be > 0")
        for key in ("tau", "warmup"):
            if getattr(self, key) < 0:
                problems.append(f"{key}: must be >= 0")
        for key in ("patience", "max_epoch", "batch_size"):
            if getattr(self, key) < 1:
                problems.append(f"{key}: must be >= 1")
        if self.warmup > self.max_epoch:
            problems.append("warmup: must not exceed max_epoch")
        if not self.lr > 0:
            problems.append("lr: must be > 0")
        lo, hi = self.snr_db_range
        if lo > hi:
            problems.append("snr_db_range: low must not exceed high")
        if problems:
            raise ConfigError(problems)

    def stream_seed(self, name: str) -> int:
        """Seed for one of the named RNG streams: data, init, prune, noise."""
        explicit = getattr(self, f"seed_{name}")
        if explicit is not None:
            return int(explicit)
        offsets = {"data": 0, "init": 1, "prune": 2, "noise": 3}
        ss = np.random.SeedSequence([int(self.seed), offsets[name]])
        return int(ss.generate_state(1)[0])

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        for k, v in changes.items():
            section, _, key = k.partition(".")
            if key:
                d[section][key] = v
            else:
                d[k] = v
        return from_dict(d)


_SECTIONS = {"corpus": CorpusConfig, "features": FeatureConfig, "model": ModelSection}


def _coerce(path, value, default, problems):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent-only literals such as 5e-4 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {value!r}")
        return value
    return value


def from_dict(data: dict | None) -> TrainConfig:
    """Build a config from nested mappings, reporting every bad key at once."""
    data = dict(data or {})
    problems = []
    defaults = {f.name: (f.default if f.default_factory is MISSING else f.default_factory())
                for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            sec_defaults = _SECTIONS[key]()
            sec_kwargs = {}
            for sk, sv in value.items():
                if not hasattr(sec_defaults, sk):
                    problems.append(f"{key}.{sk}: unknown key")
                    continue
                sec_kwargs[sk] = _coerce(f"{key}.{sk}", sv, getattr(sec_defaults, sk), problems)
            kwargs[key] = _SECTIONS[key](**sec_kwargs)
        elif key in defaults:
            d = defaults[key]
            if d is None:
                kwargs[key] = value
            else:
                kwargs[key] = _coerce(key, value, d, problems)
        else:
            problems.append(f"{key}: unknown key")
    if problems:
        raise ConfigError(problems)
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)
