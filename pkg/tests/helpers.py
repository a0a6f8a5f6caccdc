"""Shared oracles and small builders for the test suite."""

import numpy as np

from uatrkit.corpus import desk_specs, make_synth_corpus, split_dataset
from uatrkit.config import from_dict
from uatrkit.nnkit import ModelConfig, ModelState


def numeric_grad(f, a, h=1e-6):
    """Central differences of scalar ``f`` at every entry of ``a``."""
    a = np.array(a, dtype=np.float64)
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = a[i]
        a[i] = old + h
        up = f(a.copy())
        a[i] = old - h
        down = f(a.copy())
        a[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def random_compact_model(seed, n_classes=3, frames=5, bins=6, n=2):
    """Tiny model with nonzero random biases (keeps ReLU inputs off their kink) and a batch."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        n_classes=n_classes,
        channels=tuple(int(c) for c in rng.integers(2, 4, size=int(rng.integers(1, 3)))),
        time_kernel=int(rng.choice([1, 3])),
        freq_kernel=3,
        n_heads=int(rng.integers(1, 3)),
        head_dim=int(rng.integers(2, 4)),
        embed_dim=int(rng.integers(3, 6)),
        prune_dim=4,
    )
    model = ModelState.create(cfg, rng)
    for k, v in model.params.items():
        if k.endswith(".b"):
            model.params[k] = rng.normal(0.0, 0.5, size=v.shape)
    X = rng.normal(size=(n, frames, bins))
    Xn = X + 0.3 * rng.normal(size=X.shape)
    y = rng.integers(0, n_classes, size=n)
    return model, X, y, Xn


TINY_MODEL = dict(channels=[2, 3], embed_dim=6, n_heads=2, prune_dim=8)


def tiny_config(**kw):
    """Fast desk config: 1 kHz, 2 s segments, 1 s hop, power spectrogram, tiny trunk."""
    d = dict(max_epoch=2, warmup=1, tau=0, batch_size=16, corpus=dict(seg_seconds=2, hop_seconds=1),
             features=dict(kind="stft_power"), model=dict(TINY_MODEL))
    for k, v in kw.items():
        if isinstance(v, dict) and k in d:
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return from_dict(d)


def tiny_corpus(duplication_rate=0.5, clips_per_class=4, clip_seconds=5, seed=0, n_classes=3):
    specs = desk_specs()[:n_classes]
    corpus = make_synth_corpus(specs, clips_per_class=clips_per_class, duplication_rate=duplication_rate, seed=seed,
                               clip_seconds=clip_seconds, seg_seconds=2, hop_seconds=1, sample_rate=1000, jitter=0.1)
    return corpus, split_dataset(corpus.segments, seed=0)
