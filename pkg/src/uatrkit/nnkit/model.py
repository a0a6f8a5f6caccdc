"""Compact residual classifier with query-token attention pooling.

The trunk convolves each spectrogram as a one-channel image laid out as
(time, frequency), halving the frequency axis at every stage and keeping the
time axis intact. Frequency is then averaged away, leaving a feature
sequence over time that attention pooling reduces to one embedding. The
embedding feeds the class head and, separately, the pruning layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, guard


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    channels: tuple = (16, 32, 64)
    time_kernel: int = 1
    freq_kernel: int = 3
    n_heads: int = 4
    head_dim: int | None = None
    embed_dim: int = 64
    prune_dim: int = 16
    prune_input: str = "standard"  # "standard": per-sample zero mean, unit variance; "raw": as is

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.time_kernel % 2 == 0 or self.freq_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if not self.channels:
            raise ValueError("at least one stage is required")
        if self.prune_input not in ("standard", "raw"):
            raise ValueError("prune_input must be 'standard' or 'raw'")

    @property
    def key_dim(self) -> int:
        if self.head_dim is not None:
            return self.head_dim
        return max(1, self.channels[-1] // self.n_heads)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# With no normalization layers, full-size residual branches compound the
# activation scale stage by stage; starting each branch small keeps the initial
# logits near zero. Linear maps not followed by a ReLU use the LeCun range.
RESIDUAL_GAIN = 0.1
LINEAR_GAIN = 1 / np.sqrt(2.0)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-uniform weights (scaled as noted above), zero biases. Insertion order is the declaration order."""
    kt, kf = cfg.time_kernel, cfg.freq_kernel
    p = {}

    def conv(name, cin, cout, gain=1.0):
        p[f"{name}.w"] = gain * _he_uniform(rng, (kt, kf, cin, cout), kt * kf * cin)
        p[f"{name}.b"] = np.zeros(cout)

    def linear(name, fin, fout, gain=1.0):
        p[f"{name}.w"] = gain * _he_uniform(rng, (fin, fout), fin)
        p[f"{name}.b"] = np.zeros(fout)

    c0 = cfg.channels[0]
    conv("stem", 1, c0)
    cin = c0
    for i, c in enumerate(cfg.channels):
        conv(f"stage{i}.down", cin, c)
        conv(f"stage{i}.conv_a", c, c)
        conv(f"stage{i}.conv_b", c, c, RESIDUAL_GAIN)
        cin = c
    H, dk = cfg.n_heads, cfg.key_dim
    p["pool.query"] = _he_uniform(rng, (cin,), cin)
    p["pool.wq"] = _he_uniform(rng, (cin, H * dk), cin)
    p["pool.wk"] = _he_uniform(rng, (cin, H * dk), cin)
    p["pool.wv"] = _he_uniform(rng, (cin, H * dk), cin)
    linear("pool.out", H * dk, cfg.embed_dim, LINEAR_GAIN)
    linear("head", cfg.embed_dim, cfg.n_classes, LINEAR_GAIN)
    linear("prune", cfg.embed_dim, cfg.prune_dim)
    return p


@dataclass
class LogitBundle:
    """Outputs of one forward pass. ``z_tilde`` is attached by the trainer."""

    z: Tensor
    emb: Tensor
    s_raw: Tensor
    z_tilde: Tensor | None = None

    @property
    def n(self) -> int:
        return self.z.shape[0]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = init_params(config, rng)
        return cls(
            config=config,
            params=params,
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            params={k: a.copy() for k, a in self.params.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(a, requires_grad=True, name=k) for k, a in self.params.items()}


def attention_pool(seq: Tensor, params: dict, n_heads: int, key_dim: int) -> Tensor:
    """Pool ``seq`` of shape (n, T, C) into (n, H*dk) with one learned query per head.

    There is no positional term, so the result does not depend on the order
    of the time steps.
    """
    n, steps, _ = seq.shape
    q = T.reshape(T.matmul(T.reshape(params["pool.query"], (1, -1)), params["pool.wq"]), (n_heads, key_dim))
    k = T.reshape(T.matmul(seq, params["pool.wk"]), (n, steps, n_heads, key_dim))
    v = T.reshape(T.matmul(seq, params["pool.wv"]), (n, steps, n_heads, key_dim))
    scores = T.mul(T.sum_(T.mul(k, q), axis=3), 1.0 / np.sqrt(key_dim))
    attn = T.softmax(scores, axis=1)
    pooled = T.sum_(T.mul(T.reshape(attn, (n, steps, n_heads, 1)), v), axis=1)
    return T.reshape(pooled, (n, n_heads * key_dim))


def trunk(x: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    """(n, T, F) spectrogram batch -> (n, T, C) feature sequence."""
    h = T.conv2d(T.reshape(x, x.shape + (1,)), params["stem.w"], params["stem.b"])
    for i in range(len(cfg.channels)):
        h = T.conv2d(T.relu(h), params[f"stage{i}.down.w"], params[f"stage{i}.down.b"], stride=(1, 2))
        r = T.conv2d(T.relu(h), params[f"stage{i}.conv_a.w"], params[f"stage{i}.conv_a.b"])
        r = T.conv2d(T.relu(r), params[f"stage{i}.conv_b.w"], params[f"stage{i}.conv_b.b"])
        h = T.add(h, r)
    return T.mean(T.relu(h), axis=2)


def _prune_input(emb: Tensor, how: str) -> Tensor:
    if how == "raw":
        return emb
    # detached: the pruning path must not feed gradients back into the trunk
    centered = emb.data - emb.data.mean(axis=1, keepdims=True)
    scale = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    return Tensor(centered / np.maximum(scale, 1e-12))


def forward(model: ModelState, batch, params: dict | None = None) -> LogitBundle:
    """Run the classifier on a batch of shape (n, frames, bins).

    ``params`` overrides the model's arrays (pass tensors from
    ``model.tensors()`` to collect gradients).
    """
    cfg = model.config
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=T.DTYPE)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"expected a (n, frames, bins) batch, got shape {x.shape}")
    guard(x, "input batch")
    if params is None:
        params = {k: Tensor(a) for k, a in model.params.items()}
    seq = trunk(Tensor(x), params, cfg)
    guard(seq.data, "trunk output")
    pooled = attention_pool(seq, params, cfg.n_heads, cfg.key_dim)
    emb = T.add(T.matmul(pooled, params["pool.out.w"]), params["pool.out.b"])
    z = T.add(T.matmul(emb, params["head.w"]), params["head.b"])
    s_raw = T.add(T.matmul(_prune_input(emb, cfg.prune_input), params["prune.w"]), params["prune.b"])
    guard(z.data, "logits")
    return LogitBundle(z=z, emb=emb, s_raw=s_raw)
