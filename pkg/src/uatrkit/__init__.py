"""Underwater acoustic target recognition toolkit.

Synthetic ship-noise corpora, spectrogram features, a small numpy
classifier with its own autodiff, in-batch pruning of near-duplicate
training segments and a KL smoothness term against noisy companions.
"""

__version__ = "0.1.0"

from .config import TrainConfig, load_config  # noqa: E402
from .corpus import AudioClip, Segment, SynthClassSpec, make_synth_corpus, split_dataset  # noqa: E402
from .trainer import RunArtifacts, evaluate, run_matrix, train  # noqa: E402

__all__ = [
    "AudioClip",
    "RunArtifacts",
    "Segment",
    "SynthClassSpec",
    "TrainConfig",
    "evaluate",
    "load_config",
    "make_synth_corpus",
    "run_matrix",
    "split_dataset",
    "train",
]
