"""Pruning repeated segments at desk scale.

Half of the recordings in this corpus are stable: every segment cut from
them is the same waveform. The pruning layer should find those repeats once
the warmup (tau = 10 epochs) has passed and drop all but one copy, leaving
the varied recordings alone. About a minute on one core.
"""

from collections import Counter

from uatrkit.config import from_dict
from uatrkit.corpus import desk_specs, make_synth_corpus, split_dataset
from uatrkit.trainer import FeatureStore, pass_reduction, train

corpus = make_synth_corpus(desk_specs(), clips_per_class=10, duplication_rate=0.5, seed=0, clip_seconds=8,
                           seg_seconds=2, hop_seconds=1, sample_rate=1000, jitter=0.1)
split = split_dataset(corpus.segments, seed=0)
sizes = Counter(s.dup_group for s in split.train)
print(f"{len(split.train)} training segments, {sum(c > 1 for c in sizes.values())} groups of exact repeats")

base = dict(mode="baseline", max_epoch=40, patience=1000, features=dict(kind="stft"),
            model=dict(channels=[4, 8, 8], embed_dim=16, n_heads=2))
store = FeatureStore(from_dict(base))
off = train(from_dict(dict(base, prune=False)), split, store)
on = train(from_dict(dict(base, prune=True)), split, store)

# Audit the prune log against the ground truth.
same = sum(on.dup_groups[e.kept_id] == on.dup_groups[e.pruned_id] for e in on.prune_events)
print(f"{len(on.prune_events)} segments pruned, {same} of them inside a repeat group")
print(f"first prunes: {[(e.epoch, e.kept_id, e.pruned_id) for e in on.prune_events[:3]]}")
print(f"active set by epoch: {[row['active_set_size'] for row in on.curve][8:16]} ...")
print(f"sample passes {on.sample_passes} vs {off.sample_passes} "
      f"({pass_reduction(on.sample_passes, off.sample_passes):.1f}% fewer)")
print(f"test accuracy prune-on {on.accuracy:.3f}, prune-off {off.accuracy:.3f}")
