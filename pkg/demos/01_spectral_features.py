"""Three views of one synthetic ship recording.

Synthesizes a clip with a 100 Hz fundamental, cuts it into the default
30 s / 15 s-overlap segments and extracts the power, Mel and constant-Q
spectrograms of the first segment.
"""

import numpy as np

from uatrkit.corpus import SynthClassSpec, segment_clip, synth_clip
from uatrkit.features import cqt_frequencies, featurize, mel_filterbank

# A 60 s recording at 4 kHz: harmonics at 100, 200, 300 and 400 Hz with a
# slow rhythm modulation and a little broadband noise.
spec = SynthClassSpec(fundamental_hz=100, n_harmonics=4, harmonic_decay=0.6, am_rate_hz=1.5, broadband_level=0.05)
clip = synth_clip(spec, duration_s=60, sample_rate=4000, seed=0, label=0, source_id="demo")
segments = segment_clip(clip)
print(f"{clip.duration:.0f} s clip -> {len(segments)} segments of {segments[0].length / 4000:.0f} s")

seg = segments[0]
for kind in ("stft_power", "mel", "cqt"):
    s = featurize(seg.samples, kind, sample_rate=4000)
    # average over time, then find the strongest band
    profile = s.values.mean(axis=0)
    k = int(np.argmax(profile))
    print(f"{kind:>10}: {s.values.shape[0]} frames x {s.values.shape[1]} bins, "
          f"strongest band centred at {s.bin_labels[k]:.1f} Hz")

# The Mel bank packs 300 triangles into 101 FFT bins; each still has weight.
fb, centers = mel_filterbank(101, 4000)
print(f"Mel bank {fb.shape}, smallest filter mass {fb.sum(axis=1).min():.3f}")

# Constant-Q bins are spaced by a semitone.
f = cqt_frequencies(4000, 50.0, 12)
print(f"CQT: {f.size} bins from {f[0]:.0f} to {f[-1]:.0f} Hz, ratio {f[1] / f[0]:.6f}")
