import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uatrkit.corpus import AudioClip, ParameterError, Segment
from uatrkit.features import (
    KINDS,
    ContainerError,
    SizeError,
    Spectrogram,
    cqt_frequencies,
    cqt_spectrogram,
    featurize,
    from_bytes,
    hann,
    hz_to_mel,
    load_container,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    normalize,
    save_container,
    stft_power,
    to_bytes,
)


def naive_power(x, frame, hop):
    """Direct O(N^2) DFT of Hann-windowed frames."""
    n_frames = (len(x) - frame) // hop + 1
    k = np.arange(frame // 2 + 1)
    n = np.arange(frame)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / frame)
    out = np.zeros((n_frames, k.size))
    for f in range(n_frames):
        seg = x[f * hop:f * hop + frame] * w
        for kk in k:
            acc = sum(seg[m] * np.exp(-2j * np.pi * kk * m / frame) for m in range(frame))
            out[f, kk] = abs(acc) ** 2
    return out


def test_stft_matches_naive_dft():
    x = np.random.default_rng(0).normal(size=400)
    got = stft_power(x, sample_rate=400).values  # frame 20, hop 10
    ref = naive_power(x, 20, 10)
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)) < 1e-9


def test_stft_parseval_per_frame():
    x = np.random.default_rng(1).normal(size=800)
    spec = stft_power(x, sample_rate=800)
    frame = 40
    w = hann(frame)
    frames = np.stack([x[i * 20:i * 20 + frame] * w for i in range(spec.values.shape[0])])
    p = spec.values
    # one-sided spectrum: interior bins count twice, DC and Nyquist once
    energy = (p[:, 0] + p[:, -1] + 2 * p[:, 1:-1].sum(axis=1)) / frame
    np.testing.assert_allclose(energy, (frames ** 2).sum(axis=1), rtol=1e-10)


def test_one_khz_tone_peaks_at_bin_50():
    fs = 4000
    t = np.arange(fs) / fs
    spec = stft_power(np.sin(2 * np.pi * 1000 * t), sample_rate=fs)
    assert spec.values.shape[1] == 101
    assert set(np.argmax(spec.values, axis=1)) == {50}
    assert spec.bin_labels[50] == pytest.approx(1000.0)


def test_thirty_second_segment_frame_count():
    clip = AudioClip(np.random.default_rng(0).normal(size=120000), 4000, 0, "s")
    spec = stft_power(Segment(clip, 0, 120000))
    assert spec.values.shape == (1199, 101)


def test_stft_rejects_short_input_and_missing_rate():
    with pytest.raises(SizeError):
        stft_power(np.zeros(10), sample_rate=4000)
    with pytest.raises(ParameterError):
        stft_power(np.zeros(1000))


def test_hann_is_periodic():
    w = hann(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
    np.testing.assert_allclose(w[1:4], w[7:4:-1])


@given(st.floats(0, 20000))
def test_mel_scale_round_trip(f):
    assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, abs=1e-6)


def test_mel_filterbank_defaults_have_300_rows_and_no_empty_filter():
    fb, centers = mel_filterbank(101, 4000)
    assert fb.shape == (300, 101)
    assert np.all(fb.sum(axis=1) > 0)
    assert np.all(np.diff(hz_to_mel(centers)) > 0)
    np.testing.assert_allclose(np.diff(hz_to_mel(centers)), np.diff(hz_to_mel(centers))[0])
    assert fb.min() >= 0 and fb.max() <= 1


def test_mel_filter_peaks_at_its_center_on_a_fine_grid():
    fb, centers = mel_filterbank(2049, 8000, n_mels=20)
    freqs = np.arange(2049) * 8000 / 4096
    for row, c in zip(fb, centers):
        assert abs(freqs[np.argmax(row)] - c) <= 8000 / 4096


def test_mel_filterbank_errors():
    with pytest.raises(ParameterError):
        mel_filterbank(26, 1000, n_mels=300)
    with pytest.raises(ParameterError):
        mel_filterbank(101, 4000, fmin=2500)


def test_mel_spectrogram_shape():
    x = np.random.default_rng(0).normal(size=8000)
    mel = mel_spectrogram(stft_power(x, sample_rate=4000))
    assert mel.values.shape == (79, 300) and mel.kind == "mel"
    assert np.all(mel.values >= 0)


def test_cqt_adjacent_bin_ratio():
    f = cqt_frequencies(4000, 50.0, 12)
    assert np.all(f * 2.0 ** (1 / 12) < 2000)
    np.testing.assert_allclose(f[1:] / f[:-1], 2.0 ** (1 / 12), rtol=1e-15)
    assert f[0] == 50.0 and f.size == 63


def test_cqt_tone_lands_in_its_bin():
    fs = 4000
    f = cqt_frequencies(fs, 50.0, 12)
    t = np.arange(2 * fs) / fs
    spec = cqt_spectrogram(np.sin(2 * np.pi * f[30] * t), sample_rate=fs)
    assert spec.values.shape[1] == f.size
    mid = spec.values[spec.values.shape[0] // 2]
    assert np.argmax(mid) == 30
    assert mid[30] == pytest.approx(0.25, rel=0.05)  # Hann-weighted mean of the analytic half-amplitude


def test_normalize_zscores_log_power():
    spec = Spectrogram(np.random.default_rng(0).uniform(0, 5, (10, 4)), "stft_power", .05, .025, 4000, np.arange(4))
    v = normalize(spec).values
    ref = np.log1p(spec.values)
    np.testing.assert_allclose(v, (ref - ref.mean()) / ref.std())
    const = Spectrogram(np.full((3, 3), 2.0), "mel", .05, .025, 4000, np.arange(3))
    assert not np.any(normalize(const).values)


@pytest.mark.parametrize("kind", KINDS)
def test_featurize_kinds(kind):
    x = np.random.default_rng(0).normal(size=4000)
    spec = featurize(x, kind, sample_rate=4000)
    assert spec.kind == kind and spec.values.shape[0] == 39
    assert np.all(np.isfinite(spec.values)) and np.all(spec.values >= 0)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 6), st.integers(1, 9))
def test_container_round_trip(kind, frames, bins):
    vals = np.random.default_rng(frames * 10 + bins).uniform(-3, 3, (frames, bins))
    spec = Spectrogram(vals, kind, 0.05, 0.025, 4000, np.arange(bins))
    back = from_bytes(to_bytes(spec))
    np.testing.assert_array_equal(back.values, vals.astype(np.float32))
    assert (back.kind, back.frame_len_s, back.hop_len_s, back.sample_rate) == (kind, 0.05, 0.025, 4000)


def test_container_file_and_corruption(tmp_path):
    spec = Spectrogram(np.ones((2, 3)), "cqt", 0.05, 0.025, 4000, np.arange(3))
    save_container(tmp_path / "a.acsp", spec)
    assert load_container(tmp_path / "a.acsp").values.shape == (2, 3)
    blob = (tmp_path / "a.acsp").read_bytes()
    with pytest.raises(ContainerError):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ContainerError):
        from_bytes(blob[:-3])
