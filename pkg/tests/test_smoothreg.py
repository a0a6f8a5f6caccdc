import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uatrkit.corpus import AudioClip, segment_clip
from uatrkit.smoothreg import (
    PerturbationError,
    PerturbSpec,
    add_white_noise,
    draw_noisy_batch,
    measured_snr_db,
)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 60), st.integers(0, 10_000))
def test_realized_snr_is_exact(snr, seed):
    x = np.sin(np.linspace(0, 50, 2000)) + 0.1
    y = add_white_noise(x, snr, seed)
    assert measured_snr_db(x, y) == pytest.approx(snr, abs=1e-9)


def test_noise_is_seeded():
    x = np.ones(100)
    np.testing.assert_array_equal(add_white_noise(x, 10, 3), add_white_noise(x, 10, 3))
    assert not np.array_equal(add_white_noise(x, 10, 3), add_white_noise(x, 10, 4))


def test_silent_input_and_infinite_snr():
    with pytest.raises(PerturbationError):
        add_white_noise(np.zeros(10), 10, 0)
    x = np.arange(1.0, 5.0)
    y = add_white_noise(x, math.inf, 0)
    assert np.array_equal(x, y) and y is not x


def test_spec_validation():
    with pytest.raises(PerturbationError):
        PerturbSpec((30, 5))
    with pytest.raises(PerturbationError):
        PerturbSpec(kind="pink")


def _segs():
    clip = AudioClip(np.sin(np.linspace(0, 300, 4000)), 1000, 1, "s")
    return segment_clip(clip, 1, 1)


def test_companions_draw_snr_in_range_and_keep_labels():
    comp = draw_noisy_batch(_segs(), PerturbSpec((5, 30)), epoch=2, noise_seed=7)
    assert len(comp) == 4
    for c, s in zip(comp, _segs()):
        assert 5 <= c.snr_db <= 30 and c.label == 1 and c.epoch == 2
        assert measured_snr_db(s.samples, c.waveform) == pytest.approx(c.snr_db, abs=1e-9)
    assert len({c.snr_db for c in comp}) == 4


def test_companions_redraw_per_epoch_unless_frozen():
    segs = _segs()
    a = draw_noisy_batch(segs, PerturbSpec(), 1, 7)
    b = draw_noisy_batch(segs, PerturbSpec(), 2, 7)
    assert not np.array_equal(a[0].waveform, b[0].waveform)
    frozen = PerturbSpec(redraw=False)
    c, d = draw_noisy_batch(segs, frozen, 1, 7), draw_noisy_batch(segs, frozen, 9, 7)
    assert np.array_equal(c[0].waveform, d[0].waveform)


def test_companion_depends_on_key_not_batch_position():
    segs = _segs()
    a = draw_noisy_batch(segs, PerturbSpec(), 3, 7, keys=[10, 11, 12, 13])
    b = draw_noisy_batch(segs[::-1], PerturbSpec(), 3, 7, keys=[13, 12, 11, 10])
    np.testing.assert_array_equal(a[0].waveform, b[3].waveform)


def test_shared_snr_per_epoch():
    comp = draw_noisy_batch(_segs(), PerturbSpec(per_sample=False), 1, 7)
    assert len({c.snr_db for c in comp}) == 1
