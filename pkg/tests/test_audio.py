import math

import numpy as np
import pytest
from scipy.io import wavfile

from talkhead import audio, synthetic
from talkhead.audio import AudioClip, InvalidAudioError


def _tone(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


@pytest.mark.parametrize("seconds,frames", [(2.0, 50), (0.04, 1), (1.0, 25), (0.02, 1), (0.059, 1), (0.06, 2)])
def test_frame_count_is_rounded_duration_times_fps(seconds, frames):
    clip = AudioClip(np.ones(int(round(seconds * 16000))) * 0.1)
    assert clip.num_frames == frames
    assert audio.extract_features(clip).frames.shape == (frames, 4, 41)


def test_window_geometry():
    clip = AudioClip(np.arange(16000) / 16000.0)
    w = audio.sliding_windows(clip)
    assert w.shape == (4 * 25, 400)
    # consecutive windows advance by 10 ms
    np.testing.assert_array_equal(w[1, :240], w[0, 160:])
    np.testing.assert_array_equal(w[0], clip.samples[:400])


def test_tail_is_zero_padded():
    clip = AudioClip(np.ones(640))  # exactly one 40 ms frame
    w = audio.sliding_windows(clip)
    assert w.shape == (4, 400)
    assert w[3, 640 - 480:].sum() == 0 and w[3, : 640 - 480].sum() == 160


def test_tone_pitch_and_voicing():
    # 0.5 s -> 13 frames; the last frame's windows run into zero padding
    f = audio.extract_features(_tone(440.0)).frames
    assert f.shape[0] == 13
    pitch = f[:-1, :, audio.PITCH_COL]
    assert np.all(np.abs(pitch - 440.0) < 10.0)
    assert np.all(f[:-1, :, audio.VOICING_COL] == 1.0)
    assert np.all(f[-1, 2:, audio.VOICING_COL] == 0.0)
    f = audio.extract_features(_tone(150.0)).frames
    assert np.all(np.abs(f[:-1, :, audio.PITCH_COL] - 150.0) < 3.0)


def test_silence_is_unvoiced_and_floored():
    f = audio.extract_features(AudioClip(np.zeros(8000))).frames
    assert np.all(f[..., audio.VOICING_COL] == 0) and np.all(f[..., audio.PITCH_COL] == 0)
    np.testing.assert_allclose(f[..., audio.FBANK_SLICE], np.float32(math.log(1e-10)))


def test_white_noise_is_unvoiced():
    rng = np.random.default_rng(0)
    f = audio.extract_features(AudioClip(rng.normal(0, 0.3, 16000))).frames
    assert f[..., audio.VOICING_COL].mean() < 0.1


def test_mfcc_is_orthonormal_dct_of_fbank():
    f = audio.extract_features(_tone(300.0, 0.2)).frames.reshape(-1, 41).astype(np.float64)
    fb = f[:, audio.FBANK_SLICE]
    n = fb.shape[1]
    for k in range(13):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        basis = np.array([math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n)])
        np.testing.assert_allclose(f[:, k], scale * fb @ basis, rtol=1e-4, atol=1e-3)


def test_mel_filterbank_shape_and_peaks():
    fb = audio.mel_filterbank(16000)
    assert fb.shape == (26, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0) and np.all(fb.max(axis=1) > 0.5)
    centers = fb.argmax(axis=1)
    assert np.all(np.diff(centers) > 0)
    with pytest.raises(ValueError):
        fb[0, 0] = 1.0


def test_features_are_local_to_their_window():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 0.1, 1600)
    y = x.copy()
    y[1000:] += rng.normal(0, 0.5, 600)  # only windows touching samples >= 1000 may change
    wx = audio.windows_features(audio.sliding_windows(AudioClip(x)))
    wy = audio.windows_features(audio.sliding_windows(AudioClip(y)))
    untouched = [k for k in range(len(wx)) if k * 160 + 400 <= 1000]
    np.testing.assert_allclose(wx[untouched], wy[untouched], rtol=1e-12, atol=1e-12)
    assert not np.allclose(wx[9], wy[9])  # window 9 spans samples 1440..1840


def test_single_window_matches_batched():
    clip = _tone(220.0, 0.2)
    w = audio.sliding_windows(clip)
    batched = audio.windows_features(w)
    for k in (0, 5, len(w) - 1):
        np.testing.assert_allclose(audio.window_features(w[k]), batched[k], rtol=1e-12, atol=1e-12)


def test_assemble_frames_groups_by_four():
    feats = np.arange(8 * 41, dtype=np.float64).reshape(8, 41)
    seq = audio.assemble_frames(feats)
    np.testing.assert_array_equal(seq.frames[1, 0], feats[4])
    with pytest.raises(ValueError):
        audio.assemble_frames(feats[:6])
    with pytest.raises(ValueError):
        audio.assemble_frames(np.zeros((0, 41)))


@pytest.mark.parametrize("bad", [np.zeros((100, 2)), np.array([]), np.array([0.0, np.nan, 0.0])])
def test_invalid_clips(bad):
    with pytest.raises(InvalidAudioError):
        AudioClip(bad)


def test_low_sample_rate_rejected():
    with pytest.raises(InvalidAudioError):
        audio.sliding_windows(AudioClip(np.zeros(4000), 4000))


def test_stereo_wav_rejected(tmp_path):
    wavfile.write(tmp_path / "st.wav", 16000, np.zeros((1600, 2), dtype=np.int16))
    with pytest.raises(InvalidAudioError, match="mono"):
        audio.load_wav(tmp_path / "st.wav")


def test_resampled_wav_keeps_pitch(tmp_path):
    sr = 44100
    t = np.arange(sr // 2) / sr
    wavfile.write(tmp_path / "t.wav", sr, (0.5 * np.sin(2 * np.pi * 440 * t) * 32767).astype(np.int16))
    clip = audio.load_wav(tmp_path / "t.wav")
    assert clip.sample_rate == 16000 and clip.num_frames == 13
    f = audio.extract_features(clip).frames
    assert np.median(f[..., audio.PITCH_COL]) == pytest.approx(440, abs=10)


def test_wav_round_trip(tmp_path):
    clip = _tone(200.0, 0.1)
    audio.save_wav(tmp_path / "a.wav", clip)
    back = audio.load_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(back.samples, clip.samples, atol=1.0 / 32767)


def test_feature_stats():
    seqs = [audio.extract_features(_tone(f, 0.2)) for f in (200.0, 300.0)]
    mean, std = audio.feature_stats(seqs)
    assert mean.shape == std.shape == (41,)
    assert np.all(std >= 1e-3)


def test_speech_fixture_is_partly_voiced():
    clip, _ = synthetic.speech_like(1.0, seed=3)
    v = audio.extract_features(clip).frames[..., audio.VOICING_COL]
    assert 0.2 < v.mean() < 0.95
