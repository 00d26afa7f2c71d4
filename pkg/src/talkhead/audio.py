"""Audio frontend: raw waveform -> 25 fps blocks of 4x41 acoustic features.

Each video frame (40 ms) owns four 25 ms analysis windows taken every 10 ms.
A window yields 13 MFCC, 26 log mel-filterbank energies, a pitch estimate in Hz
and a voicing flag, in that order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import kernels

FPS = 25
SAMPLE_RATE = 16000
WINDOW_SEC = 0.025
STEP_SEC = 0.010
WINDOWS_PER_FRAME = 4
N_MFCC = 13
N_FBANK = 26
N_FEATURES = N_MFCC + N_FBANK + 2
N_FFT = 512
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
PITCH_FMIN = 60.0
PITCH_FMAX = 500.0
VOICING_THRESHOLD = 0.3

# column layout of an AcousticWindow
MFCC_SLICE = slice(0, N_MFCC)
FBANK_SLICE = slice(N_MFCC, N_MFCC + N_FBANK)
PITCH_COL = N_MFCC + N_FBANK
VOICING_COL = PITCH_COL + 1


class InvalidAudioError(ValueError):
    """Raised for audio that violates the frontend's input contract."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise InvalidAudioError(f"expected mono audio, got samples of shape {samples.shape}")
        if samples.size == 0:
            raise InvalidAudioError("empty audio clip")
        if self.sample_rate <= 0:
            raise InvalidAudioError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InvalidAudioError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples.astype(np.float64, copy=False))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def num_frames(self) -> int:
        """round(duration * 25), half-up, computed in exact integer arithmetic."""
        return (2 * self.samples.size * FPS + self.sample_rate) // (2 * self.sample_rate)


@dataclass
class AcousticSequence:
    """T frames of 4x41 features at 25 fps."""

    frames: np.ndarray  # (T, 4, 41)
    fps: int = FPS

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[1:] != (WINDOWS_PER_FRAME, N_FEATURES):
            raise ValueError(f"acoustic frames must be (T, 4, 41), got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]


def load_wav(path) -> AudioClip:
    """Read a mono WAV (int PCM or float) and resample to 16 kHz."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        if data.ndim == 2 and data.shape[1] == 1:
            data = data[:, 0]
        else:
            raise InvalidAudioError(f"{path}: expected mono WAV, found {data.shape[1]} channels")
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        data = data.astype(np.float64)
    if sr != SAMPLE_RATE:
        g = math.gcd(sr, SAMPLE_RATE)
        data = resample_poly(data, SAMPLE_RATE // g, sr // g)
        sr = SAMPLE_RATE
    return AudioClip(data, sr)


def save_wav(path, clip: AudioClip):
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def sliding_windows(clip: AudioClip) -> np.ndarray:
    """Cut the clip into 25 ms windows every 10 ms, zero-padding the tail.

    Returns an array of shape (4 * T, window_len) with T = clip.num_frames.
    """
    if not isinstance(clip, AudioClip):
        clip = AudioClip(np.asarray(clip))
    sr = clip.sample_rate
    if sr < 8000:
        raise InvalidAudioError(f"sample rate {sr} Hz below the 8 kHz minimum")
    win = int(round(WINDOW_SEC * sr))
    step = int(round(STEP_SEC * sr))
    count = WINDOWS_PER_FRAME * clip.num_frames
    if count == 0:
        raise InvalidAudioError("clip shorter than half a video frame")
    needed = (count - 1) * step + win
    x = clip.samples
    if x.size < needed:
        x = np.concatenate([x, np.zeros(needed - x.size)])
    idx = np.arange(count)[:, None] * step + np.arange(win)[None, :]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sr: int, n_fft: int = N_FFT, n_filters: int = N_FBANK) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale over [0, sr/2]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (ctr - lo)
    falling = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    return np.hamming(n)


def _spectral_features(windows: np.ndarray, sr: int) -> np.ndarray:
    # pre-emphasis inside each window keeps features local to their window
    emph = windows.copy()
    emph[:, 1:] -= PREEMPHASIS * windows[:, :-1]
    spec = np.fft.rfft(emph * _hamming(windows.shape[1]), N_FFT, axis=1)
    power = (spec.real**2 + spec.imag**2) / N_FFT
    fbank = np.log(np.maximum(power @ mel_filterbank(sr).T, LOG_FLOOR))
    mfcc = dct(fbank, type=2, axis=1, norm="ortho")[:, :N_MFCC]
    return np.concatenate([mfcc, fbank], axis=1)


def windows_features(windows: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Vectorized :func:`window_features` over a (K, window_len) stack -> (K, 41)."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[1] != int(round(WINDOW_SEC * sr)):
        raise InvalidAudioError(f"windows must be (K, {int(round(WINDOW_SEC * sr))}), got {windows.shape}")
    if not np.all(np.isfinite(windows)):
        raise InvalidAudioError("window contains non-finite samples")
    spectral = _spectral_features(windows, sr)
    pitch, voiced = kernels.pitch_track(windows, float(sr), PITCH_FMIN, PITCH_FMAX, VOICING_THRESHOLD)
    return np.concatenate([spectral, pitch[:, None], voiced[:, None]], axis=1)


def window_features(window: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    """41 features of one 25 ms window: [MFCC x13, FBANK x26, pitch, voicing]."""
    return windows_features(np.asarray(window)[None, :], sr)[0]


def assemble_frames(window_feats: np.ndarray) -> AcousticSequence:
    """Group consecutive windows four at a time; frame i owns windows [4i, 4i+4)."""
    window_feats = np.asarray(window_feats)
    if window_feats.ndim != 2 or window_feats.shape[1] != N_FEATURES:
        raise ValueError(f"expected (K, {N_FEATURES}) window features, got {window_feats.shape}")
    if window_feats.shape[0] == 0 or window_feats.shape[0] % WINDOWS_PER_FRAME:
        raise ValueError(f"window count {window_feats.shape[0]} is not a positive multiple of 4")
    return AcousticSequence(window_feats.reshape(-1, WINDOWS_PER_FRAME, N_FEATURES))


def extract_features(clip: AudioClip) -> AcousticSequence:
    """Full frontend; features are rounded to float32 so files round-trip exactly."""
    feats = windows_features(sliding_windows(clip), clip.sample_rate)
    return AcousticSequence(assemble_frames(feats).frames.astype(np.float32))


def feature_stats(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std over a corpus of acoustic sequences (shape (41,) each)."""
    rows = np.concatenate([np.asarray(s.frames if isinstance(s, AcousticSequence) else s).reshape(-1, N_FEATURES)
                           for s in sequences])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)
