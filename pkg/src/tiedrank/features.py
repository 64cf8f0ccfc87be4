"""Log-mel spectrogram for raw PCM input.

Converts an in-memory mono signal into the 64-band log-mel features the
retrieval pipeline consumes when embeddings are not precomputed. All
computation runs at 64-bit.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (peak 1) spanning 0 .. sample_rate/2.

    Returns [n_mels, n_fft//2 + 1] at float64.
    """
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / n_fft
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    # ceil convention: every frame lies fully inside the signal, and a
    # signal exactly win samples long still yields one frame
    return max(1, math.ceil((n_samples - win) / hop))


def logmel_spectrogram(
    pcm,
    sample_rate: int = 44100,
    n_mels: int = 64,
    hop: int = 441,
    win: int = 1764,
    floor_db: float = -100.0,
) -> Tensor:
    """Hann-windowed power spectrogram -> mel filterbank -> dB with a floor.

    Returns a Tensor of shape [T, n_mels] where T = frame_count(S, win, hop).
    Raises ShapeError when the signal is shorter than one window.
    """
    x = np.asarray(pcm, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"logmel_spectrogram: expected a 1-D signal, got shape {x.shape}")
    s = x.shape[0]
    if s < win:
        raise ShapeError(f"logmel_spectrogram: signal too short: {s} samples < window {win}")
    n_frames = frame_count(s, win, hop)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    frames = np.empty((n_frames, win), dtype=np.float64)
    for t in range(n_frames):
        start = t * hop
        frames[t] = x[start:start + win]
    spec = np.fft.rfft(frames * window, n=win, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mel_power = power @ mel_filterbank(n_mels, win, sample_rate).T
    floor_power = 10.0 ** (floor_db / 10.0)
    out = 10.0 * np.log10(np.maximum(mel_power, floor_power))
    return Tensor(out, dtype=np.float64)
