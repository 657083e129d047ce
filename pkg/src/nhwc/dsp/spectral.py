"""Log-mel analysis and Griffin-Lim vocoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..exceptions import InvalidInputError
from .audio import AudioBuffer

log = logging.getLogger(__name__)

# output level of the vocoder after peak normalisation
VOCODER_PEAK = 0.95


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.fmax > self.sample_rate / 2:
            raise InvalidInputError("fmax must not exceed the Nyquist frequency")
        if self.hop > self.fft_size:
            raise InvalidInputError("hop must not exceed fft_size")
        if self.fft_size & (self.fft_size - 1):
            raise InvalidInputError("fft_size must be a power of two")

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    @property
    def floor_value(self):
        return float(np.log(self.log_floor))


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels), natural-log energies
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_mels:
            raise InvalidInputError(f"mel must be (frames, {self.config.n_mels})")

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def frame_rate(self):
        return self.config.frame_rate


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg):
    """Triangular HTK-scale filters, shape (n_mels, fft_size // 2 + 1), peak 1."""
    n_freqs = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2, n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def _window(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(x, fft_size, hop):
    """Centered STFT with reflect padding -> complex (frames, fft_size//2 + 1)."""
    pad = fft_size // 2
    if len(x) <= pad:
        raise InvalidInputError("signal too short for reflect padding")
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(xp) - fft_size) // hop
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * _window(fft_size)
    return np.fft.rfft(frames, axis=1)


def istft(spec, fft_size, hop, length=None):
    """Weighted overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[0]
    win = _window(fft_size)
    frames = np.fft.irfft(spec, n=fft_size, axis=1) * win
    total = fft_size + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop : i * hop + fft_size] += frames[i]
        norm[i * hop : i * hop + fft_size] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    pad = fft_size // 2
    out = out[pad:]
    if length is None:
        length = hop * (n_frames - 1)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def log_mel(audio, cfg=MelConfig()):
    if audio.sample_rate != cfg.sample_rate:
        raise InvalidInputError(f"audio is {audio.sample_rate} Hz, mel config expects {cfg.sample_rate} Hz")
    if len(audio.samples) < cfg.fft_size:
        raise InvalidInputError(f"audio has {len(audio.samples)} samples, need at least {cfg.fft_size}")
    power = np.abs(stft(audio.samples, cfg.fft_size, cfg.hop)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


def mel_to_magnitude(mel):
    """Pseudo-inverse of the filterbank: log-mel -> linear magnitude spectrogram."""
    cfg = mel.config
    power_mel = np.exp(mel.values)
    power = power_mel @ _filterbank_pinv(cfg).T
    return np.sqrt(np.maximum(power, 0.0))


@lru_cache(maxsize=8)
def _filterbank_pinv(cfg):
    return np.linalg.pinv(mel_filterbank(cfg))


def spectral_convergence(x, magnitude, fft_size, hop):
    est = np.abs(stft(x, fft_size, hop))
    n = min(len(est), len(magnitude))
    ref = magnitude[:n]
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(est[:n] - ref) / denom) if denom > 0 else 0.0


def griffin_lim(magnitude, fft_size, hop, iterations, length):
    """Phase recovery from a magnitude spectrogram, starting from zero phase."""
    spec = magnitude.astype(np.complex128)
    x = istft(spec, fft_size, hop, length)
    for _ in range(iterations):
        rebuilt = stft(x, fft_size, hop)
        n = min(len(rebuilt), len(magnitude))
        phase = np.exp(1j * np.angle(rebuilt[:n]))
        spec = magnitude[:n] * phase
        x = istft(spec, fft_size, hop, length)
    return x


def griffin_lim_vocode(mel, iterations=32):
    """Turn a log-mel spectrogram back into a peak-normalised 16 kHz waveform."""
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    cfg = mel.config
    length = cfg.hop * (mel.n_frames - 1)
    if length <= cfg.fft_size // 2 or np.all(mel.values <= cfg.floor_value + 1e-9):
        return AudioBuffer(np.zeros(max(length, 0)), cfg.sample_rate)
    magnitude = mel_to_magnitude(mel)
    x = griffin_lim(magnitude, cfg.fft_size, cfg.hop, iterations, length)
    peak = np.max(np.abs(x))
    if peak < 1e-12:
        return AudioBuffer(np.zeros(length), cfg.sample_rate)
    return AudioBuffer(x * (VOCODER_PEAK / peak), cfg.sample_rate)
