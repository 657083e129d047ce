"""Mono audio buffers, gain, and WAV file I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from ..exceptions import InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("AudioBuffer holds mono audio only")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio contains NaN or Inf")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def peak(self):
        return float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0


def db_to_amplitude(gain_db):
    return 10.0 ** (gain_db / 20.0)


def apply_gain_db(audio, gain_db):
    if gain_db == 0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    return AudioBuffer(audio.samples * db_to_amplitude(gain_db), audio.sample_rate)


def rms(audio):
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def read_wav(path):
    """Read a mono 16-bit PCM or 32-bit float RIFF file."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, rate)


def write_wav(path, audio, fmt="pcm16"):
    """Write ``audio`` as 16-bit PCM (``fmt="pcm16"``) or 32-bit float (``"float32"``)."""
    if fmt == "pcm16":
        clipped = np.clip(audio.samples, -1.0, 1.0)
        data = np.round(clipped * 32767.0).astype("<i2")
    elif fmt == "float32":
        data = audio.samples.astype("<f4")
    else:
        raise InvalidInputError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, audio.sample_rate, data)
