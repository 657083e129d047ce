"""Waveform/mel conversion, vocoding, resampling and gain."""

from .audio import AudioBuffer, apply_gain_db, db_to_amplitude, read_wav, rms, write_wav
from .resample import resample
from .spectral import (
    MelConfig,
    MelSpectrogram,
    griffin_lim,
    griffin_lim_vocode,
    hz_to_mel,
    istft,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    mel_to_magnitude,
    spectral_convergence,
    stft,
)

__all__ = [
    "AudioBuffer", "MelConfig", "MelSpectrogram", "apply_gain_db", "db_to_amplitude",
    "griffin_lim", "griffin_lim_vocode", "hz_to_mel", "istft", "log_mel", "mel_filterbank",
    "mel_to_hz", "mel_to_magnitude", "read_wav", "resample", "rms", "spectral_convergence",
    "stft", "write_wav",
]
