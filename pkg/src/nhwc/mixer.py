"""Speech + background mixing at the output rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, db_to_amplitude, resample
from .exceptions import InvalidInputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixConfig:
    background_gain_db: float = -10.0
    output_rate: int = 48000
    fade_ms: float = 500.0
    tail_ms: float = 500.0

    def __post_init__(self):
        if self.background_gain_db > 0:
            raise InvalidInputError("background gain must not be positive")
        if self.fade_ms < 0 or self.tail_ms < 0:
            raise InvalidInputError("fade and tail must be non-negative")
        if int(self.output_rate) <= 0:
            raise InvalidInputError("output rate must be positive")


@dataclass
class MixResult:
    audio: AudioBuffer
    limiter_fired: bool
    unlimited_peak: float


def fit_length(x, n):
    """Loop (by whole repetitions) or trim ``x`` to exactly ``n`` samples."""
    return np.resize(x, n) if len(x) else np.zeros(n)


def raised_cosine_fades(n, fade):
    env = np.ones(n)
    fade = min(fade, n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(fade) + 0.5) / fade)
        env[:fade] = ramp
        env[n - fade :] = ramp[::-1]
    return env


def mix_detailed(speech, background, cfg=MixConfig()):
    if len(speech) == 0 or len(background) == 0:
        raise InvalidInputError("cannot mix empty audio")
    rate = int(cfg.output_rate)
    sp = resample(speech, rate).samples
    bg = resample(background, rate).samples
    n = len(sp) + int(round(cfg.tail_ms * rate / 1000.0))
    bed = fit_length(bg, n) * raised_cosine_fades(n, int(round(cfg.fade_ms * rate / 1000.0)))
    bed = bed * db_to_amplitude(cfg.background_gain_db)
    out = np.concatenate([sp, np.zeros(n - len(sp))]) + bed
    peak = float(np.max(np.abs(out)))
    fired = peak > 1.0
    if fired:
        log.info("limiter engaged: unlimited peak %.4f scaled to 1.0", peak)
        out = out / peak
    return MixResult(AudioBuffer(out, rate), fired, peak)


def mix(speech, background, cfg=MixConfig()):
    return mix_detailed(speech, background, cfg).audio
