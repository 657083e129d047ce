"""Character error rate and speaker-embedding cosine similarity."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, log_mel, resample
from .exceptions import InvalidInputError

log = logging.getLogger(__name__)

SECS_RATE = 16000
MIN_SECS_DURATION = 0.5


@dataclass(frozen=True)
class EditCosts:
    insertion: float = 1.0
    deletion: float = 1.0
    substitution: float = 1.0

    def __post_init__(self):
        if min(self.insertion, self.deletion, self.substitution) <= 0:
            raise InvalidInputError("edit costs must be positive")


def edit_distance(a, b, costs=EditCosts()):
    """Levenshtein distance between two sequences (strings compare per code point)."""
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1, dtype=np.float64) * costs.insertion
    for i, ca in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i * costs.deletion
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + costs.deletion,
                         cur[j - 1] + costs.insertion,
                         prev[j - 1] + (0.0 if ca == cb else costs.substitution))
        prev = cur
    d = prev[-1]
    return int(d) if float(d).is_integer() else float(d)


def cer(reference, hypothesis):
    if len(reference) == 0:
        raise InvalidInputError("reference transcript is empty")
    return edit_distance(reference, hypothesis) / len(reference)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        log.warning("zero-norm embedding; similarity reported as 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def speaker_embedding(audio, codec):
    """Reference-encoder embedding over the full utterance at 16 kHz."""
    if not isinstance(audio, AudioBuffer):
        raise InvalidInputError("expected an AudioBuffer")
    audio = resample(audio, SECS_RATE)
    if audio.duration < MIN_SECS_DURATION:
        raise InvalidInputError(f"audio shorter than {MIN_SECS_DURATION} s")
    return codec.reference_embedding(log_mel(audio))


def secs(audio_a, audio_b, codec):
    return cosine(speaker_embedding(audio_a, codec), speaker_embedding(audio_b, codec))
