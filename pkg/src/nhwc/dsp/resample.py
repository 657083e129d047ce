"""Band-limited rational sample-rate conversion (windowed-sinc, polyphase)."""

from functools import lru_cache
from math import gcd

import numpy as np
from scipy.signal import upfirdn

from ..exceptions import InvalidInputError
from .audio import AudioBuffer

# zero crossings of the prototype sinc on each side, measured at the lower rate
HALF_WIDTH = 32
KAISER_BETA = 8.6
ROLLOFF = 0.95


@lru_cache(maxsize=16)
def design_filter(up, down):
    """Kaiser-windowed sinc low-pass for the upsampled rate, with gain ``up``."""
    stretch = max(up, down)
    cutoff = ROLLOFF / stretch  # relative to the upsampled Nyquist
    n_taps = 2 * HALF_WIDTH * stretch + 1
    t = np.arange(n_taps) - (n_taps - 1) / 2
    h = cutoff * np.sinc(cutoff * t) * np.kaiser(n_taps, KAISER_BETA)
    h *= up
    h.setflags(write=False)
    return h


def resample(audio, target_rate):
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise InvalidInputError("target_rate must be positive")
    src = audio.sample_rate
    if target_rate == src:
        return AudioBuffer(audio.samples.copy(), src)
    g = gcd(src, target_rate)
    up, down = target_rate // g, src // g
    n_out = int(round(len(audio.samples) * target_rate / src))
    if len(audio.samples) == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    h = design_filter(up, down)
    delay = (len(h) - 1) // 2
    # prepend zeros so the group delay is a whole number of output samples
    lead = (-delay) % down
    if lead:
        h = np.concatenate([np.zeros(lead), h])
    offset = (delay + lead) // down
    y = upfirdn(h, audio.samples, up=up, down=down)
    y = y[offset : offset + n_out]
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioBuffer(y, target_rate)
