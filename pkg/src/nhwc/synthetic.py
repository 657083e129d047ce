"""Deterministic toy "speech" for overfit experiments and tests.

Every character becomes a short harmonic syllable whose two formant peaks are
derived from the character's code point; a speaker fixes the pitch and the
spectral tilt.  Nothing here sounds like speech, but the mapping from text to
spectra is learnable and speakers are separable, which is all the toy
pipeline needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer, write_wav

SAMPLE_RATE = 16000
SYLLABLE_S = 0.14
GAP_S = 0.03
EDGE_S = 0.08

TOY_LINES = [
    "床前明月光",
    "疑是地上霜",
    "举头望明月",
    "低头思故乡",
    "白日依山尽",
    "黄河入海流",
    "欲穷千里目",
    "更上一层楼",
]


@dataclass(frozen=True)
class Speaker:
    name: str
    f0: float
    tilt_db_per_octave: float


SPEAKERS = (Speaker("low-dark", 115.0, -12.0), Speaker("high-bright", 230.0, -3.0))


def _formants(ch):
    code = ord(ch)
    f1 = 300.0 + (code * 37) % 600
    f2 = 1000.0 + (code * 91) % 1800
    return f1, f2


def synth_utterance(text, speaker=SPEAKERS[0], sample_rate=SAMPLE_RATE):
    n_syl = int(round(SYLLABLE_S * sample_rate))
    n_gap = int(round(GAP_S * sample_rate))
    n_edge = int(round(EDGE_S * sample_rate))
    t = np.arange(n_syl) / sample_rate
    env = np.sin(np.pi * np.arange(n_syl) / n_syl) ** 0.5
    pieces = [np.zeros(n_edge)]
    for ch in text:
        if ch.isspace():
            pieces.append(np.zeros(n_syl + n_gap))
            continue
        f1, f2 = _formants(ch)
        f0 = speaker.f0 * (1.0 + 0.04 * np.sin(2 * np.pi * 3.0 * t + (ord(ch) % 7)))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        syl = np.zeros(n_syl)
        n_harm = int((sample_rate / 2 - 500) // speaker.f0)
        for h in range(1, n_harm + 1):
            fh = h * speaker.f0
            tilt = 10 ** (speaker.tilt_db_per_octave * np.log2(h) / 20)
            formant = np.exp(-0.5 * ((fh - f1) / 120) ** 2) + 0.7 * np.exp(-0.5 * ((fh - f2) / 200) ** 2)
            syl += tilt * (0.05 + formant) * np.sin(h * phase)
        pieces.append(syl * env)
        pieces.append(np.zeros(n_gap))
    pieces.append(np.zeros(n_edge))
    x = np.concatenate(pieces)
    x *= 0.8 / max(np.max(np.abs(x)), 1e-9)
    return AudioBuffer(x, sample_rate)


def write_toy_corpus(out_dir, lines=TOY_LINES, speakers=SPEAKERS):
    """Write one WAV per line (speakers alternate) plus ``manifest.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, line in enumerate(lines):
        spk = speakers[i % len(speakers)]
        wav = out / f"utt{i:02d}.wav"
        write_wav(wav, synth_utterance(line, spk))
        rows.append({"id": f"utt{i:02d}", "wav": wav.name, "text": line})
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")
    return manifest
