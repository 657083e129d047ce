"""Transcript -> scene or music description -> procedural background audio.

Abstract transcripts with no concrete scene keywords get a music description
instead of a scene.  The remote provider talks to any HTTP endpoint that
accepts ``{"prompt": ...}`` and answers ``{"text": ...}``; every failure falls
back to the rule-based lexicon.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .dsp import AudioBuffer
from .exceptions import InvalidInputError

log = logging.getLogger(__name__)

MAX_WORDS = 25
SCENE, MUSIC = "Scene", "Music"
SCENE_TAGS = ("rain", "wind", "birds", "crowd", "fire", "water", "night")
MUSIC_TAGS = ("calm-music", "solemn-music")
NEUTRAL_TAG = "ambience"
TAGS = SCENE_TAGS + MUSIC_TAGS + (NEUTRAL_TAG,)

LEXICON = {
    "rain": ("雨", "rain", "storm", "drizzle", "shower"),
    "wind": ("风", "wind", "breeze", "gale"),
    "birds": ("鸟", "鸟鸣", "啼", "雀", "燕", "莺", "bird", "birds", "chirp", "sparrow"),
    "crowd": ("人群", "市", "街", "宴", "crowd", "market", "street", "people", "party"),
    "fire": ("火", "烛", "灯", "fire", "flame", "candle", "campfire"),
    "water": ("水", "河", "江", "海", "湖", "泉", "流", "溪", "water", "river", "sea", "ocean",
              "lake", "stream", "waves"),
    "night": ("夜", "月", "霜", "星", "night", "moon", "moonlight", "stars", "midnight"),
}
SOLEMN_KEYWORDS = ("悲", "哀", "死", "愁", "泪", "思", "故乡", "grief", "sorrow", "death", "war",
                   "mourn", "loss", "lonely")

DEFAULT_PROMPT = (
    "Read the following transcript. If it mentions tangible objects or places, answer with "
    "'Scene:' followed by a short description of the background sound scene. If it is abstract, "
    "answer with 'Music:' followed by a short description of fitting background music. "
    "Use at most 25 words.\nTranscript: {transcript}"
)


@dataclass(frozen=True)
class SceneDescription:
    kind: str
    text: str
    tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.kind not in (SCENE, MUSIC):
            raise InvalidInputError(f"description kind must be Scene or Music, got {self.kind!r}")
        if not self.tags:
            raise InvalidInputError("description needs at least one tag")
        if not self.text.strip():
            raise InvalidInputError("description text is empty")
        if len(self.text.split()) > MAX_WORDS:
            raise InvalidInputError(f"description exceeds {MAX_WORDS} words")

    @property
    def in_lexicon(self):
        return all(t in TAGS for t in self.tags)

    def to_dict(self):
        return {"kind": self.kind, "text": self.text, "tags": list(self.tags)}


def _contains(low, word):
    # CJK keywords match as substrings, Latin ones only as whole words
    if word.isascii():
        return re.search(rf"\b{re.escape(word)}\b", low) is not None
    return word in low


def match_tags(text, lexicon=LEXICON):
    low = text.lower()
    return [tag for tag, words in lexicon.items() if any(_contains(low, w) for w in words)]


def _music_tag(text):
    low = text.lower()
    return "solemn-music" if any(_contains(low, w) for w in SOLEMN_KEYWORDS) else "calm-music"


def _scene_text(tags):
    names = {"birds": "birdsong", "crowd": "a murmuring crowd", "fire": "a crackling fire",
             "water": "flowing water", "night": "night insects", "rain": "steady rain",
             "wind": "soft wind"}
    parts = [names.get(t, t) for t in tags]
    listed = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"Ambient background of {listed}."


@dataclass
class RuleBasedProvider:
    lexicon: dict = field(default_factory=lambda: dict(LEXICON))

    def describe(self, transcript):
        tags = match_tags(transcript, self.lexicon)
        if tags:
            return SceneDescription(SCENE, _scene_text(tags), tags)
        tag = _music_tag(transcript)
        mood = "slow solemn" if tag == "solemn-music" else "gentle calm"
        return SceneDescription(MUSIC, f"A {mood} sustained instrumental pad.", (tag,))


def parse_reply(reply, lexicon=LEXICON):
    """Turn ``'Scene: ...'`` or ``'Music: ...'`` into a SceneDescription."""
    head, sep, body = reply.strip().partition(":")
    kind = head.strip().capitalize()
    body = body.strip()
    if not sep or kind not in (SCENE, MUSIC) or not body:
        raise InvalidInputError(f"unparseable description reply {reply[:60]!r}")
    if kind == SCENE:
        tags = match_tags(body, lexicon) or [NEUTRAL_TAG]
    else:
        tags = [_music_tag(body)]
    return SceneDescription(kind, body, tags)


@dataclass
class RemoteLlmProvider:
    endpoint: str
    prompt_template: str = DEFAULT_PROMPT
    timeout: float = 10.0
    retries: int = 1
    fallback: RuleBasedProvider = field(default_factory=RuleBasedProvider)

    def __post_init__(self):
        if "{transcript}" not in self.prompt_template:
            raise InvalidInputError("prompt template must contain a {transcript} placeholder")

    def _request(self, prompt):
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body,
                                     headers={"Content-Type": "application/json"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise InvalidInputError("reply lacks a string 'text' field")
        return payload["text"]

    def describe(self, transcript):
        prompt = self.prompt_template.format(transcript=transcript)
        for attempt in range(1 + max(0, int(self.retries))):
            try:
                return parse_reply(self._request(prompt))
            except (OSError, ValueError, urllib.error.URLError) as exc:
                log.warning("remote description attempt %d failed: %s", attempt + 1, exc)
        log.warning("falling back to rule-based description")
        return self.fallback.describe(transcript)


def describe(transcript, provider=None):
    if not transcript or not transcript.strip():
        raise InvalidInputError("transcript is empty")
    return (provider or RuleBasedProvider()).describe(transcript)


# -- procedural rendering -------------------------------------------------------


def _band(x, lo, hi, fs):
    nyq = fs / 2
    if lo <= 0:
        sos = signal.butter(4, hi / nyq, btype="lowpass", output="sos")
    elif hi >= nyq:
        sos = signal.butter(4, lo / nyq, btype="highpass", output="sos")
    else:
        sos = signal.butter(4, [lo / nyq, hi / nyq], btype="bandpass", output="sos")
    return signal.sosfilt(sos, x)


def _norm(x):
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def _rain(n, fs, rng):
    hiss = _band(rng.standard_normal(n), 2000, 9000, fs)
    drops = np.zeros(n)
    hits = rng.integers(0, n, size=max(1, int(40 * n / fs)))
    drops[hits] = rng.uniform(0.5, 1.0, size=len(hits))
    drops = _band(signal.lfilter([1.0], [1.0, -0.995], drops * rng.standard_normal(n)), 3000, 12000, fs)
    return _norm(hiss) + 0.6 * _norm(drops)


def _wind(n, fs, rng):
    t = np.arange(n) / fs
    am = 0.6 + 0.4 * np.sin(2 * np.pi * 0.2 * t + rng.uniform(0, 2 * np.pi))
    return am * _norm(_band(rng.standard_normal(n), 0, 500, fs))


def _birds(n, fs, rng):
    out = np.zeros(n)
    chirp_n = int(0.08 * fs)
    tt = np.arange(chirp_n) / fs
    for start in rng.integers(0, max(1, n - chirp_n), size=max(1, int(3 * n / fs))):
        f0 = rng.uniform(2500, 4500)
        sweep = np.sin(2 * np.pi * (f0 * tt + 8000 * tt**2)) * np.hanning(chirp_n)
        seg = out[start : start + chirp_n]
        seg += sweep[: len(seg)]
    return out + 0.05 * _norm(_band(rng.standard_normal(n), 0, 800, fs))


def _crowd(n, fs, rng):
    t = np.arange(n) / fs
    babble = _band(rng.standard_normal(n), 300, 3000, fs)
    am = 0.7 + 0.3 * np.sin(2 * np.pi * 4.0 * t) * np.sin(2 * np.pi * 0.7 * t)
    return am * _norm(babble)


def _fire(n, fs, rng):
    rumble = _norm(_band(rng.standard_normal(n), 0, 300, fs))
    crackle = np.zeros(n)
    pops = rng.integers(0, n, size=max(1, int(25 * n / fs)))
    crackle[pops] = rng.uniform(-1, 1, size=len(pops))
    return 0.6 * rumble + _norm(_band(crackle, 1500, 8000, fs))


def _water(n, fs, rng):
    t = np.arange(n) / fs
    am = 0.75 + 0.25 * np.sin(2 * np.pi * 1.3 * t)
    return am * _norm(_band(rng.standard_normal(n), 400, 2000, fs))


def _night(n, fs, rng):
    t = np.arange(n) / fs
    gate = (np.sin(2 * np.pi * 30 * t) > 0.3) * (np.sin(2 * np.pi * 0.8 * t) > -0.2)
    crickets = np.sin(2 * np.pi * 4500 * t) * gate
    return 0.6 * crickets + 0.2 * _norm(_band(rng.standard_normal(n), 0, 400, fs))


def _pad(n, fs, freqs):
    t = np.arange(n) / fs
    tone = sum(np.sin(2 * np.pi * f * h * t) / h**2 for f in freqs for h in (1, 2, 3))
    attack_s = min(1.5, n / fs / 3)
    return tone * np.minimum(1.0, t / attack_s)


def _calm(n, fs, rng):
    return _pad(n, fs, (261.63, 329.63, 392.00))


def _solemn(n, fs, rng):
    return _pad(n, fs, (110.00, 130.81, 164.81))


def _ambience(n, fs, rng):
    return _norm(_band(rng.standard_normal(n), 0, 1000, fs))


GENERATORS = {
    "rain": _rain, "wind": _wind, "birds": _birds, "crowd": _crowd, "fire": _fire,
    "water": _water, "night": _night, "calm-music": _calm, "solemn-music": _solemn,
    NEUTRAL_TAG: _ambience,
}

RENDER_PEAK = 0.9


def render_background(desc, duration_s, rng=0, sample_rate=48000):
    """Synthesize ``duration_s`` seconds of audio for ``desc``; peak at most 0.9."""
    if not duration_s > 0:
        raise InvalidInputError("duration must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = int(round(duration_s * sample_rate))
    mix = np.zeros(n)
    for tag in desc.tags:
        gen = GENERATORS.get(tag)
        if gen is None:
            log.warning("unknown background tag %r; using %s", tag, NEUTRAL_TAG)
            gen = GENERATORS[NEUTRAL_TAG]
        mix += _norm(gen(n, sample_rate, rng))
    peak = np.max(np.abs(mix)) if n else 0.0
    if peak > 0:
        mix *= RENDER_PEAK / peak
    return AudioBuffer(mix, sample_rate)
