"""Toy-scale text-to-speech with reference-conditioned speech tokens and generated backgrounds."""

from .background import SceneDescription, describe, render_background
from .codec import SpeechCodec
from .lm import LmConfig, SpeechLM
from .mixer import MixConfig, mix
from .text_bpe import BpeTokenizer

__version__ = "0.1.0"

__all__ = [
    "BpeTokenizer", "LmConfig", "MixConfig", "SceneDescription", "SpeechCodec", "SpeechLM",
    "describe", "mix", "render_background",
]
