"""Experiment configuration: one JSON document with a section per stage.

User files are deep-merged over :data:`DEFAULTS`; unknown keys are rejected so
typos surface immediately instead of silently falling back to a default.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .background import DEFAULT_PROMPT
from .exceptions import InvalidInputError

DEFAULTS = {
    "seed": 0,
    "mel": {
        "sample_rate": 16000, "fft_size": 1024, "hop": 256, "n_mels": 80,
        "fmin": 0.0, "fmax": 8000.0, "log_floor": 1e-5,
    },
    "bpe": {"target_vocab": 512},
    "codec": {
        "codebook_size": 256, "code_dim": 128, "ref_dim": 128, "hidden": 128, "downsample": 4,
        "beta": 0.25, "ema_decay": 0.99, "dead_code_threshold": 1e-3, "learning_rate": 2e-3,
        "max_steps": 500, "batch_size": 16, "clip_frames": 32,
    },
    "lm": {
        "n_layers": 4, "n_heads": 4, "d_model": 128, "max_sequence_len": 512, "dropout": 0.0,
        "text_loss_weight": 1.0, "learning_rate": 3e-4, "weight_decay": 0.01,
        "accumulation_target": 1, "batch_size": 8, "max_steps": 2000, "early_stop_accuracy": None,
        "ref_clip_frames": 32,
    },
    "sampling": {"mode": "top_k", "k": 8, "temperature": 0.8, "max_new": None},
    "vocoder": {"iterations": 32},
    "background": {"provider": "rule"},
    "remote_llm": {"endpoint": None, "prompt_template": DEFAULT_PROMPT, "timeout": 10.0, "retries": 1},
    "mix": {"background_gain_db": -10.0, "output_rate": 48000, "fade_ms": 500.0, "tail_ms": 500.0},
    "paths": {"manifest": None, "bpe": "bpe.txt", "codec": "codec.ckpt", "lm": "lm.ckpt"},
}


def deep_merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise InvalidInputError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidInputError(f"{where}.{key} must be an object")
            out[key] = deep_merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides``; relative paths resolve against the file."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise InvalidInputError(f"{path}: top level must be an object")
        cfg = deep_merge(cfg, user)
        base_dir = path.parent
    if overrides:
        cfg = deep_merge(cfg, overrides)
    if base_dir is not None:
        for key, value in cfg["paths"].items():
            if value is not None and not Path(value).is_absolute():
                cfg["paths"][key] = str(base_dir / value)
    return cfg
