"""Training stages and the end-to-end speech + background cascade."""

from __future__ import annotations

import io
import json
import logging
from contextlib import contextmanager
from pathlib import Path

from .background import RemoteLlmProvider, RuleBasedProvider, describe, render_background
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .codec import SpeechCodec
from .dsp import MelConfig, griffin_lim_vocode, log_mel, read_wav, resample, write_wav
from .exceptions import CheckpointError, InvalidInputError, NhwcError, StageError
from .lm import SpeechLM
from .manifest import load_manifest
from .metrics import cer, secs
from .mixer import MixConfig, mix_detailed
from .text_bpe import BpeTokenizer, BpeVocab, encode

log = logging.getLogger(__name__)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["tokens_generated", "description", "gain_db", "limiter_fired", "durations"],
    "properties": {
        "tokens_generated": {"type": "integer", "minimum": 0},
        "description": {
            "type": "object",
            "required": ["kind", "text", "tags"],
            "properties": {
                "kind": {"enum": ["Scene", "Music"]},
                "text": {"type": "string"},
                "tags": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        },
        "gain_db": {"type": "number", "maximum": 0},
        "limiter_fired": {"type": "boolean"},
        "durations": {
            "type": "object",
            "required": ["speech_s", "output_s"],
            "properties": {"speech_s": {"type": "number"}, "output_s": {"type": "number"}},
        },
    },
}

LM_TRAINING_KEYS = ("ref_clip_frames",)


@contextmanager
def stage(name):
    """Re-raise any failure inside the block as a StageError naming ``name``."""
    try:
        yield
    except StageError:
        raise
    except (NhwcError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def mel_config(cfg):
    return MelConfig(**cfg["mel"])


def utterance_mel(audio, cfg):
    mc = mel_config(cfg)
    return log_mel(resample(audio, mc.sample_rate), mc)


def _entries(cfg, manifest):
    path = manifest or cfg["paths"]["manifest"]
    if path is None:
        raise InvalidInputError("no manifest given")
    entries = load_manifest(path)
    if not entries:
        raise InvalidInputError(f"manifest {path} is empty")
    return entries


# -- checkpoints ------------------------------------------------------------------


def save_codec(codec, path):
    save_checkpoint(codec.state_dict(), {"kind": "codec", "params": codec.get_params()}, path)


def load_codec(path):
    tensors, config = load_checkpoint(path)
    if config.get("kind") != "codec":
        raise InvalidInputError(f"{path} is not a codec checkpoint")
    return SpeechCodec.from_state_dict(config["params"], tensors)


def save_lm(lm, path):
    params = lm.get_params()
    params["betas"] = list(params["betas"])
    save_checkpoint(lm.state_dict(), {"kind": "lm", "params": params}, path)


def load_lm(path):
    tensors, config = load_checkpoint(path)
    if config.get("kind") != "lm":
        raise InvalidInputError(f"{path} is not an LM checkpoint")
    params = dict(config["params"])
    params["betas"] = tuple(params["betas"])
    return SpeechLM.from_state_dict(params, tensors)


def load_bpe(path):
    try:
        return BpeVocab.load(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read BPE vocabulary {path}: {exc}") from exc


# -- training ---------------------------------------------------------------------


def train_bpe(cfg, manifest=None, out=None):
    entries = _entries(cfg, manifest)
    tok = BpeTokenizer(cfg["bpe"]["target_vocab"]).fit([e.text for e in entries])
    out = Path(out or cfg["paths"]["bpe"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.vocab_.save(out)
    return {"vocab_size": tok.vocab_size_, "merges": len(tok.vocab_.merges), "out": str(out)}


def train_codec(cfg, manifest=None, out=None, seed=None, steps=None):
    entries = _entries(cfg, manifest)
    mels = [utterance_mel(e.load_audio(), cfg) for e in entries]
    params = dict(cfg["codec"])
    if steps is not None:
        params["max_steps"] = int(steps)
    seed = cfg["seed"] if seed is None else seed
    codec = SpeechCodec(n_mels=cfg["mel"]["n_mels"], random_state=seed, **params).fit(mels)
    out = Path(out or cfg["paths"]["codec"])
    save_codec(codec, out)
    hist = codec.history_
    return {
        "steps": len(hist),
        "losses": [h["loss"] for h in hist[:11]],
        "final_loss": hist[-1]["loss"] if hist else None,
        "reconstruction_mse": codec.reconstruction_mse(mels),
        "out": str(out),
    }


def lm_training_data(entries, bpe, codec, cfg):
    """``(X, y)`` for :class:`SpeechLM`: references re-clip the target utterance per step."""
    clip = cfg["lm"]["ref_clip_frames"]
    X, y = [], []
    for e in entries:
        mel = utterance_mel(e.load_audio(), cfg)
        X.append((encode(bpe, e.text), lambda rng, mel=mel: codec.reference_embedding(mel, clip, rng)))
        y.append(codec.encode(mel).ids.tolist())
    return X, y


def build_lm(cfg, bpe, codec, seed, steps=None):
    params = {k: v for k, v in cfg["lm"].items() if k not in LM_TRAINING_KEYS}
    if steps is not None:
        params["max_steps"] = int(steps)
    return SpeechLM(text_vocab_size=bpe.vocab_size, speech_vocab_size=codec.codebook_size,
                    ref_dim=codec.ref_dim, random_state=seed, **params)


def train_lm(cfg, manifest=None, out=None, seed=None, steps=None, bpe_path=None, codec_path=None):
    entries = _entries(cfg, manifest)
    with stage("bpe"):
        bpe = load_bpe(bpe_path or cfg["paths"]["bpe"])
    with stage("codec"):
        codec = load_codec(codec_path or cfg["paths"]["codec"])
    X, y = lm_training_data(entries, bpe, codec, cfg)
    seed = cfg["seed"] if seed is None else seed
    lm = build_lm(cfg, bpe, codec, seed, steps).fit(X, y)
    out = Path(out or cfg["paths"]["lm"])
    save_lm(lm, out)
    usable = [i for i in range(len(X)) if i not in lm.skipped_]
    return {
        "steps": len(lm.loss_curve_),
        "updates": lm.n_updates_,
        "losses": lm.loss_curve_[:11],
        "final_loss": lm.loss_curve_[-1],
        "speech_accuracy": lm.score([X[i] for i in usable], [y[i] for i in usable]),
        "skipped": [entries[i].id for i in lm.skipped_],
        "out": str(out),
    }


# -- inference --------------------------------------------------------------------


def sampling_kwargs(cfg):
    s = cfg["sampling"]
    return {"greedy": s["mode"] == "greedy", "top_k": s["k"], "temperature": s["temperature"],
            "max_new": s["max_new"]}


def provider_from_config(cfg):
    kind = cfg["background"]["provider"]
    if kind == "rule":
        return RuleBasedProvider()
    if kind == "remote":
        r = cfg["remote_llm"]
        if not r["endpoint"]:
            raise InvalidInputError("remote provider selected but remote_llm.endpoint is empty")
        return RemoteLlmProvider(r["endpoint"], r["prompt_template"], r["timeout"], r["retries"])
    raise InvalidInputError(f"unknown description provider {kind!r}")


def synthesize(cfg, transcript, reference_wav, seed=None, bpe=None, codec=None, lm=None):
    """Track 1: text + reference recording -> 16 kHz speech and the generated tokens."""
    seed = cfg["seed"] if seed is None else seed
    with stage("bpe"):
        bpe = bpe or load_bpe(cfg["paths"]["bpe"])
        if not transcript:
            raise InvalidInputError("transcript is empty")
        text_ids = encode(bpe, transcript)
    with stage("codec"):
        codec = codec or load_codec(cfg["paths"]["codec"])
    with stage("lm"):
        lm = lm or load_lm(cfg["paths"]["lm"])
    with stage("reference"):
        e_ref = codec.reference_embedding(utterance_mel(read_wav(reference_wav), cfg))
    with stage("lm"):
        tokens = lm.predict([(text_ids, e_ref)], random_state=seed, **sampling_kwargs(cfg))[0]
        if not tokens:
            raise InvalidInputError("the language model produced no speech tokens")
    with stage("codec"):
        mel = codec.decode(tokens, e_ref, mel_config(cfg))
    with stage("vocoder"):
        speech = griffin_lim_vocode(mel, cfg["vocoder"]["iterations"])
    return speech, tokens


def background_for(cfg, transcript, duration_s, seed=None):
    seed = cfg["seed"] if seed is None else seed
    with stage("describe"):
        desc = describe(transcript, provider_from_config(cfg))
    with stage("render"):
        audio = render_background(desc, duration_s, rng=seed, sample_rate=cfg["mix"]["output_rate"])
    return desc, audio


def wav_bytes(audio):
    buf = io.BytesIO()
    write_wav(buf, audio)
    return buf.getvalue()


def run_e2e(cfg, transcript, reference_wav, out_path, seed=None):
    """Full cascade; the WAV and ``<out>.json`` report appear only if every stage succeeds."""
    seed = cfg["seed"] if seed is None else seed
    speech, tokens = synthesize(cfg, transcript, reference_wav, seed)
    with stage("resample"):
        speech48 = resample(speech, cfg["mix"]["output_rate"])
    mix_cfg = MixConfig(**cfg["mix"])
    desc, bg = background_for(cfg, transcript, speech48.duration + mix_cfg.tail_ms / 1000.0, seed)
    with stage("mix"):
        result = mix_detailed(speech48, bg, mix_cfg)
    report = {
        "tokens_generated": len(tokens),
        "description": desc.to_dict(),
        "gain_db": mix_cfg.background_gain_db,
        "limiter_fired": result.limiter_fired,
        "durations": {"speech_s": speech48.duration, "background_s": bg.duration,
                      "output_s": result.audio.duration},
    }
    out_path = Path(out_path)
    with stage("write"):
        data = wav_bytes(result.audio)
        atomic_write_bytes(out_path, data)
        atomic_write_bytes(out_path.with_suffix(".json"),
                           json.dumps(report, ensure_ascii=False, indent=2).encode("utf-8"))
    log.info("wrote %s (%.2f s)", out_path, result.audio.duration)
    return report


def evaluate_pairs(pairs, codec=None, cfg=None):
    """Per-pair ``{id, cer, secs}`` rows; ``pairs`` yield (id, ref_text, hyp_text, ref_wav, hyp_wav)."""
    rows = []
    for pid, ref_text, hyp_text, ref_wav, hyp_wav in pairs:
        row = {"id": pid, "cer": cer(ref_text, hyp_text), "secs": None}
        if codec is not None and ref_wav and hyp_wav:
            row["secs"] = secs(read_wav(ref_wav), read_wav(hyp_wav), codec)
        rows.append(row)
    return rows
