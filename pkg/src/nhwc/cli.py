"""Command-line entry point.

Every command prints one JSON object on stdout; logs go to stderr at the level
named by ``NHWC_LOG`` (error, warn, info, debug).  Exit codes: 0 success,
2 invalid input, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .background import describe, render_background
from .config import load_config
from .dsp import read_wav, write_wav
from .exceptions import InvalidInputError, NhwcError
from .mixer import MixConfig, mix_detailed
from .synthetic import write_toy_corpus

log = logging.getLogger("nhwc")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = LOG_LEVELS.get(os.environ.get("NHWC_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _config(args):
    overrides = {}
    if getattr(args, "greedy", False):
        overrides.setdefault("sampling", {})["mode"] = "greedy"
    if getattr(args, "top_k", None) is not None:
        overrides.setdefault("sampling", {}).update(mode="top_k", k=args.top_k)
    if getattr(args, "temperature", None) is not None:
        overrides.setdefault("sampling", {})["temperature"] = args.temperature
    if getattr(args, "gain_db", None) is not None:
        overrides.setdefault("mix", {})["background_gain_db"] = args.gain_db
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _paths(cfg, args):
    """--checkpoint DIR points the bpe/codec/lm paths at files inside DIR."""
    if getattr(args, "checkpoint", None):
        d = Path(args.checkpoint)
        cfg["paths"].update(bpe=str(d / "bpe.txt"), codec=str(d / "codec.ckpt"), lm=str(d / "lm.ckpt"))
    return cfg


def cmd_toy_data(args, cfg):
    return {"manifest": str(write_toy_corpus(args.out or "toy"))}


def cmd_train_bpe(args, cfg):
    return pipeline.train_bpe(cfg, args.manifest, args.out)


def cmd_train_codec(args, cfg):
    return pipeline.train_codec(cfg, args.manifest, args.out, steps=args.steps)


def cmd_train_lm(args, cfg):
    summary = pipeline.train_lm(cfg, args.manifest, args.out, steps=args.steps)
    if summary["skipped"]:
        log.warning("skipped %d oversized utterances: %s", len(summary["skipped"]), summary["skipped"])
    return summary


def cmd_synth(args, cfg):
    speech, tokens = pipeline.synthesize(cfg, args.text, args.reference)
    out = Path(args.out or "speech.wav")
    pipeline.atomic_write_bytes(out, pipeline.wav_bytes(speech))
    return {"out": str(out), "tokens_generated": len(tokens), "duration_s": speech.duration}


def cmd_bg(args, cfg):
    desc = describe(args.text, pipeline.provider_from_config(cfg))
    audio = render_background(desc, args.duration, rng=cfg["seed"], sample_rate=cfg["mix"]["output_rate"])
    out = Path(args.out or "background.wav")
    pipeline.atomic_write_bytes(out, pipeline.wav_bytes(audio))
    return {"out": str(out), "description": desc.to_dict(), "duration_s": audio.duration}


def cmd_mix(args, cfg):
    res = mix_detailed(read_wav(args.speech), read_wav(args.background), MixConfig(**cfg["mix"]))
    out = Path(args.out or "mix.wav")
    write_wav(out, res.audio)
    return {"out": str(out), "limiter_fired": res.limiter_fired, "duration_s": res.audio.duration,
            "gain_db": cfg["mix"]["background_gain_db"]}


def cmd_eval(args, cfg):
    codec = pipeline.load_codec(cfg["paths"]["codec"]) if args.secs else None
    pairs = []
    with open(args.pairs, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pairs.append((row["id"], row["reference"], row["hypothesis"],
                              row.get("reference_wav"), row.get("hypothesis_wav")))
            except (ValueError, KeyError) as exc:
                raise InvalidInputError(f"{args.pairs}:{lineno}: bad pair ({exc})") from exc
    rows = pipeline.evaluate_pairs(pairs, codec)
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows),
                                  encoding="utf-8")
    cers = [r["cer"] for r in rows]
    sims = [r["secs"] for r in rows if r["secs"] is not None]
    return {"pairs": len(rows), "mean_cer": sum(cers) / len(cers) if cers else None,
            "mean_secs": sum(sims) / len(sims) if sims else None, "rows": rows}


def cmd_e2e(args, cfg):
    out = Path(args.out or "out.wav")
    report = pipeline.run_e2e(cfg, args.text, args.reference, out)
    return {"out": str(out), **report}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--out", help="output path")
    common.add_argument("--checkpoint", help="directory holding bpe.txt, codec.ckpt and lm.ckpt")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--manifest", help="JSON-lines manifest (overrides paths.manifest)")
    train.add_argument("--steps", type=int, help="number of training steps")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--greedy", action="store_true", help="greedy decoding")
    sampling.add_argument("--top-k", type=int, help="top-k sampling with K candidates")
    sampling.add_argument("--temperature", type=float)

    gain = argparse.ArgumentParser(add_help=False)
    gain.add_argument("--gain-db", type=float, help="background gain in dB (<= 0)")

    p = argparse.ArgumentParser(prog="nhwc", description="Toy text-to-speech with background audio.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("toy-data", parents=[common], help="write the synthetic toy corpus").set_defaults(fn=cmd_toy_data)
    sub.add_parser("train-bpe", parents=[common, train]).set_defaults(fn=cmd_train_bpe)
    sub.add_parser("train-codec", parents=[common, train]).set_defaults(fn=cmd_train_codec)
    sub.add_parser("train-lm", parents=[common, train]).set_defaults(fn=cmd_train_lm)

    s = sub.add_parser("synth", parents=[common, sampling], help="speech only")
    s.add_argument("--text", required=True)
    s.add_argument("--reference", required=True, help="reference recording (WAV)")
    s.set_defaults(fn=cmd_synth)

    b = sub.add_parser("bg", parents=[common], help="describe and render a background")
    b.add_argument("--text", required=True)
    b.add_argument("--duration", type=float, default=5.0)
    b.set_defaults(fn=cmd_bg)

    m = sub.add_parser("mix", parents=[common, gain])
    m.add_argument("--speech", required=True)
    m.add_argument("--background", required=True)
    m.set_defaults(fn=cmd_mix)

    ev = sub.add_parser("eval", parents=[common], help="CER (and SECS with --secs) over a pairs file")
    ev.add_argument("--pairs", required=True,
                    help="JSON lines with id, reference, hypothesis[, reference_wav, hypothesis_wav]")
    ev.add_argument("--secs", action="store_true", help="also compute SECS with the codec")
    ev.set_defaults(fn=cmd_eval)

    e = sub.add_parser("e2e", parents=[common, sampling, gain], help="speech plus background")
    e.add_argument("--text", required=True)
    e.add_argument("--reference", required=True)
    e.set_defaults(fn=cmd_e2e)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _paths(_config(args), args)
        result = args.fn(args, cfg)
    except NhwcError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 4
    json.dump(result, sys.stdout, ensure_ascii=False, default=float)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
