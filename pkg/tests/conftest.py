import numpy as np
import pytest

from nhwc.codec import SpeechCodec
from nhwc.dsp import log_mel
from nhwc.synthetic import SPEAKERS, TOY_LINES, synth_utterance

CODEC_LINES = TOY_LINES + ["春眠不觉晓", "处处闻啼鸟"]


@pytest.fixture(scope="session")
def toy_mels():
    return [log_mel(synth_utterance(line, SPEAKERS[i % 2])) for i, line in enumerate(CODEC_LINES)]


@pytest.fixture(scope="session")
def untrained_codec(toy_mels):
    return SpeechCodec(max_steps=0, random_state=0).fit(toy_mels)


@pytest.fixture(scope="session")
def trained_codec(toy_mels):
    return SpeechCodec(max_steps=500, random_state=0).fit(toy_mels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_system(tmp_path_factory):
    """Toy corpus plus BPE, codec and LM checkpoints trained through the pipeline."""
    from nhwc import pipeline
    from nhwc.config import load_config
    from nhwc.synthetic import write_toy_corpus

    root = tmp_path_factory.mktemp("toy")
    manifest = write_toy_corpus(root / "data")
    cfg = load_config(overrides={
        "seed": 0,
        "lm": {"early_stop_accuracy": 1.0},
        "sampling": {"mode": "greedy"},
        "paths": {"manifest": str(manifest), "bpe": str(root / "bpe.txt"),
                  "codec": str(root / "codec.ckpt"), "lm": str(root / "lm.ckpt")},
    })
    summaries = {
        "bpe": pipeline.train_bpe(cfg),
        "codec": pipeline.train_codec(cfg),
        "lm": pipeline.train_lm(cfg),
    }
    return {"root": root, "manifest": manifest, "cfg": cfg, "summaries": summaries}
