import functools
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nhwc.dsp import AudioBuffer
from nhwc.exceptions import InvalidInputError
from nhwc.metrics import EditCosts, cer, cosine, edit_distance, secs
from nhwc.synthetic import SPEAKERS, synth_utterance

from .conftest import CODEC_LINES


def recursive_distance(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    alphabet = list("abc") + ["床", "前", "月"]
    for _ in range(n):
        la, lb = rng.integers(0, 12, size=2)
        yield ("".join(rng.choice(alphabet, la)), "".join(rng.choice(alphabet, lb)))


def test_examples():
    assert cer("abc", "abc") == 0
    assert edit_distance("kitten", "sitting") == 3
    assert cer("kitten", "sitting") == 0.5
    assert cer("床前明月光", "") == 1.0
    assert cer("ab", "xyzw") == 2.0


def test_cer_counts_code_points():
    assert cer("床前明月光", "床前明日光") == pytest.approx(0.2)


def test_empty_reference_rejected():
    with pytest.raises(InvalidInputError):
        cer("", "abc")


def test_matches_recursive_oracle_on_1000_pairs():
    for a, b in random_pairs(1000):
        ref = recursive_distance(a, b)
        assert edit_distance(a, b) == ref
        if a:
            assert cer(a, b) == ref / len(a)


def test_metric_axioms():
    strings = [p[0] for p in random_pairs(300, seed=1)]
    rng = np.random.default_rng(2)
    for _ in range(1000):
        a, b, c = (strings[i] for i in rng.integers(0, len(strings), 3))
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
        assert (edit_distance(a, b) == 0) == (a == b)


@given(st.text(max_size=10), st.text(max_size=10))
def test_bounded_by_longer_length(a, b):
    assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))


def test_edit_costs_validated():
    with pytest.raises(InvalidInputError):
        EditCosts(insertion=0)
    assert edit_distance("a", "", EditCosts(deletion=2.5)) == 2.5


def test_cosine_properties():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, 3.7 * b) == pytest.approx(cosine(a, b), abs=1e-15)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine(np.zeros(4), a) == 0.0


def test_secs_self_similarity(trained_codec):
    x = synth_utterance(CODEC_LINES[0], SPEAKERS[0])
    assert secs(x, x, trained_codec) >= 0.999999


def test_secs_rejects_short_audio(trained_codec):
    short = AudioBuffer(np.zeros(4000), 16000)
    with pytest.raises(InvalidInputError):
        secs(short, short, trained_codec)


def test_secs_resamples_other_rates(trained_codec):
    x = synth_utterance(CODEC_LINES[1], SPEAKERS[1], sample_rate=24000)
    assert secs(x, x, trained_codec) >= 0.999999


def test_same_speaker_scores_above_cross_speaker(trained_codec):
    utts = [(spk, synth_utterance(line, SPEAKERS[spk])) for line in CODEC_LINES for spk in (0, 1)]
    assert len(utts) == 20
    same, cross = [], []
    for (sa, a), (sb, b) in itertools.combinations(utts, 2):
        (same if sa == sb else cross).append(secs(a, b, trained_codec))
    assert np.mean(same) > np.mean(cross)
