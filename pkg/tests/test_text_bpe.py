from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nhwc.exceptions import InvalidInputError
from nhwc.text_bpe import BpeTokenizer, BpeVocab, decode, encode, train_bpe


def pair_counts_oracle(s):
    """Exhaustive overlapping count of adjacent byte pairs."""
    return Counter(s[i : i + 2] for i in range(len(s) - 1))


@pytest.fixture(scope="module")
def random_vocab():
    rng = np.random.default_rng(0)
    alphabet = "abcdefgh ij"
    corpus = ["".join(rng.choice(list(alphabet), size=rng.integers(5, 40))) for _ in range(100)]
    return corpus, train_bpe(corpus, 300)


def test_first_merge_is_most_frequent_pair():
    counts = pair_counts_oracle(b"aaabdaaabac")
    best, n = counts.most_common(1)[0]
    assert best == b"aa" and n == 4
    assert all(c < n for p, c in counts.items() if p != best)
    vocab = train_bpe([b"aaabdaaabac"], 257)
    assert vocab.merges == [(ord("a"), ord("a"))]
    assert vocab.vocab_size == 257


def test_zero_merges_at_256():
    vocab = train_bpe(["hello world"], 256)
    assert vocab.merges == []
    assert encode(vocab, "hi") == [ord("h"), ord("i")]


def test_training_stops_when_no_pair_repeats():
    vocab = train_bpe(["abcdef"], 400)
    assert vocab.merges == []


def test_tie_break_prefers_smallest_pair():
    # "ba" and "ab" both occur twice; (97, 98) < (98, 97)
    vocab = train_bpe(["abab", "baba"], 257)
    assert vocab.merges == [(97, 98)]


def test_empty_corpus_rejected():
    with pytest.raises(InvalidInputError):
        train_bpe([], 300)


def test_training_is_deterministic(random_vocab):
    corpus, vocab = random_vocab
    again = train_bpe(corpus, 300)
    assert again.merges == vocab.merges
    assert vocab.vocab_size == 300


def test_encode_edge_cases(random_vocab):
    _, vocab = random_vocab
    assert encode(vocab, b"") == []
    for b in (0, 65, 255):
        assert encode(vocab, bytes([b])) == [b]
    assert decode(vocab, []) == b""


def test_roundtrip_1000_random_byte_strings(random_vocab):
    _, vocab = random_vocab
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(0, 60))
        if rng.random() < 0.5:
            s = bytes(rng.integers(0, 256, size=n).tolist())
        else:
            s = "".join(rng.choice(list("abcdefgh ij"), size=n)).encode()
        ids = encode(vocab, s)
        assert all(0 <= i < vocab.vocab_size for i in ids)
        assert len(ids) <= len(s)
        assert decode(vocab, ids) == s


def test_roundtrip_chinese():
    text = "天生我材必有用"
    vocab = train_bpe([text * 3, "千金散尽还复来"], 300)
    assert decode(vocab, encode(vocab, text)).decode("utf-8") == text


def test_decode_out_of_range(random_vocab):
    _, vocab = random_vocab
    with pytest.raises(InvalidInputError):
        decode(vocab, [vocab.vocab_size])


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=80))
def test_lossless_and_compressive(data):
    vocab = train_bpe([b"the cat sat on the mat", bytes(range(0, 256, 3)) * 2], 280)
    ids = encode(vocab, data)
    assert decode(vocab, ids) == data
    assert len(ids) <= len(data)


def test_file_roundtrip(tmp_path, random_vocab):
    _, vocab = random_vocab
    path = tmp_path / "bpe.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "bpe-v1 300"
    assert lines[1].split()[0] == "0"
    assert BpeVocab.load(path).merges == vocab.merges


def test_file_header_validated(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("bpe-v1 258\n0 97 97\n")
    with pytest.raises(InvalidInputError):
        BpeVocab.load(path)


def test_estimator_interface():
    tok = BpeTokenizer(target_vocab=260).fit(["abababab", "cdcdcd"])
    assert tok.get_params() == {"target_vocab": 260}
    ids = tok.transform(["abcd"])
    assert tok.inverse_transform(ids) == [b"abcd"]
