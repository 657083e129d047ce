import json
import struct

import numpy as np
import pytest

from nhwc.checkpoint import load_checkpoint, save_checkpoint
from nhwc.config import DEFAULTS, load_config
from nhwc.dsp import AudioBuffer, write_wav
from nhwc.exceptions import CheckpointError, IntegrityError, InvalidInputError, MagicError, VersionError
from nhwc.lm import SpeechLM
from nhwc.manifest import load_manifest
from nhwc.pipeline import load_codec, load_lm, save_codec, save_lm


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "b.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "a.bias": rng.normal(size=(5,)).astype(np.float32),
        "scalar": np.array(2.5, dtype=np.float32),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }


# -- checkpoints ------------------------------------------------------------------


def test_round_trip_is_bitwise(tmp_path):
    tensors = sample_tensors()
    config = {"kind": "test", "params": {"lr": 0.001, "name": "床前"}}
    save_checkpoint(tensors, config, tmp_path / "a.ckpt")
    loaded, cfg = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == config
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_resave_is_byte_identical(tmp_path):
    save_checkpoint(sample_tensors(), {"x": [1, 2.5]}, tmp_path / "a.ckpt")
    tensors, cfg = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(dict(reversed(list(tensors.items()))), cfg, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_layout_on_disk(tmp_path):
    save_checkpoint({"w": np.array([1.0, -2.0], dtype=np.float32)}, {}, tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    magic, version, hlen = struct.unpack("<4sIQ", raw[:16])
    assert (magic, version) == (b"NHWC", 1)
    header = json.loads(raw[16 : 16 + hlen])
    assert header["tensors"] == [{"name": "w", "offset": 0, "shape": [2]}]
    assert np.frombuffer(raw[16 + hlen :], "<f4").tolist() == [1.0, -2.0]


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(MagicError):
        load_checkpoint(p)


def test_unknown_version(tmp_path):
    p = tmp_path / "v.ckpt"
    save_checkpoint(sample_tensors(), {}, p)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(p)


def test_huge_header_length_rejected_before_reading(tmp_path):
    p = tmp_path / "h.ckpt"
    p.write_bytes(struct.pack("<4sIQ", b"NHWC", 1, 2**62) + b"{}")
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def _rewrite_header(path, mutate):
    raw = path.read_bytes()
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16 : 16 + hlen])
    mutate(header)
    new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(new)) + new + raw[16 + hlen :])


def test_offset_past_end_of_file(tmp_path):
    p = tmp_path / "o.ckpt"
    save_checkpoint(sample_tensors(), {}, p)
    _rewrite_header(p, lambda h: h["tensors"][-1].update(offset=10_000))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_overlapping_tensors(tmp_path):
    p = tmp_path / "ov.ckpt"
    save_checkpoint(sample_tensors(), {}, p)
    _rewrite_header(p, lambda h: h["tensors"][1].update(offset=h["tensors"][0]["offset"]))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint(sample_tensors(), {}, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_codec_checkpoint_round_trip(tmp_path, trained_codec, toy_mels):
    save_codec(trained_codec, tmp_path / "codec.ckpt")
    clone = load_codec(tmp_path / "codec.ckpt")
    a = trained_codec.encode(toy_mels[0]).ids
    assert clone.encode(toy_mels[0]).ids.tolist() == a.tolist()
    e = trained_codec.reference_embedding(toy_mels[0])
    np.testing.assert_array_equal(clone.reference_embedding(toy_mels[0]), e)
    np.testing.assert_array_equal(clone.decode(a, e).values, trained_codec.decode(a, e).values)
    for name, arr in trained_codec.state_dict().items():
        assert np.asarray(clone.state_dict()[name], np.float32).tobytes() == np.asarray(arr, np.float32).tobytes()


def test_lm_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = [([1, 2], rng.normal(size=8))]
    y = [[3, 4, 5]]
    lm = SpeechLM(n_layers=1, n_heads=2, d_model=16, text_vocab_size=20, speech_vocab_size=8, ref_dim=8,
                  max_sequence_len=32, max_steps=2, zero_init_head=False).fit(X, y)
    save_lm(lm, tmp_path / "lm.ckpt")
    clone = load_lm(tmp_path / "lm.ckpt")
    assert clone.get_params() == lm.get_params()
    for name, arr in lm.state_dict().items():
        assert clone.state_dict()[name].tobytes() == arr.tobytes()
    with pytest.raises(InvalidInputError):
        load_codec(tmp_path / "lm.ckpt")


# -- manifest ---------------------------------------------------------------------


@pytest.fixture
def wav_dir(tmp_path):
    for name in ("a", "b", "c"):
        write_wav(tmp_path / f"{name}.wav", AudioBuffer(np.zeros(800), 16000))
    return tmp_path


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r, ensure_ascii=False)) + "\n"
                            for r in rows), encoding="utf-8")
    return path


def test_manifest_order_and_relative_paths(wav_dir):
    rows = [{"id": n, "wav": f"{n}.wav", "text": f"文本{n}"} for n in ("c", "a", "b")]
    entries = load_manifest(write_lines(wav_dir / "m.jsonl", rows))
    assert [e.id for e in entries] == ["c", "a", "b"]
    assert entries[0].wav == wav_dir / "c.wav"
    assert entries[1].text == "文本a"


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


def test_manifest_missing_text_names_line(wav_dir):
    rows = [{"id": "a", "wav": "a.wav", "text": "x"}, {"id": "b", "wav": "b.wav"}]
    with pytest.raises(InvalidInputError, match=r"m.jsonl:2: .*text"):
        load_manifest(write_lines(wav_dir / "m.jsonl", rows))


def test_manifest_malformed_json_names_line(wav_dir):
    with pytest.raises(InvalidInputError, match=r":3: malformed"):
        load_manifest(write_lines(wav_dir / "m.jsonl", [{"id": "a", "wav": "a.wav", "text": "x"}, "", "{oops"]))


def test_manifest_duplicate_id(wav_dir):
    rows = [{"id": "a", "wav": "a.wav", "text": "x"}, {"id": "a", "wav": "b.wav", "text": "y"}]
    with pytest.raises(InvalidInputError, match="duplicate"):
        load_manifest(write_lines(wav_dir / "m.jsonl", rows))


def test_manifest_missing_wav(wav_dir):
    with pytest.raises(InvalidInputError, match="not found"):
        load_manifest(write_lines(wav_dir / "m.jsonl", [{"id": "z", "wav": "z.wav", "text": "x"}]))


# -- config -----------------------------------------------------------------------


def test_defaults_without_file():
    cfg = load_config()
    assert cfg == DEFAULTS and cfg is not DEFAULTS
    assert cfg["mix"]["background_gain_db"] == -10.0


def test_file_and_overrides_merge(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"lm": {"n_layers": 2}, "paths": {"codec": "ck/codec.ckpt"}}))
    cfg = load_config(p, {"seed": 9, "lm": {"d_model": 64}})
    assert cfg["lm"]["n_layers"] == 2 and cfg["lm"]["d_model"] == 64 and cfg["lm"]["n_heads"] == 4
    assert cfg["seed"] == 9
    assert cfg["paths"]["codec"] == str(tmp_path / "ck" / "codec.ckpt")


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"lm": {"n_layer": 2}}))
    with pytest.raises(InvalidInputError, match="lm.n_layer"):
        load_config(p)


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{\n  \"seed\": 1,\n  oops\n}")
    with pytest.raises(InvalidInputError, match="line 3"):
        load_config(p)
