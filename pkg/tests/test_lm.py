import numpy as np
import pytest

from nhwc.exceptions import InvalidInputError, SequenceTooLongError
from nhwc.lm import (
    REF,
    SPEECH,
    TEXT,
    LmConfig,
    Sampling,
    SpeechLM,
    assemble_sequence,
    batch_loss,
    forward_logits,
    generate,
    init_params,
    lm_loss,
    token_losses,
)
from nhwc.numerics import Adam, Tape, grad_check

TINY = LmConfig(n_layers=1, n_heads=2, d_model=8, text_vocab_size=5, speech_vocab_size=4,
                ref_dim=3, max_sequence_len=16)


def small_cfg(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=16, text_vocab_size=30, speech_vocab_size=12,
                ref_dim=6, max_sequence_len=40)
    base.update(kw)
    return LmConfig(**base)


# -- layout -------------------------------------------------------------------


def test_layout_matches_hand_written_sequence():
    cfg = small_cfg()
    lay = assemble_sequence([7, 8], [3], np.zeros(6), cfg)
    speech3 = cfg.text_vocab_size + 3
    assert lay.tokens.tolist() == [-1, cfg.bot, 7, 8, cfg.eot, cfg.bos, speech3, cfg.eos]
    assert lay.segments.tolist() == [REF, TEXT, TEXT, TEXT, TEXT, SPEECH, SPEECH, SPEECH]
    assert lay.positions.tolist() == [-1, 0, 1, 2, 3, 0, 1, 2]
    assert lay.targets.tolist()[:-1] == lay.tokens.tolist()[1:]
    # targets 7, 8, EOT then speech3, EOS carry a loss; BOT and BOS do not
    assert lay.loss_mask.tolist() == [False, True, True, True, False, True, True, False]
    assert lay.text_loss_rows.tolist() == [1, 2, 3]
    assert lay.speech_loss_rows.tolist() == [5, 6]


def test_prompt_layout_ends_at_bos():
    cfg = small_cfg()
    lay = assemble_sequence([1, 2, 3], [], np.zeros(6), cfg)
    assert len(lay) == 1 + 3 + 2 + 1
    assert lay.tokens[-1] == cfg.bos


def test_layout_too_long():
    cfg = small_cfg(max_sequence_len=10)
    with pytest.raises(SequenceTooLongError):
        assemble_sequence([1] * 4, [1] * 4, np.zeros(6), cfg)


def test_layout_rejects_bad_ids():
    cfg = small_cfg()
    with pytest.raises(InvalidInputError):
        assemble_sequence([30], [1], np.zeros(6), cfg)
    with pytest.raises(InvalidInputError):
        assemble_sequence([1], [12], np.zeros(6), cfg)
    with pytest.raises(InvalidInputError):
        assemble_sequence([1], [1], np.zeros(5), cfg)


def test_segment_classes():
    cfg = small_cfg()
    assert cfg.segment_class(0) == "text"
    assert cfg.segment_class(cfg.text_vocab_size) == "speech"
    assert cfg.segment_class(cfg.eos) == "special"
    with pytest.raises(InvalidInputError):
        cfg.segment_class(cfg.vocab_size)


# -- parameter count ------------------------------------------------------------


def count_by_enumeration(cfg):
    return sum(int(np.prod(s)) for s in cfg.parameter_shapes().values())


def test_parameter_count_matches_tensor_shapes():
    for cfg in (TINY, small_cfg(), LmConfig()):
        params = init_params(cfg, np.random.default_rng(0))
        assert sum(p.size for p in params.values()) == cfg.parameter_count() == count_by_enumeration(cfg)


def test_large_configuration_is_about_410m():
    cfg = LmConfig.large_scale()
    assert count_by_enumeration(cfg) == cfg.parameter_count()
    assert abs(cfg.parameter_count() - 410e6) / 410e6 < 0.02


# -- loss -----------------------------------------------------------------------


def test_zero_head_gives_uniform_loss():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(0), np.float64)
    N, M = 4, 6
    lay = assemble_sequence(list(range(N)), list(range(M)), np.ones(6), cfg)
    expected = (N + 1) * np.log(cfg.text_vocab_size + 1) + (M + 1) * np.log(cfg.speech_vocab_size + 1)
    assert lm_loss(lay, params, cfg).item() == pytest.approx(expected, rel=1e-12)


def test_text_weight_scales_only_text_terms():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(0), np.float64)
    lay = assemble_sequence([1, 2], [3, 4, 5], np.ones(6), cfg)
    full = lm_loss(lay, params, cfg, text_weight=1.0).item()
    speech_only = lm_loss(lay, params, cfg, text_weight=0.0).item()
    assert speech_only == pytest.approx(4 * np.log(13), rel=1e-12)
    assert full - speech_only == pytest.approx(3 * np.log(31), rel=1e-12)


def test_batch_loss_is_mean_of_sequence_losses():
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    params = init_params(cfg, rng, np.float64, zero_head=False)
    lays = [assemble_sequence([1, 2, 3], [4, 5], rng.normal(size=6), cfg),
            assemble_sequence([9], [1, 1, 2, 3, 5], rng.normal(size=6), cfg)]
    single = [lm_loss(lay, params, cfg).item() for lay in lays]
    assert batch_loss(lays, params, cfg).item() == pytest.approx(np.mean(single), rel=1e-10)


def test_causality_future_tokens_do_not_change_earlier_losses():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    params = init_params(cfg, rng, np.float64, zero_head=False)
    e = rng.normal(size=6)
    a = assemble_sequence([1, 2, 3], [4, 5, 6, 7, 8], e, cfg)
    b = assemble_sequence([1, 2, 3], [4, 5, 6, 9, 10], e, cfg)
    rows_a, nll_a = token_losses(params, cfg, [a])
    rows_b, nll_b = token_losses(params, cfg, [b])
    assert rows_a.tolist() == rows_b.tolist()
    # the first differing input sits at packed position 10; row 9 predicts it
    earlier = rows_a < 9
    np.testing.assert_array_equal(nll_a[earlier], nll_b[earlier])
    logits_a, _ = forward_logits(params, cfg, [a])
    logits_b, _ = forward_logits(params, cfg, [b])
    np.testing.assert_array_equal(logits_a.data[:10], logits_b.data[:10])
    assert np.max(np.abs(logits_a.data[10:] - logits_b.data[10:])) > 0


def test_packed_sequences_do_not_see_each_other():
    cfg = small_cfg()
    rng = np.random.default_rng(3)
    params = init_params(cfg, rng, np.float64, zero_head=False)
    a = assemble_sequence([1, 2], [3, 4], rng.normal(size=6), cfg)
    b = assemble_sequence([5, 6, 7], [8], rng.normal(size=6), cfg)
    alone, _ = forward_logits(params, cfg, [b])
    packed, _ = forward_logits(params, cfg, [a, b])
    np.testing.assert_allclose(packed.data[len(a):], alone.data, atol=1e-12)


def test_reference_embedding_changes_predictions():
    cfg = small_cfg()
    rng = np.random.default_rng(4)
    params = init_params(cfg, rng, np.float64, zero_head=False)
    a, _ = forward_logits(params, cfg, [assemble_sequence([1], [2], np.zeros(6), cfg)])
    b, _ = forward_logits(params, cfg, [assemble_sequence([1], [2], np.ones(6), cfg)])
    assert np.max(np.abs(a.data - b.data)) > 1e-6


def test_tiny_model_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    params = init_params(TINY, rng, np.float64, init_std=0.5, zero_head=False)
    lays = [assemble_sequence([0, 3, 4], [1, 2, 3], rng.normal(size=3), TINY),
            assemble_sequence([2], [0, 0], rng.normal(size=3), TINY)]
    err = grad_check(lambda: batch_loss(lays, params, TINY), params.values(), eps=1e-6)
    assert err < 1e-4


def test_accumulation_matches_full_batch():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    lays = [assemble_sequence(list(rng.integers(0, 30, 3)), list(rng.integers(0, 12, 5)),
                              rng.normal(size=6), cfg) for _ in range(4)]

    def run(chunks, target):
        params = init_params(cfg, np.random.default_rng(7), np.float64, zero_head=False)
        opt = Adam(params.values(), lr=1e-3, accumulation_target=target)
        for _ in range(3):
            for chunk in chunks:
                with Tape() as tape:
                    loss = batch_loss(chunk, params, cfg)
                opt.zero_grad()
                tape.backward(loss)
                opt.accumulate_and_step()
        return params

    full = run([lays], 1)
    accumulated = run([[lay] for lay in lays], 4)
    for name in full:
        np.testing.assert_allclose(accumulated[name].data, full[name].data, atol=1e-6, rtol=0)


# -- generation -----------------------------------------------------------------


def test_generation_respects_max_new_and_speech_range():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(8), zero_head=False)
    out = generate([1, 2], np.zeros(6), params, cfg, Sampling("top_k", 4, 1.0, 5), np.random.default_rng(0))
    assert len(out) <= 5
    assert all(0 <= s < cfg.speech_vocab_size for s in out)


def test_generation_prompt_too_long():
    cfg = small_cfg(max_sequence_len=12)
    params = init_params(cfg, np.random.default_rng(8))
    with pytest.raises(SequenceTooLongError):
        generate([1] * 6, np.zeros(6), params, cfg, Sampling(max_new=8))


def test_top_k_sampling_is_seed_deterministic():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(9), zero_head=False)
    s = Sampling("top_k", 8, 0.8, 10)
    a = generate([3], np.ones(6), params, cfg, s, np.random.default_rng(42))
    b = generate([3], np.ones(6), params, cfg, s, np.random.default_rng(42))
    assert a == b


def test_sampling_mode_validation():
    with pytest.raises(InvalidInputError):
        Sampling("beam")


# -- estimator ------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_data():
    rng = np.random.default_rng(10)
    X = [(list(rng.integers(0, 512, size=5)), rng.normal(size=128)) for _ in range(8)]
    y = [list(rng.integers(0, 256, size=16)) for _ in range(8)]
    return X, y


def test_overfits_eight_utterances(overfit_data):
    X, y = overfit_data
    lm = SpeechLM(max_steps=2000, early_stop_accuracy=1.0, random_state=0).fit(X, y)
    assert lm.loss_curve_[-1] < lm.loss_curve_[0]
    assert lm.score(X, y) >= 0.95
    exact = sum(p == t for p, t in zip(lm.predict(X), y))
    assert exact >= 6


def test_fit_skips_oversized_items(overfit_data, caplog):
    X, y = overfit_data
    X = X[:2] + [(list(range(40)), np.zeros(128))]
    y = y[:2] + [list(range(30))]
    lm = SpeechLM(max_sequence_len=48, max_steps=2, random_state=0).fit(X, y)
    assert lm.skipped_ == [2]
    assert any("skipping" in r.message for r in caplog.records)


def test_state_dict_round_trip(overfit_data):
    X, y = overfit_data
    lm = SpeechLM(max_steps=3, random_state=1).fit(X, y)
    clone = SpeechLM.from_state_dict(lm.get_params(), lm.state_dict())
    assert clone.predict(X[:2]) == lm.predict(X[:2])
    with pytest.raises(InvalidInputError):
        SpeechLM.from_state_dict(lm.get_params(), {"bogus": np.zeros(1)})


def test_two_layer_model_gradients_at_default_eps():
    cfg = LmConfig(n_layers=2, n_heads=2, d_model=16, text_vocab_size=10, speech_vocab_size=6,
                   ref_dim=4, max_sequence_len=16)
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng, np.float64, init_std=0.3, zero_head=False)
    lays = [assemble_sequence([1, 4, 9], [2, 5, 0], rng.normal(size=4), cfg),
            assemble_sequence([7], [3, 3], rng.normal(size=4), cfg)]
    assert grad_check(lambda: batch_loss(lays, params, cfg), params.values(), eps=1e-5) < 1e-4


def test_swapping_positional_tables_changes_speech_logits():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(12), np.float64, zero_head=False)
    lay = assemble_sequence([1, 2, 3], [4, 5, 6], np.ones(6), cfg)
    before, _ = forward_logits(params, cfg, [lay], rows=lay.speech_loss_rows)
    params["pos_text"], params["pos_speech"] = params["pos_speech"], params["pos_text"]
    after, _ = forward_logits(params, cfg, [lay], rows=lay.speech_loss_rows)
    assert np.max(np.abs(before.data - after.data)) > 1e-6


def test_zero_temperature_top_k_equals_greedy():
    cfg = small_cfg()
    params = init_params(cfg, np.random.default_rng(13), zero_head=False)
    greedy = generate([4, 5], np.ones(6), params, cfg, Sampling("greedy", max_new=8))
    cold = generate([4, 5], np.ones(6), params, cfg, Sampling("top_k", 8, 0.0, 8), np.random.default_rng(1))
    assert greedy == cold
    assert greedy == generate([4, 5], np.ones(6), params, cfg, Sampling("greedy", max_new=8))
