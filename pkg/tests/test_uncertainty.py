import dataclasses

import numpy as np
import pytest

from bt_confidence.confidence import cev_confidence, exp_confidence, ptp, var_confidence
from bt_confidence.data import EOS
from bt_confidence.decode import DecodeConfig, greedy_decode
from bt_confidence.errors import ConfigError, DataError, DimensionError
from bt_confidence.model import forward_logprobs, init_params
from bt_confidence.numerics import RngStream
from bt_confidence.uncertainty import (McSampleSet, expectation, mc_forward, read_score_dump, score_dump_record,
                                       summarize, variance, write_score_dump)


def test_expectation_and_variance_hand_values():
    samples = McSampleSet.from_word_probabilities(np.array([[0.2], [0.4], [0.6]]))
    e_sent, e_tok = expectation(samples)
    v_sent, v_tok = variance(samples)
    assert e_sent == pytest.approx(0.4)
    assert v_sent == pytest.approx(0.08 / 3)
    np.testing.assert_allclose(e_tok, [0.4])
    np.testing.assert_allclose(v_tok, [0.08 / 3])


def test_expectation_averages_probabilities_not_logs():
    samples = McSampleSet.from_word_probabilities(np.array([[0.1], [0.9]]))
    e, _ = expectation(samples)
    assert e == pytest.approx(0.5)
    assert e != pytest.approx(np.sqrt(0.1 * 0.9))


def test_identical_samples_have_zero_variance():
    samples = McSampleSet.from_word_probabilities(np.full((5, 3), 0.3))
    stats = summarize(samples)
    assert stats.sentence_variance == 0.0
    np.testing.assert_array_equal(stats.token_variances, 0.0)
    assert stats.sentence_expectation == pytest.approx(0.3 ** 3)


def test_variance_bounded_by_expectation():
    rng = RngStream(6)
    probs = rng.random((20, 4))
    stats = summarize(McSampleSet.from_word_probabilities(probs))
    assert 0.0 <= stats.sentence_variance <= stats.sentence_expectation <= 1.0
    assert np.all(stats.token_variances >= 0.0)
    assert np.all(stats.token_variances <= stats.token_expectations)


def test_sample_set_validation():
    with pytest.raises(DimensionError):
        McSampleSet(np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionError):
        McSampleSet(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(DataError):
        McSampleSet(np.full((1, 2), 0.5), np.array([1.0]))


def test_mc_forward_with_zero_dropout_matches_plain_forward(tiny_config, tiny_params):
    y, x_hat = [4, 5, 6], [5, 7, EOS]
    samples = mc_forward(y, x_hat, tiny_params, tiny_config, dropout_rate=0.0, k=4, rng=RngStream(0))
    plain = forward_logprobs(y, x_hat, tiny_params, tiny_config).numpy()
    assert samples.k == 4 and samples.length == 3
    for row in samples.word_logprobs:
        np.testing.assert_allclose(row, plain)
    stats = summarize(samples)
    assert stats.sentence_variance == 0.0
    assert stats.sentence_expectation == pytest.approx(np.exp(plain.sum()))


def test_mc_forward_is_reproducible_and_thread_independent(tiny_config, tiny_params):
    y, x_hat = [4, 5, 6], [5, 7, EOS]
    a = mc_forward(y, x_hat, tiny_params, tiny_config, 0.3, 6, RngStream(8))
    b = mc_forward(y, x_hat, tiny_params, tiny_config, 0.3, 6, RngStream(8), threads=3)
    np.testing.assert_array_equal(a.word_logprobs, b.word_logprobs)
    # dropout 开启时不同前向的概率应当不同
    assert summarize(a).sentence_variance > 0.0
    np.testing.assert_allclose(a.word_logprobs.sum(axis=1), a.sentence_logprobs)


def test_mc_forward_length_normalization(tiny_config, tiny_params):
    y, x_hat = [4, 5], [6, 7, 4, EOS]
    raw = mc_forward(y, x_hat, tiny_params, tiny_config, 0.2, 3, RngStream(1))
    norm = mc_forward(y, x_hat, tiny_params, tiny_config, 0.2, 3, RngStream(1), length_normalize=True)
    np.testing.assert_allclose(norm.sentence_logprobs, raw.sentence_logprobs / 4)
    assert norm.length_normalized


def test_mc_forward_errors(tiny_config, tiny_params):
    with pytest.raises(DataError):
        mc_forward([4], [], tiny_params, tiny_config, 0.1, 3, RngStream(0))
    with pytest.raises(ConfigError):
        mc_forward([4], [5], tiny_params, tiny_config, 0.1, 0, RngStream(0))


def test_score_dump_roundtrip(tmp_path):
    stats = summarize(McSampleSet.from_word_probabilities(np.array([[0.2, 0.5], [0.4, 0.5]])))
    path = tmp_path / "dump" / "uncertainty.jsonl"
    write_score_dump(path, [score_dump_record(3, stats, ptp=0.1)])
    write_score_dump(path, [score_dump_record(4, stats, ptp=0.2)], append=True)
    records = read_score_dump(path)
    assert [r["pair_id"] for r in records] == [3, 4]
    assert records[0]["K"] == 2
    assert records[1]["ptp"] == pytest.approx(0.2)
    assert records[0]["token_expectations"] == pytest.approx([0.3, 0.5])


def _random_probabilities(rng):
    """不同形状的概率样本：均匀、贴近 0/1 的 Beta 分布以及全部相同的列"""
    k, length = int(rng.integers(1, 31)), int(rng.integers(1, 9))
    kind = int(rng.integers(0, 4))
    if kind == 0:
        probs = rng.uniform(1e-6, 1.0, size=(k, length))
    elif kind == 1:
        probs = np.clip(rng.beta(0.2, 0.2, size=(k, length)), 1e-12, 1.0)
    elif kind == 2:
        probs = np.tile(rng.uniform(1e-3, 1.0, size=length), (k, 1))
    else:
        probs = np.where(rng.random((k, length)) < 0.5, 1.0, rng.uniform(0.9, 1.0, size=(k, length)))
    return probs


def test_statistics_bounds_on_random_sample_sets():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        samples = McSampleSet.from_word_probabilities(_random_probabilities(rng))
        stats = summarize(samples)
        assert 0.0 <= stats.sentence_variance <= stats.sentence_expectation <= 1.0
        assert np.all(0.0 <= stats.token_variances)
        assert np.all(stats.token_variances <= stats.token_expectations)
        assert np.all(stats.token_expectations <= 1.0)


def test_variance_matches_two_pass_population_formula():
    rng = np.random.default_rng(11)
    for _ in range(200):
        samples = McSampleSet.from_word_probabilities(_random_probabilities(rng))
        stats = summarize(samples)
        p = samples.sentence_probs
        assert stats.sentence_variance == pytest.approx(np.mean((p - p.mean()) ** 2), abs=1e-10)
        w = samples.word_probs
        np.testing.assert_allclose(stats.token_variances, np.mean((w - w.mean(axis=0)) ** 2, axis=0), atol=1e-10)


def test_statistics_ignore_sample_order():
    rng = np.random.default_rng(12)
    for _ in range(100):
        samples = McSampleSet.from_word_probabilities(_random_probabilities(rng))
        order = rng.permutation(samples.k)
        shuffled = McSampleSet(samples.word_logprobs[order], samples.sentence_logprobs[order])
        a, b = summarize(samples), summarize(shuffled)
        assert a.sentence_expectation == b.sentence_expectation
        assert a.sentence_variance == b.sentence_variance
        np.testing.assert_array_equal(a.token_expectations, b.token_expectations)
        np.testing.assert_array_equal(a.token_variances, b.token_variances)


def test_statistics_bounds_on_model_samples(tiny_config):
    rng = np.random.default_rng(13)
    for run in range(100):
        params = init_params(tiny_config, RngStream(run % 10))
        y = [int(t) for t in rng.integers(4, tiny_config.src_vocab_size, size=int(rng.integers(1, 6)))]
        x_hat = [int(t) for t in rng.integers(4, tiny_config.tgt_vocab_size, size=int(rng.integers(0, 5)))] + [EOS]
        samples = mc_forward(y, x_hat, params, tiny_config, float(rng.uniform(0.05, 0.5)), int(rng.integers(2, 7)),
                             RngStream(run))
        stats = summarize(samples)
        assert 0.0 <= stats.sentence_variance <= stats.sentence_expectation <= 1.0
        assert np.all(0.0 <= stats.token_variances)
        assert np.all(stats.token_variances <= stats.token_expectations)
        assert np.all(stats.token_expectations <= 1.0)


def test_zero_dropout_reduces_measures_to_ptp(tiny_config, tiny_params):
    """dropout 为 0 时每次前向完全相同：EXP 与 PTP 一致，VAR、CEV 恒为 1"""
    for src in ([4], [5, 6], [7, 8, 4, 5]):
        hyp = greedy_decode(src, tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=5))
        samples = mc_forward(src, hyp.scored_tokens, tiny_params, tiny_config, 0.0, 5, RngStream(3))
        for row in samples.word_logprobs:
            np.testing.assert_array_equal(row, hyp.step_logprobs)
        stats = summarize(samples)
        reference = ptp(hyp.step_logprobs)
        exp = exp_confidence(stats)
        np.testing.assert_array_max_ulp(exp.sentence, reference.sentence, maxulp=1)
        np.testing.assert_array_max_ulp(exp.words, reference.words, maxulp=1)
        for measure in (var_confidence(stats), cev_confidence(stats)):
            assert measure.sentence == 1.0
            np.testing.assert_array_equal(measure.words, 1.0)
