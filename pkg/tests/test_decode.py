import itertools

import numpy as np
import pytest

from bt_confidence.data import EOS
from bt_confidence.decode import (DecodeConfig, DecodeMode, Hypothesis, beam_decode, greedy_decode,
                                  hypothesis_score, length_penalty, sample_decode, sample_token,
                                  translate_corpus)
from bt_confidence.errors import ConfigError
from bt_confidence.model import ModelConfig, forward_logprobs, init_params
from bt_confidence.numerics import RngStream


def test_decode_config_parsing():
    assert DecodeConfig(mode="search").mode == DecodeMode.BEAM
    assert DecodeConfig.from_dict(DecodeConfig(mode="sample").to_dict()).mode == DecodeMode.SAMPLE
    with pytest.raises(ConfigError):
        DecodeConfig(mode="nucleus")
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ConfigError):
        DecodeConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        DecodeConfig.from_dict({"beam": 4})


def test_length_penalty_values():
    assert length_penalty(1, 0.6) == pytest.approx(1.0)
    assert length_penalty(7, 1.0) == pytest.approx(2.0)
    assert hypothesis_score(-2.0, 7, 1.0) == pytest.approx(-1.0)


def test_greedy_step_logprobs_match_forward(tiny_config, tiny_params):
    src = [4, 5, 6]
    hyp = greedy_decode(src, tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=6))
    assert len(hyp.step_logprobs) == len(hyp.scored_tokens)
    expected = forward_logprobs(src, hyp.scored_tokens, tiny_params, tiny_config).numpy()
    np.testing.assert_allclose(hyp.step_logprobs, expected)
    assert all(t >= 4 or t == EOS for t in hyp.tokens)


def test_truncated_hypothesis_has_no_eos(tiny_config, tiny_params):
    hyp = greedy_decode([4, 5], tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=1))
    if hyp.truncated:
        assert len(hyp.tokens) == 1
        assert hyp.scored_tokens == hyp.tokens
    else:
        assert hyp.tokens == [] and hyp.scored_tokens == [EOS]


def test_beam_of_one_equals_greedy(tiny_config, tiny_params):
    src = [6, 5, 4, 7]
    greedy = greedy_decode(src, tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=6))
    beam = beam_decode(src, tiny_params, tiny_config, DecodeConfig(beam_size=1, max_len=6))
    assert beam.tokens == greedy.tokens
    assert beam.finished == greedy.finished


def test_beam_never_loses_to_greedy(tiny_config, tiny_params):
    for src in ([4], [5, 6], [7, 8, 4]):
        greedy = greedy_decode(src, tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=6))
        beam = beam_decode(src, tiny_params, tiny_config, DecodeConfig(beam_size=3, max_len=6))
        assert beam.score >= greedy.score - 1e-12


def test_full_beam_finds_best_short_sequence():
    """词表只有一个内容词时，完整束搜索等价于穷举所有长度 ≤ 2 的序列"""
    cfg = ModelConfig(src_vocab_size=5, tgt_vocab_size=5, d_model=8, d_ff=8, n_layers=1, n_heads=1, max_len=2)
    params = init_params(cfg, RngStream(11))
    src = [4, 4]
    alpha = 0.6
    candidates = []
    for n in range(0, 3):
        for body in itertools.product([4], repeat=n):
            finished = n < 2
            scored = list(body) + ([EOS] if finished else [])
            if not scored:
                continue
            lp = float(np.sum(forward_logprobs(src, scored, params, cfg).numpy()))
            candidates.append((hypothesis_score(lp, len(scored), alpha), list(body)))
    best = max(candidates, key=lambda c: c[0])
    hyp = beam_decode(src, params, cfg, DecodeConfig(beam_size=4, max_len=2, length_penalty=alpha))
    assert hyp.score == pytest.approx(best[0])
    assert hyp.tokens == best[1]


def test_sample_token_respects_distribution():
    logprobs = np.log(np.array([0.0, 0.0, 0.7, 0.0, 0.3]) + 1e-300)
    rng = RngStream(2)
    draws = [sample_token(logprobs, 1.0, rng) for _ in range(2000)]
    counts = np.bincount(draws, minlength=5)
    assert counts[0] == counts[1] == counts[3] == 0
    assert abs(counts[2] / 2000 - 0.7) < 0.05


def test_sample_token_truncation():
    logprobs = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
    rng = RngStream(3)
    assert {sample_token(logprobs, 1.0, rng, top_k=1) for _ in range(50)} == {3}
    assert {sample_token(logprobs, 1.0, rng, top_p=0.5) for _ in range(200)} <= {2, 3}


def test_sampling_is_reproducible(tiny_config, tiny_params):
    cfg = DecodeConfig(mode="sample", max_len=6, seed=4)
    a = sample_decode([4, 5, 6], tiny_params, tiny_config, cfg, RngStream(4, 1))
    b = sample_decode([4, 5, 6], tiny_params, tiny_config, cfg, RngStream(4, 1))
    assert a.tokens == b.tokens
    assert a.step_logprobs == b.step_logprobs


def test_translate_corpus_independent_of_threads(tiny_config, tiny_params):
    sources = [[4], [5, 6], [7, 8, 4], [6, 6]]
    cfg = DecodeConfig(mode="sample", max_len=5, seed=9)
    serial = translate_corpus(sources, tiny_params, tiny_config, cfg, threads=1, progress=False)
    parallel = translate_corpus(sources, tiny_params, tiny_config, cfg, threads=3, progress=False)
    assert [h.tokens for h in serial] == [h.tokens for h in parallel]


def test_hypothesis_properties():
    hyp = Hypothesis(tokens=[4, 5], step_logprobs=[np.log(0.5), np.log(0.5), np.log(0.8)], finished=True)
    assert hyp.scored_tokens == [4, 5, EOS]
    assert hyp.logprob == pytest.approx(np.log(0.2))
    np.testing.assert_allclose(hyp.probabilities, [0.5, 0.5, 0.8])


def _exhaustive_candidates(src, params, cfg, max_len, alpha):
    """列出所有长度 ≤ max_len 的输出及其长度惩罚后的得分"""
    candidates = []
    content = range(4, cfg.tgt_vocab_size)
    for n in range(0, max_len + 1):
        for body in itertools.product(content, repeat=n):
            finished = n < max_len
            scored = list(body) + ([EOS] if finished else [])
            lp = float(np.sum(forward_logprobs(src, scored, params, cfg).numpy()))
            candidates.append((hypothesis_score(lp, len(scored), alpha), list(body)))
    return candidates


@pytest.mark.parametrize("seed", range(6))
def test_wide_beam_matches_exhaustive_search(seed):
    """三个内容词、最大长度 3：27 个满长输出加 13 个提前结束的输出，足够宽的束等价于穷举"""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(src_vocab_size=7, tgt_vocab_size=7, d_model=8, d_ff=8, n_layers=1, n_heads=2, max_len=3)
    params = init_params(cfg, RngStream(seed))
    src = [int(t) for t in rng.integers(4, 7, size=int(rng.integers(1, 4)))]
    alpha = float(rng.choice([0.0, 0.6, 1.0]))
    candidates = _exhaustive_candidates(src, params, cfg, 3, alpha)
    assert len(candidates) == 40 and sum(len(body) == 3 for _, body in candidates) == 27
    best = max(candidates, key=lambda c: c[0])
    hyp = beam_decode(src, params, cfg, DecodeConfig(beam_size=64, max_len=3, length_penalty=alpha))
    assert hyp.score == pytest.approx(best[0])
    assert hyp.tokens == best[1]


@pytest.mark.parametrize("seed", range(5))
def test_beam_score_bounded_by_greedy_and_exhaustive_optimum(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = ModelConfig(src_vocab_size=7, tgt_vocab_size=7, d_model=8, d_ff=8, n_layers=1, n_heads=2, max_len=3)
    params = init_params(cfg, RngStream(100 + seed))
    src = [int(t) for t in rng.integers(4, 7, size=int(rng.integers(1, 4)))]
    optimum = max(score for score, _ in _exhaustive_candidates(src, params, cfg, 3, 0.6))
    greedy = greedy_decode(src, params, cfg, DecodeConfig(mode="greedy", max_len=3))
    scores = [beam_decode(src, params, cfg, DecodeConfig(beam_size=k, max_len=3)).score for k in range(1, 7)]
    assert scores[0] == greedy.score
    for score in scores:
        assert greedy.score - 1e-12 <= score <= optimum + 1e-12


def test_near_zero_temperature_sampling_is_greedy(tiny_config, tiny_params):
    rng = np.random.default_rng(7)
    for seed in range(100):
        src = [int(t) for t in rng.integers(4, tiny_config.src_vocab_size, size=int(rng.integers(1, 5)))]
        greedy = greedy_decode(src, tiny_params, tiny_config, DecodeConfig(mode="greedy", max_len=5))
        cfg = DecodeConfig(mode="sample", temperature=1e-6, seed=seed, max_len=5)
        sampled = sample_decode(src, tiny_params, tiny_config, cfg)
        assert sampled.tokens == greedy.tokens and sampled.finished == greedy.finished
