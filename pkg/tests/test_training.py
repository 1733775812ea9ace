import dataclasses

import numpy as np
import pytest

from bt_confidence.confidence import ConfidenceRecord
from bt_confidence.data import EOS, Provenance, SentencePair, TextCodec, encode_corpus
from bt_confidence.decode import DecodeConfig, greedy_decode
from bt_confidence.errors import ConfigError, DataError
from bt_confidence.evaluation import bleu
from bt_confidence.model import ModelConfig, forward_batch, init_params, smoothed_nll
from bt_confidence.numerics import RngStream
from bt_confidence.toy_data import make_copy_task
from bt_confidence.training import (Trainer, TrainingConfig, make_batch, mix_corpora, parse_ratio, train_mle,
                                    weighted_loss)


def _authentic(n, offset=0):
    return [SentencePair(offset + i, [4 + i % 4, 5], [6, 4 + i % 3]) for i in range(n)]


def _synthetic(n, offset=100, sentence=0.5, words=None):
    pairs = []
    for i in range(n):
        source = [5 + i % 3, 4, 6]
        record = ConfidenceRecord(offset + i, "cev", sentence, words or [1.0, 0.5, 0.25])
        pairs.append(SentencePair(offset + i, source, [4, 7], Provenance.SYNTHETIC, confidence=record))
    return pairs


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(batch_tokens=0)
    with pytest.raises(ConfigError):
        TrainingConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({"lr": 0.1})
    assert TrainingConfig(word_confidence=True).uses_confidence
    assert not TrainingConfig().uses_confidence


def test_make_batch_layout():
    batch = make_batch(_authentic(2) + _synthetic(1), sentence_confidence=True, word_confidence=True)
    assert batch.tgt_in[:, 0].tolist() == [1, 1, 1]
    assert batch.gold[0].tolist() == [6, 4, EOS]
    assert batch.sentence_weights.tolist() == [1.0, 1.0, 0.5]
    assert batch.word_confidence[0].tolist() == [1.0, 1.0, 0.0]
    assert batch.word_confidence[2].tolist() == [1.0, 0.5, 0.25]
    assert batch.n_tokens == 9


def test_make_batch_requires_confidence_for_synthetic():
    bare = [SentencePair(1, [4], [5], Provenance.SYNTHETIC)]
    make_batch(bare)
    with pytest.raises(DataError):
        make_batch(bare, sentence_confidence=True)
    mismatched = _synthetic(1, words=[1.0])
    with pytest.raises(DataError):
        make_batch(mismatched, word_confidence=True)


def test_unit_weights_match_smoothed_nll(tiny_config, tiny_params):
    pairs = _authentic(3)
    batch = make_batch(pairs, sentence_confidence=True, word_confidence=True)
    loss = weighted_loss(batch, tiny_params, tiny_config).item()
    logprobs = forward_batch(tiny_params, tiny_config, batch.src_ids, batch.tgt_in)
    baseline = smoothed_nll(logprobs, batch.gold, tiny_config.label_smoothing, batch.tgt_mask).item()
    assert loss == pytest.approx(baseline, rel=1e-12)


def test_sentence_weights_scale_losses(tiny_config, tiny_params):
    pairs = _authentic(1) + _synthetic(1, sentence=0.5)
    full = make_batch(pairs)
    per_pair = [weighted_loss(make_batch([p]), tiny_params, tiny_config).item() * make_batch([p]).n_tokens
                for p in pairs]
    weighted = weighted_loss(make_batch(pairs, sentence_confidence=True), tiny_params, tiny_config).item()
    assert weighted == pytest.approx((per_pair[0] + 0.5 * per_pair[1]) / full.n_tokens)


def test_weight_out_of_range_rejected(tiny_config, tiny_params):
    batch = make_batch(_authentic(2))
    bad = dataclasses.replace(batch, sentence_weights=np.array([1.0, 1.5]))
    with pytest.raises(DataError):
        weighted_loss(bad, tiny_params, tiny_config)


def test_parse_ratio():
    assert parse_ratio("1:2") == 2.0
    assert parse_ratio((2, 1)) == 0.5
    assert parse_ratio(0.0) == 0.0
    with pytest.raises(ConfigError):
        parse_ratio("1:2:3")
    with pytest.raises(ConfigError):
        parse_ratio("0:1")


def test_mix_corpora_counts_and_shuffle():
    authentic = _authentic(10)
    synthetic = _synthetic(30)
    mixed = mix_corpora(authentic, synthetic, ratio="1:2", seed=3, epoch=0)
    assert len(mixed) == 30
    assert sum(p.is_synthetic for p in mixed) == 20
    assert {p.pair_id for p in mixed if not p.is_synthetic} == set(range(10))
    again = mix_corpora(authentic, synthetic, ratio="1:2", seed=3, epoch=0)
    assert [p.pair_id for p in again] == [p.pair_id for p in mixed]
    other = mix_corpora(authentic, synthetic, ratio="1:2", seed=3, epoch=1)
    assert [p.pair_id for p in other] != [p.pair_id for p in mixed]


def test_mix_corpora_oversamples_small_synthetic():
    mixed = mix_corpora(_authentic(10), _synthetic(4), ratio=1.0, seed=0)
    assert sum(p.is_synthetic for p in mixed) == 10
    assert mix_corpora(_authentic(5), [], ratio=1.0) == _authentic(5)


def test_mix_corpora_requires_confidence():
    bare = [SentencePair(100, [4], [5], Provenance.SYNTHETIC)]
    with pytest.raises(DataError):
        mix_corpora(_authentic(2), bare, ratio="1:1", require_confidence=True)


def test_training_is_reproducible(tiny_config):
    tc = TrainingConfig(max_steps=4, batch_tokens=16, warmup_steps=2, log_every=0, seed=3)
    corpus = _authentic(8)
    a = train_mle(corpus, tiny_config, tc, progress=False)
    b = train_mle(corpus, tiny_config, tc, progress=False)
    assert a.step == 4
    assert a.content_hash() == b.content_hash()


def test_trainer_history_and_log(tmp_path, tiny_config):
    tc = TrainingConfig(max_steps=3, batch_tokens=16, warmup_steps=2, log_every=1)
    trainer = Trainer(tiny_config, tc, progress=False)
    checkpoint = trainer.fit(lambda epoch: _authentic(6), checkpoint_dir=None)
    frame = trainer.history_frame()
    assert frame["step"].tolist() == [1, 2, 3]
    assert checkpoint.metadata["final_loss"] == pytest.approx(frame["loss"].iloc[-1])
    trainer.save_log(tmp_path / "log" / "train.csv")
    assert (tmp_path / "log" / "train.csv").read_text().startswith("step,epoch,loss")


def test_training_rejects_empty_corpus(tiny_config):
    with pytest.raises(DataError):
        train_mle([], tiny_config, TrainingConfig(max_steps=1), progress=False)


@pytest.mark.slow
def test_copy_task_overfits():
    """在复制任务上训练足够步数后，损失接近 0，贪心解码逐句复现训练集"""
    source, target = make_copy_task(n=50, vocab_size=6, lengths=(2, 4), seed=1)
    codec = TextCodec.fit(source, merge_count=30)
    corpus = encode_corpus(source, target, codec, codec)
    config = ModelConfig(src_vocab_size=len(codec.vocab), tgt_vocab_size=len(codec.vocab), d_model=32, d_ff=64,
                         n_layers=1, n_heads=2, max_len=8)
    tc = TrainingConfig(max_steps=1500, batch_tokens=64, warmup_steps=40, lr_scale=0.5, dropout=0.0,
                        label_smoothing=0.0, log_every=0)
    checkpoint = train_mle(corpus, config, tc, progress=False)
    assert checkpoint.metadata["final_loss"] < 0.1
    decode_config = DecodeConfig(mode="greedy", max_len=8)
    outputs = [greedy_decode(p.source, checkpoint.params, checkpoint.config, decode_config).tokens for p in corpus]
    assert outputs == [p.target for p in corpus]
    report = bleu([codec.decode(ids) for ids in outputs], [codec.decode(p.target) for p in corpus])
    assert report.score == pytest.approx(100.0)
