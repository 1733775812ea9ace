import json

import numpy as np
import pytest

from bt_confidence.confidence import (FLAG_EMPTY, FLAG_ZERO_EXPECTATION, ConfidenceRecord, MeasureConfig,
                                      MeasureKind, apply_measure, attach_confidences, cev_confidence,
                                      exp_confidence, ptp, read_confidence_file, score_corpus,
                                      score_corpus_to_file, var_confidence)
from bt_confidence.data import Provenance, SentencePair
from bt_confidence.errors import ConfigError, DataError
from bt_confidence.model import ModelCheckpoint
from bt_confidence.numerics import RngStream
from bt_confidence.uncertainty import UncertaintyStats, read_score_dump


def _stats(e=0.5, var=0.1, e_tok=(0.9, 0.5), var_tok=(0.01, 0.1)):
    return UncertaintyStats(k=20, sentence_expectation=e, sentence_variance=var,
                            token_expectations=np.array(e_tok), token_variances=np.array(var_tok))


def test_var_and_cev_hand_values():
    stats = _stats()
    var = var_confidence(stats, alpha=2.0)
    assert var.sentence == pytest.approx(0.81)
    np.testing.assert_allclose(var.words, [0.99 ** 2, 0.81])
    cev = cev_confidence(stats, beta=2.0)
    assert cev.sentence == pytest.approx(0.64)
    np.testing.assert_allclose(cev.words, [(1 - 0.01 / 0.9) ** 2, 0.64])
    assert cev.flags == ()


def test_exp_passes_through_expectation():
    conf = exp_confidence(_stats())
    assert conf.sentence == 0.5
    np.testing.assert_allclose(conf.words, [0.9, 0.5])


def test_ptp_product_of_step_probabilities():
    conf = ptp(np.log([0.5, 0.5]))
    assert conf.sentence == pytest.approx(0.25)
    np.testing.assert_allclose(conf.words, [0.5, 0.5])


def test_cev_zero_expectation_is_flagged():
    conf = cev_confidence(_stats(e=0.0, var=0.0, e_tok=(0.0, 0.4), var_tok=(0.0, 0.0)))
    assert conf.sentence == 0.0
    np.testing.assert_allclose(conf.words, [0.0, 1.0])
    assert FLAG_ZERO_EXPECTATION in conf.flags


def test_measures_stay_in_unit_interval():
    rng = RngStream(4)
    for _ in range(20):
        e = rng.random(5)
        var = e * rng.random(5) * e
        stats = UncertaintyStats(3, float(e[0]), float(var[0]), e, var)
        for conf in (var_confidence(stats, 3.0), cev_confidence(stats, 0.5), exp_confidence(stats)):
            assert 0.0 <= conf.sentence <= 1.0
            assert np.all((conf.words >= 0.0) & (conf.words <= 1.0))


def test_larger_exponent_lowers_confidence():
    stats = _stats()
    assert var_confidence(stats, 4.0).sentence < var_confidence(stats, 1.0).sentence
    assert cev_confidence(stats, 4.0).sentence < cev_confidence(stats, 1.0).sentence


def test_apply_measure_requirements():
    with pytest.raises(ConfigError):
        apply_measure(MeasureConfig(kind="ptp"))
    with pytest.raises(ConfigError):
        apply_measure(MeasureConfig(kind="cev"), step_logprobs=[-0.1])
    assert apply_measure(MeasureConfig(kind="var", alpha=2.0), _stats()).sentence == pytest.approx(0.81)


def test_measure_config_validation():
    assert MeasureConfig(kind="CEV").kind == MeasureKind.CEV
    assert not MeasureKind.PTP.needs_sampling
    with pytest.raises(ConfigError):
        MeasureConfig(kind="entropy")
    with pytest.raises(ConfigError):
        MeasureConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        MeasureConfig(k=0)
    with pytest.raises(ConfigError):
        MeasureConfig.from_dict({"kind": "cev", "gamma": 1})


def test_record_range_and_json():
    record = ConfidenceRecord(5, "cev", 0.3, [0.1, 1.0], flags=["x"])
    assert ConfidenceRecord.from_json(record.to_json()) == record
    with pytest.raises(DataError):
        ConfidenceRecord(5, "cev", 1.2, [0.1])
    unit = ConfidenceRecord.unit(1, 3)
    assert unit.sentence_confidence == 1.0 and unit.word_confidences == [1.0, 1.0, 1.0]


def _synthetic(pair_id, source, target, finished=True):
    return SentencePair(pair_id, source, target, Provenance.SYNTHETIC, finished=finished)


def test_score_corpus_records(tiny_config, tiny_params):
    checkpoint = ModelCheckpoint(tiny_config, tiny_params)
    pairs = [_synthetic(1, [4, 5, 6], [4, 5]), _synthetic(2, [], [6]), _synthetic(3, [7, 7], [5], finished=False)]
    sink = []
    records = list(score_corpus(pairs, checkpoint, MeasureConfig(kind="cev", k=3), rng=RngStream(0),
                                uncertainty_sink=sink, progress=False))
    assert [r.pair_id for r in records] == [1, 2, 3]
    assert len(records[0].word_confidences) == 3
    assert len(records[2].word_confidences) == 2
    assert records[1].sentence_confidence == 0.0 and FLAG_EMPTY in records[1].flags
    assert [d["pair_id"] for d in sink] == [1, 3]


def test_score_corpus_rejects_none_measure(tiny_config, tiny_params):
    with pytest.raises(ConfigError):
        list(score_corpus([], ModelCheckpoint(tiny_config, tiny_params), MeasureConfig(kind="none")))


def test_ptp_scoring_uses_recorded_logprobs(tiny_config, tiny_params):
    pair = SentencePair(1, [4, 5], [6], Provenance.SYNTHETIC, step_logprobs=list(np.log([0.5, 0.5, 0.5])))
    (record,) = score_corpus([pair], ModelCheckpoint(tiny_config, tiny_params), MeasureConfig(kind="ptp"),
                             progress=False)
    assert record.sentence_confidence == pytest.approx(0.125)
    assert record.word_confidences == pytest.approx([0.5, 0.5])


def test_score_corpus_to_file_resumes(tmp_path, tiny_config, tiny_params):
    checkpoint = ModelCheckpoint(tiny_config, tiny_params)
    pairs = [_synthetic(i, [4 + i % 4, 5], [6, 4]) for i in range(4)]
    measure = MeasureConfig(kind="exp", k=2)
    path = tmp_path / "conf.jsonl"
    first = score_corpus_to_file(path, pairs[:2], checkpoint, measure, RngStream(1), progress=False)
    assert sorted(first) == [0, 1]
    full = score_corpus_to_file(path, pairs, checkpoint, measure, RngStream(1),
                                uncertainty_path=tmp_path / "unc.jsonl", progress=False)
    assert sorted(full) == [0, 1, 2, 3]
    assert full[0] == first[0]
    assert len(read_confidence_file(path)) == 4
    # 第一次没有写不确定性记录，续跑时为已打分的 0、1 补齐
    assert [r["pair_id"] for r in read_score_dump(tmp_path / "unc.jsonl")] == [0, 1, 2, 3]

    fresh = score_corpus_to_file(tmp_path / "fresh.jsonl", pairs, checkpoint, measure, RngStream(1), progress=False)
    assert fresh == full


def test_scoring_resumes_after_interruption(tmp_path, tiny_config, tiny_params):
    """进程在写一行的中途被杀掉：续跑时丢弃半行，已打分的句对保留，结果与一次跑完相同"""
    checkpoint = ModelCheckpoint(tiny_config, tiny_params)
    pairs = [_synthetic(i, [4 + i % 4, 5], [6, 4]) for i in range(4)]
    measure = MeasureConfig(kind="cev", k=2)
    path, dump = tmp_path / "conf.jsonl", tmp_path / "unc.jsonl"
    score_corpus_to_file(path, pairs[:2], checkpoint, measure, RngStream(1), uncertainty_path=dump, progress=False)
    assert [r["pair_id"] for r in read_score_dump(dump)] == [0, 1]
    with open(path, "a", encoding="utf-8") as f:
        f.write('{"pair_id": 2, "sente')
    with open(dump, "a", encoding="utf-8") as f:
        f.write('{"pair_id": 2, "k"')

    assert sorted(read_confidence_file(path)) == [0, 1]
    resumed = score_corpus_to_file(path, pairs, checkpoint, measure, RngStream(1), uncertainty_path=dump,
                                   progress=False)
    fresh = score_corpus_to_file(tmp_path / "fresh.jsonl", pairs, checkpoint, measure, RngStream(1),
                                 uncertainty_path=tmp_path / "fresh_unc.jsonl", progress=False)
    assert resumed == fresh
    assert len(path.read_text(encoding="utf-8").splitlines()) == 4
    assert read_score_dump(dump) == read_score_dump(tmp_path / "fresh_unc.jsonl")


def test_confidence_file_with_corrupt_middle_line(tmp_path):
    path = tmp_path / "conf.jsonl"
    good = json.dumps(ConfidenceRecord.unit(1, 2).to_json())
    path.write_text(good + "\nnot json\n" + good + "\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_confidence_file(path)


def test_attach_confidences():
    pairs = [_synthetic(1, [4], [5]), _synthetic(2, [6], [7])]
    attached = attach_confidences(pairs, {1: ConfidenceRecord.unit(1, 1)})
    assert attached[0].confidence.sentence_confidence == 1.0
    assert attached[1].confidence is None
    assert pairs[0].confidence is None
