import dataclasses
import json
from pathlib import Path

import pandas as pd
import pytest

from bt_confidence import pipeline as pipeline_module
from bt_confidence.confidence import MeasureConfig
from bt_confidence.data import TextCodec, write_lines
from bt_confidence.decode import DecodeConfig
from bt_confidence.errors import CheckpointError, ConfigError, DataError, StageError
from bt_confidence.model import ModelCheckpoint
from bt_confidence.pipeline import (SYNTHETIC_ID_OFFSET, BackTranslationRunner, ExperimentManifest, PipelineSpec,
                                    StageRecord, corpus_size_sweep, generate_synthetic, load_synthetic,
                                    run_back_translation, save_synthetic)
from bt_confidence.toy_data import GOLDEN_SETTINGS, golden_summary, toy_pipeline_spec
from bt_confidence.training import TrainingConfig

GOLDEN_FILE = Path(__file__).parent / "fixtures" / "toy_golden.json"
FAST_DECODE = DecodeConfig(beam_size=1, max_len=8)


def _quick_spec(work_dir, **overrides):
    settings = dict(max_steps=4, k=2, n_mono=12, decode=FAST_DECODE, eval_decode=FAST_DECODE)
    settings.update(overrides)
    return toy_pipeline_spec(work_dir, **settings)


def _paths(tmp_path):
    for name in ("a.src", "a.tgt", "mono.tgt", "mono.src"):
        write_lines(tmp_path / name, ["ba de", "fi go"])
    return dict(train_source=str(tmp_path / "a.src"), train_target=str(tmp_path / "a.tgt"),
                target_monolingual=str(tmp_path / "mono.tgt"), output_dir=str(tmp_path / "runs"))


def test_spec_validation(tmp_path):
    paths = _paths(tmp_path)
    spec = PipelineSpec(**paths)
    assert spec.training.sentence_confidence and spec.training.word_confidence
    assert not spec.reverse_training_config.uses_confidence
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, generation="random")
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, iterations=2)
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, iterations=2, source_monolingual=str(tmp_path / "mono.src"), generation="none")
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, measure=MeasureConfig(kind="none"))
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, ratio="1:x")
    with pytest.raises(ConfigError):
        PipelineSpec(**paths, model={"share_embeddings": True})
    with pytest.raises(ConfigError):
        PipelineSpec.from_dict(dict(paths, unknown_field=1))


def test_spec_dict_roundtrip(tmp_path):
    spec = PipelineSpec(**_paths(tmp_path), measure=MeasureConfig(kind="var", alpha=3.0), ratio="1:2",
                        model={"d_model": 16, "n_heads": 2}, reverse_training=TrainingConfig(max_steps=5))
    restored = PipelineSpec.from_dict(spec.to_dict())
    assert restored.to_dict() == spec.to_dict()
    assert restored.model_config(10, 12).d_model == 16


def test_manifest_roundtrip(tmp_path):
    manifest = ExperimentManifest(
        config={"seed": 1},
        stages={"prepare": StageRecord("prepare", "abc", "stages/prepare-abc", outputs={"x.json": "00"})},
        metrics={"bleu": {"All": 12.5}},
    )
    path = tmp_path / "run.manifest.json"
    manifest.save(path)
    loaded = ExperimentManifest.load(path)
    assert loaded == manifest
    assert loaded.hashes() == {"prepare": {"x.json": "00"}}
    data = json.loads(path.read_text(encoding="utf-8"))
    data["version"] = 99
    with pytest.raises(ConfigError):
        ExperimentManifest.from_dict(data)


def _tiny_checkpoint(tiny_config, tiny_params, direction="reverse"):
    codec = TextCodec.fit(["ba de fi go ka"], merge_count=20)
    return ModelCheckpoint(tiny_config, tiny_params, codec, codec, metadata={"direction": direction})


def test_generate_synthetic(tiny_config, tiny_params):
    checkpoint = _tiny_checkpoint(tiny_config, tiny_params)
    mono = ["ba de", "fi", "", "ba de fi go ka ba de"]
    pairs, skipped = generate_synthetic(mono, checkpoint, DecodeConfig(mode="greedy", max_len=4), max_len=5)
    assert skipped == 1
    assert [p.pair_id for p in pairs] == [SYNTHETIC_ID_OFFSET, SYNTHETIC_ID_OFFSET + 1]
    assert pairs[0].target == checkpoint.src_codec.encode("ba de")
    for p in pairs:
        assert p.is_synthetic
        assert len(p.step_logprobs) == len(p.source) + (1 if p.finished else 0)


def test_generate_synthetic_errors(tiny_config, tiny_params):
    checkpoint = _tiny_checkpoint(tiny_config, tiny_params, direction="forward")
    with pytest.raises(DataError):
        generate_synthetic([], checkpoint, DecodeConfig())
    with pytest.raises(CheckpointError):
        generate_synthetic(["ba"], checkpoint, DecodeConfig(), expect_direction="reverse")
    with pytest.raises(CheckpointError):
        generate_synthetic(["ba"], ModelCheckpoint(tiny_config, tiny_params), DecodeConfig())


def test_synthetic_file_roundtrip(tmp_path, tiny_config, tiny_params):
    pairs, _ = generate_synthetic(["ba de", "go"], _tiny_checkpoint(tiny_config, tiny_params),
                                  DecodeConfig(mode="greedy", max_len=4))
    save_synthetic(tmp_path / "synthetic.jsonl", pairs)
    assert load_synthetic(tmp_path / "synthetic.jsonl") == pairs


def test_failed_stage_is_recorded(tmp_path):
    paths = _paths(tmp_path)
    write_lines(tmp_path / "a.src", [])
    write_lines(tmp_path / "a.tgt", [])
    runner = BackTranslationRunner(PipelineSpec(**paths, run_name="broken"))
    with pytest.raises(StageError) as excinfo:
        runner.run()
    assert excinfo.value.stage == "prepare"
    manifest = ExperimentManifest.load(runner.manifest_path)
    assert manifest.stages["prepare"].status == "failed"
    assert "DataError" in manifest.stages["prepare"].error


def test_pipeline_runs_and_reuses_stages(tmp_path, monkeypatch):
    spec = _quick_spec(tmp_path)
    manifest = run_back_translation(spec)
    assert set(manifest.stages) == {"prepare", "reverse_1", "generate_1", "score_1", "forward_1", "evaluate"}
    assert set(manifest.metrics["bleu"]) == {"tst1", "tst2", "All"}
    assert manifest.metrics["synthetic"]["iteration_1"]["pairs"] > 0
    runner_dir = Path(spec.output_dir)
    assert (runner_dir / f"{spec.run_name}.manifest.json").exists()

    class ExplodingTrainer:
        def __init__(self, *args, **kwargs):
            raise AssertionError("已缓存的阶段不应重新训练")

    monkeypatch.setattr(pipeline_module, "Trainer", ExplodingTrainer)
    again = run_back_translation(spec)
    assert again.hashes() == manifest.hashes()
    assert again.metrics == manifest.metrics

    # 输出被篡改后缓存失效，阶段会重新执行
    log_path = runner_dir / manifest.stages["forward_1"].directory / "train_log.csv"
    log_path.write_text("tampered\n", encoding="utf-8")
    with pytest.raises(StageError) as excinfo:
        run_back_translation(spec)
    assert excinfo.value.stage == "forward_1"


def test_variants_share_upstream_stages(tmp_path):
    spec = _quick_spec(tmp_path)
    confident = run_back_translation(spec)
    plain = run_back_translation(dataclasses.replace(
        spec, run_name="plain", measure=MeasureConfig(kind="none"),
        training=dataclasses.replace(spec.training, sentence_confidence=False, word_confidence=False)))
    assert "score_1" not in plain.stages
    for name in ("prepare", "reverse_1", "generate_1"):
        assert plain.stages[name].key == confident.stages[name].key
    assert plain.stages["forward_1"].key != confident.stages["forward_1"].key


def test_no_generation_trains_on_authentic_only(tmp_path):
    spec = _quick_spec(tmp_path, measure="none", generation="none")
    manifest = run_back_translation(spec)
    assert "generate_1" not in manifest.stages
    assert manifest.metrics["synthetic"] == {}


def test_iterative_back_translation(tmp_path):
    spec = _quick_spec(tmp_path, iterations=2, measure="ptp")
    manifest = run_back_translation(spec)
    for name in ("reverse_1", "forward_1", "backgen_1", "reverse_2", "generate_2", "score_2", "forward_2"):
        assert manifest.stages[name].status == "completed"


def test_corpus_size_sweep(tmp_path):
    spec = _quick_spec(tmp_path)
    sweep = corpus_size_sweep(spec, [0, 6])
    assert isinstance(sweep, pd.DataFrame)
    assert list(sweep["size"]) == [0, 0, 6, 6]
    assert set(sweep["variant"]) == {"baseline", "confidence"}
    assert {"tst1", "tst2", "All"} <= set(sweep.columns)
    with pytest.raises(ConfigError):
        corpus_size_sweep(spec, [6, 0])


def _frozen_summary():
    assert GOLDEN_FILE.exists(), f"缺少参考值 {GOLDEN_FILE}，请先运行 python scripts/freeze_golden.py"
    return json.loads(GOLDEN_FILE.read_text(encoding="utf-8"))


def test_golden_fixture_is_frozen():
    frozen = _frozen_summary()
    assert set(frozen) == {"hashes", "metrics"}
    assert frozen["hashes"] and all(frozen["hashes"].values())
    assert {"tst1", "tst2", "All"} <= set(frozen["metrics"]["bleu"])


@pytest.mark.slow
def test_toy_pipeline_is_reproducible(tmp_path):
    """相同种子的两次独立运行与冻结的参考值得到相同的阶段哈希与指标"""
    frozen = _frozen_summary()
    first = golden_summary(run_back_translation(toy_pipeline_spec(tmp_path / "a", **GOLDEN_SETTINGS)))
    second = golden_summary(run_back_translation(toy_pipeline_spec(tmp_path / "b", **GOLDEN_SETTINGS)))
    assert first == second
    assert first["hashes"] == frozen["hashes"]
    assert first["metrics"] == frozen["metrics"]
