"""
回译流水线

按顺序执行：
    1. prepare   学习 BPE、构建词表
    2. reverse   在真实语料上训练目标→源的反向模型
    3. generate  反向模型翻译目标端单语语料，得到合成语料 {⟨x̂, y⟩}
    4. score     （配置了置信度度量时）对合成语料打分
    5. forward   在真实 + 合成语料上训练源→目标的正向模型
    6. evaluate  正向模型束搜索翻译各测试集并计算 BLEU
迭代回译时，第 i ≥ 2 轮先用上一轮的正向模型翻译源端单语语料，扩充反向模型的训练数据。

每个阶段的输出放在以阶段键（配置 + 上游输出哈希）命名的目录中，
重复运行或中断后重跑时，输出仍然校验通过的阶段直接复用。
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .confidence import MeasureConfig, MeasureKind, attach_confidences, read_confidence_file, score_corpus_to_file
from .data import (UNK, Corpus, Provenance, SentencePair, TextCodec, encode_corpus, pretokenize, read_lines,
                   read_parallel, write_lines)
from .decode import DecodeConfig, DecodeMode, translate_corpus
from .errors import BtConfidenceError, CheckpointError, ConfigError, DataError, StageError
from .evaluation import bleu
from .model import ModelCheckpoint, ModelConfig
from .numerics import RngStream
from .training import Trainer, TrainingConfig, mix_corpora, parse_ratio

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SYNTHETIC_ID_OFFSET = 1_000_000
OUTPUT_DIR_ENV = "BT_CONFIDENCE_OUTPUT_DIR"
GENERATION_MODES = ("none", "search", "sample")
STAGE_SEED_OFFSETS = {"reverse": 101, "generate": 202, "score": 303, "forward": 404, "backgen": 505, "evaluate": 606}
ITERATION_SEED_STRIDE = 1000
STAGE_FILE = "stage.json"


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, "runs")


@dataclass
class PipelineSpec:
    """
    一次回译实验的完整描述

    Args:
        train_source / train_target: 真实平行语料（源端 x / 目标端 y）
        target_monolingual: 目标端单语语料 y
        source_monolingual: 源端单语语料，迭代次数 > 1 时必需
        test_sets: 测试集名称 -> [源端路径, 目标端路径]
        generation: none | search | sample
        measure: 置信度度量，kind=none 时不打分并使用单位权重
        ratio: 真实:合成 比例
        iterations: 回译迭代次数（≥ 1）
        fine_tune: 迭代时是否从上一轮参数继续训练（默认从头训练）
        model: 除词表大小以外的 ModelConfig 字段
        mono_limit: 只使用单语语料的前 mono_limit 句（语料规模实验）
        max_mono_len: BPE 之后超过该长度的单语句子被跳过
    """
    train_source: str
    train_target: str
    target_monolingual: str
    test_sets: Dict[str, List[str]] = field(default_factory=dict)
    source_monolingual: Optional[str] = None
    output_dir: str = field(default_factory=default_output_dir)
    run_name: str = "run"
    generation: str = "search"
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    ratio: str = "1:1"
    iterations: int = 1
    fine_tune: bool = False
    seed: int = 1
    bpe_merges: int = 500
    joint_bpe: bool = False
    max_mono_len: int = 64
    mono_limit: Optional[int] = None
    model: Dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(sentence_confidence=True,
                                                                            word_confidence=True))
    reverse_training: Optional[TrainingConfig] = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval_decode: DecodeConfig = field(default_factory=DecodeConfig)
    threads: int = 1
    progress: bool = False

    def __post_init__(self):
        if isinstance(self.measure, dict):
            self.measure = MeasureConfig.from_dict(self.measure)
        if isinstance(self.training, dict):
            self.training = TrainingConfig.from_dict(self.training)
        if isinstance(self.reverse_training, dict):
            self.reverse_training = TrainingConfig.from_dict(self.reverse_training)
        if isinstance(self.decode, dict):
            self.decode = DecodeConfig.from_dict(self.decode)
        if isinstance(self.eval_decode, dict):
            self.eval_decode = DecodeConfig.from_dict(self.eval_decode)
        self.generation = str(self.generation).lower()
        if self.generation not in GENERATION_MODES:
            raise ConfigError(f"generation 必须是 {GENERATION_MODES} 之一，当前为 {self.generation!r}")
        if self.iterations < 1:
            raise ConfigError(f"iterations 必须 ≥ 1，当前为 {self.iterations}")
        if self.iterations > 1 and not self.source_monolingual:
            raise ConfigError("迭代回译（iterations > 1）需要 source_monolingual")
        if self.iterations > 1 and self.generation == "none":
            raise ConfigError("generation=none 时不能做迭代回译")
        if self.measure.kind == MeasureKind.NONE and self.training.uses_confidence:
            raise ConfigError("训练开启了置信度（sentence/word），但没有配置置信度度量")
        if self.mono_limit is not None and self.mono_limit < 0:
            raise ConfigError(f"mono_limit 必须 ≥ 0，当前为 {self.mono_limit}")
        if self.max_mono_len < 1:
            raise ConfigError(f"max_mono_len 必须 ≥ 1，当前为 {self.max_mono_len}")
        parse_ratio(self.ratio)
        self.model_config(8, 8)

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        overrides = {k: v for k, v in self.model.items() if k not in ("src_vocab_size", "tgt_vocab_size")}
        if overrides.get("share_embeddings"):
            if not self.joint_bpe:
                raise ConfigError("share_embeddings 需要 joint_bpe")
            src_vocab_size = tgt_vocab_size = max(src_vocab_size, tgt_vocab_size)
        return ModelConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size, **overrides)

    @property
    def reverse_training_config(self) -> TrainingConfig:
        base = self.reverse_training or self.training
        return dataclasses.replace(base, sentence_confidence=False, word_confidence=False)

    @property
    def uses_scoring(self) -> bool:
        return self.generation != "none" and self.measure.kind != MeasureKind.NONE

    def to_dict(self) -> Dict:
        return {
            "train_source": self.train_source,
            "train_target": self.train_target,
            "target_monolingual": self.target_monolingual,
            "source_monolingual": self.source_monolingual,
            "test_sets": {k: list(v) for k, v in self.test_sets.items()},
            "output_dir": str(self.output_dir),
            "run_name": self.run_name,
            "generation": self.generation,
            "measure": self.measure.to_dict(),
            "ratio": self.ratio,
            "iterations": self.iterations,
            "fine_tune": self.fine_tune,
            "seed": self.seed,
            "bpe_merges": self.bpe_merges,
            "joint_bpe": self.joint_bpe,
            "max_mono_len": self.max_mono_len,
            "mono_limit": self.mono_limit,
            "model": dict(self.model),
            "training": self.training.to_dict(),
            "reverse_training": self.reverse_training.to_dict() if self.reverse_training else None,
            "decode": self.decode.to_dict(),
            "eval_decode": self.eval_decode.to_dict(),
            "threads": self.threads,
            "progress": self.progress,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "PipelineSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"PipelineSpec 中有未知字段: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageRecord:
    """一个阶段的执行记录：阶段键、输出目录（相对输出根目录）、输出哈希与指标"""
    name: str
    key: str
    directory: str
    status: str = "completed"
    outputs: Dict[str, str] = field(default_factory=dict)
    metrics: Dict = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "StageRecord":
        return cls(**d)


@dataclass
class ExperimentManifest:
    """解析后的配置快照、各阶段记录与最终指标；不含时间戳，相同种子的两次运行逐字节相同"""
    config: Dict
    stages: Dict[str, StageRecord] = field(default_factory=dict)
    metrics: Dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def hashes(self) -> Dict[str, Dict[str, str]]:
        return {name: dict(record.outputs) for name, record in self.stages.items()}

    def to_dict(self) -> Dict:
        return {
            "version": self.version,
            "config": self.config,
            "stages": {name: record.to_dict() for name, record in self.stages.items()},
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ExperimentManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"不支持的 manifest 版本 {d.get('version')}")
        stages = {name: StageRecord.from_dict(r) for name, r in d.get("stages", {}).items()}
        return cls(config=d["config"], stages=stages, metrics=d.get("metrics", {}), version=d["version"])

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- 哈希与文件格式

def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def hash_artifact(path: Union[str, Path]) -> str:
    """文件内容哈希；检查点使用参数内容哈希（npz 打包的字节不稳定）"""
    path = Path(path)
    if path.suffix == ".npz":
        return ModelCheckpoint.load(path).content_hash()
    return sha256_file(path)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def save_synthetic(path: Union[str, Path], pairs: Sequence[SentencePair]):
    lines = []
    for p in pairs:
        lines.append(json.dumps({
            "pair_id": p.pair_id,
            "source": list(p.source),
            "target": list(p.target),
            "step_logprobs": p.step_logprobs,
            "finished": p.finished,
        }, sort_keys=True))
    write_lines(path, lines)


def load_synthetic(path: Union[str, Path]) -> Corpus:
    pairs = []
    for line in read_lines(path):
        if not line.strip():
            continue
        d = json.loads(line)
        pairs.append(SentencePair(d["pair_id"], d["source"], d["target"], Provenance.SYNTHETIC,
                                  step_logprobs=d.get("step_logprobs"), finished=d.get("finished", True)))
    return pairs


def _save_codec(path: Path, codec: TextCodec):
    path.write_text(json.dumps(codec.to_dict(), ensure_ascii=False, sort_keys=True), encoding="utf-8")


def _load_codec(path: Path) -> TextCodec:
    return TextCodec.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------- 合成语料

def generate_synthetic(monolingual: Sequence[str], checkpoint: ModelCheckpoint, decode_config: DecodeConfig,
                       max_len: Optional[int] = None, id_offset: int = SYNTHETIC_ID_OFFSET,
                       expect_direction: Optional[str] = None, threads: int = 1,
                       progress: bool = False) -> Tuple[Corpus, int]:
    """
    用模型翻译单语语料，得到合成句对

    每个单语句 m 产生一个句对：source 为模型预测，target 为 m 本身，并保留逐步概率供 PTP 使用。
    BPE 之后长度超过 max_len 的句子被跳过。

    Returns:
        (合成句对, 被跳过的超长句子数)

    Raises:
        DataError: 单语语料为空
        CheckpointError: 检查点缺少编解码器或方向不符
    """
    if not monolingual:
        raise DataError("单语语料为空")
    if checkpoint.src_codec is None:
        raise CheckpointError("检查点中没有源端编解码器，无法编码单语语料")
    direction = checkpoint.metadata.get("direction")
    if expect_direction is not None and direction is not None and direction != expect_direction:
        raise CheckpointError(f"检查点方向为 {direction}，这里需要 {expect_direction}")
    limit = checkpoint.config.max_len if max_len is None else min(max_len, checkpoint.config.max_len)

    kept_ids, kept_src = [], []
    skipped = empty = 0
    for i, line in enumerate(monolingual):
        ids = checkpoint.src_codec.encode(line)
        if not ids:
            empty += 1
        elif len(ids) > limit:
            skipped += 1
        else:
            kept_ids.append(id_offset + i)
            kept_src.append(ids)
    if skipped:
        logger.warning(f"跳过 {skipped} 个超过 {limit} 个 token 的单语句子")
    if empty:
        logger.warning(f"跳过 {empty} 个空行")

    hyps = translate_corpus(kept_src, checkpoint.params, checkpoint.config, decode_config, threads, progress)
    pairs = [
        SentencePair(pid, list(h.tokens), list(src), Provenance.SYNTHETIC, step_logprobs=list(h.step_logprobs),
                     finished=h.finished)
        for pid, src, h in zip(kept_ids, kept_src, hyps)
    ]
    logger.info(f"生成合成句对 {len(pairs)} 个（{decode_config.mode.value}），跳过 {skipped} 个")
    return pairs, skipped


# ---------------------------------------------------------------- 流水线

class BackTranslationRunner:
    """按阶段执行回译流水线，维护 ExperimentManifest"""

    def __init__(self, spec: PipelineSpec):
        self.spec = spec
        self.root = Path(spec.output_dir)
        self.manifest_path = self.root / f"{spec.run_name}.manifest.json"
        self.manifest = ExperimentManifest(config=spec.to_dict())

    # -------------------------------------------------------- 阶段机制

    def _seed(self, stage: str, iteration: int = 1) -> int:
        return self.spec.seed + STAGE_SEED_OFFSETS[stage] + ITERATION_SEED_STRIDE * (iteration - 1)

    def _verify(self, directory: Path, outputs: Dict[str, str]) -> bool:
        for name, digest in outputs.items():
            path = directory / name
            if not path.exists():
                return False
            try:
                if hash_artifact(path) != digest:
                    return False
            except (BtConfidenceError, OSError, ValueError):
                return False
        return True

    def _run_stage(self, name: str, kind: str, key_parts: Dict, produce: Callable[[Path], Dict]) -> StageRecord:
        key = _digest(key_parts)
        relative = Path("stages") / f"{kind}-{key[:16]}"
        directory = self.root / relative
        marker = directory / STAGE_FILE
        if marker.exists():
            cached = StageRecord.from_dict(json.loads(marker.read_text(encoding="utf-8")))
            if cached.key == key and cached.status == "completed" and self._verify(directory, cached.outputs):
                logger.info(f"阶段 {name} 的输出已存在且校验通过，跳过")
                record = dataclasses.replace(cached, name=name)
                self.manifest.stages[name] = record
                self.manifest.save(self.manifest_path)
                return record
            logger.info(f"阶段 {name} 的缓存无效，重新执行")

        logger.info(f"开始阶段 {name}")
        directory.mkdir(parents=True, exist_ok=True)
        try:
            metrics = produce(directory) or {}
        except Exception as exc:
            logger.error(f"阶段 {name} 失败: {exc}")
            self.manifest.stages[name] = StageRecord(name, key, relative.as_posix(), "failed",
                                                     error=f"{type(exc).__name__}: {exc}")
            self.manifest.save(self.manifest_path)
            raise StageError(name, str(exc)) from exc

        outputs = {
            p.relative_to(directory).as_posix(): hash_artifact(p)
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != STAGE_FILE
        }
        record = StageRecord(name, key, relative.as_posix(), "completed", outputs, metrics)
        marker.write_text(json.dumps(record.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
        self.manifest.stages[name] = record
        self.manifest.save(self.manifest_path)
        return record

    def _dir(self, record: StageRecord) -> Path:
        return self.root / record.directory

    # -------------------------------------------------------- 各阶段

    def _prepare(self) -> StageRecord:
        spec = self.spec
        files = {"train_source": spec.train_source, "train_target": spec.train_target,
                 "target_monolingual": spec.target_monolingual}
        if spec.source_monolingual:
            files["source_monolingual"] = spec.source_monolingual
        key_parts = {"files": {k: sha256_file(v) for k, v in files.items()},
                     "bpe_merges": spec.bpe_merges, "joint_bpe": spec.joint_bpe}

        def produce(out: Path) -> Dict:
            src, tgt = read_parallel(spec.train_source, spec.train_target)
            if not src:
                raise DataError("真实平行语料为空")
            mono_tgt = read_lines(spec.target_monolingual)
            mono_src = read_lines(spec.source_monolingual) if spec.source_monolingual else []
            if spec.joint_bpe:
                src_codec = tgt_codec = TextCodec.fit(src + tgt + mono_tgt + mono_src, spec.bpe_merges)
            else:
                src_codec = TextCodec.fit(src + mono_src, spec.bpe_merges)
                tgt_codec = TextCodec.fit(tgt + mono_tgt, spec.bpe_merges)
            _save_codec(out / "src_codec.json", src_codec)
            _save_codec(out / "tgt_codec.json", tgt_codec)
            return {"authentic_pairs": len(src), "src_vocab": len(src_codec.vocab), "tgt_vocab": len(tgt_codec.vocab)}

        return self._run_stage("prepare", "prepare", key_parts, produce)

    def _codecs(self, prepare: StageRecord) -> Tuple[TextCodec, TextCodec]:
        out = self._dir(prepare)
        return _load_codec(out / "src_codec.json"), _load_codec(out / "tgt_codec.json")

    def _authentic(self, prepare: StageRecord) -> Corpus:
        src_codec, tgt_codec = self._codecs(prepare)
        src, tgt = read_parallel(self.spec.train_source, self.spec.train_target)
        return encode_corpus(src, tgt, src_codec, tgt_codec)

    def _train(self, out: Path, corpus_for_epoch: Callable[[int], Corpus], model_config: ModelConfig,
               training: TrainingConfig, src_codec: TextCodec, tgt_codec: TextCodec, direction: str,
               init: Optional[StageRecord]) -> Dict:
        initial = None
        if init is not None:
            initial = ModelCheckpoint.load(self._dir(init) / "model.npz").params
        trainer = Trainer(model_config, training, src_codec, tgt_codec, initial, progress=self.spec.progress)
        checkpoint = trainer.fit(corpus_for_epoch)
        checkpoint.metadata["direction"] = direction
        checkpoint.save(out / "model.npz")
        trainer.save_log(out / "train_log.csv")
        return {"steps": checkpoint.step, "final_loss": checkpoint.metadata.get("final_loss")}

    def _reverse(self, iteration: int, prepare: StageRecord, backgen: Optional[StageRecord],
                 previous: Optional[StageRecord]) -> StageRecord:
        spec = self.spec
        seed = self._seed("reverse", iteration)
        training = dataclasses.replace(spec.reverse_training_config, seed=seed)
        init = previous if spec.fine_tune else None
        key_parts = {"prepare": prepare.key, "model": spec.model, "training": training.to_dict(),
                     "backgen": backgen.key if backgen else None, "init": init.key if init else None,
                     "ratio": spec.ratio}

        def produce(out: Path) -> Dict:
            src_codec, tgt_codec = self._codecs(prepare)
            authentic = [p.reversed() for p in self._authentic(prepare)]
            synthetic = load_synthetic(self._dir(backgen) / "synthetic.jsonl") if backgen else []
            config = spec.model_config(len(tgt_codec.vocab), len(src_codec.vocab))
            return self._train(out, lambda e: mix_corpora(authentic, synthetic, spec.ratio, seed, e),
                               config, training, tgt_codec, src_codec, "reverse", init)

        return self._run_stage(f"reverse_{iteration}", "reverse", key_parts, produce)

    def _generate(self, name: str, kind: str, iteration: int, model_stage: StageRecord, mono_path: str,
                  direction: str) -> StageRecord:
        spec = self.spec
        mode = DecodeMode.BEAM if spec.generation == "search" else DecodeMode.SAMPLE
        seed = self._seed(kind, iteration)
        decode_config = dataclasses.replace(spec.decode, mode=mode, seed=seed)
        key_parts = {"model": model_stage.key, "decode": decode_config.to_dict(), "mono": sha256_file(mono_path),
                     "mono_limit": spec.mono_limit, "max_mono_len": spec.max_mono_len}

        def produce(out: Path) -> Dict:
            checkpoint = ModelCheckpoint.load(self._dir(model_stage) / "model.npz")
            mono = read_lines(mono_path)
            if spec.mono_limit is not None:
                mono = mono[:spec.mono_limit]
            pairs, skipped = generate_synthetic(mono, checkpoint, decode_config, spec.max_mono_len,
                                                expect_direction=direction, threads=spec.threads,
                                                progress=spec.progress)
            save_synthetic(out / "synthetic.jsonl", pairs)
            write_lines(out / "synthetic.txt", [checkpoint.tgt_codec.decode(p.source) for p in pairs])
            truncated = sum(1 for p in pairs if not p.finished)
            return {"pairs": len(pairs), "skipped": skipped, "truncated": truncated}

        return self._run_stage(name, kind, key_parts, produce)

    def _score(self, iteration: int, reverse: StageRecord, generate: StageRecord) -> StageRecord:
        spec = self.spec
        seed = self._seed("score", iteration)
        key_parts = {"generate": generate.key, "reverse": reverse.key, "measure": spec.measure.to_dict(),
                     "seed": seed}

        def produce(out: Path) -> Dict:
            checkpoint = ModelCheckpoint.load(self._dir(reverse) / "model.npz")
            pairs = load_synthetic(self._dir(generate) / "synthetic.jsonl")
            uncertainty_path = out / "uncertainty.jsonl" if spec.measure.kind.needs_sampling else None
            records = score_corpus_to_file(out / "confidence.jsonl", pairs, checkpoint, spec.measure,
                                           rng=RngStream(seed), threads=spec.threads,
                                           uncertainty_path=uncertainty_path, progress=spec.progress)
            values = [r.sentence_confidence for r in records.values()]
            return {"records": len(values),
                    "mean_sentence_confidence": float(sum(values) / len(values)) if values else None}

        return self._run_stage(f"score_{iteration}", "score", key_parts, produce)

    def _forward(self, iteration: int, prepare: StageRecord, generate: Optional[StageRecord],
                 score: Optional[StageRecord], previous: Optional[StageRecord]) -> StageRecord:
        spec = self.spec
        seed = self._seed("forward", iteration)
        training = dataclasses.replace(spec.training, seed=seed)
        init = previous if spec.fine_tune else None
        key_parts = {"prepare": prepare.key, "generate": generate.key if generate else None,
                     "score": score.key if score else None, "model": spec.model,
                     "training": training.to_dict(), "ratio": spec.ratio, "init": init.key if init else None}

        def produce(out: Path) -> Dict:
            src_codec, tgt_codec = self._codecs(prepare)
            authentic = self._authentic(prepare)
            synthetic: Corpus = []
            if generate is not None:
                synthetic = load_synthetic(self._dir(generate) / "synthetic.jsonl")
                synthetic = [p for p in synthetic if p.source]
                if score is not None:
                    records = read_confidence_file(self._dir(score) / "confidence.jsonl")
                    synthetic = attach_confidences(synthetic, records)
            require = training.uses_confidence and bool(synthetic)
            config = spec.model_config(len(src_codec.vocab), len(tgt_codec.vocab))
            return self._train(out, lambda e: mix_corpora(authentic, synthetic, spec.ratio, seed, e, require),
                               config, training, src_codec, tgt_codec, "forward", init)

        return self._run_stage(f"forward_{iteration}", "forward", key_parts, produce)

    def _evaluate(self, forward: StageRecord, prepare: StageRecord) -> StageRecord:
        spec = self.spec
        decode_config = dataclasses.replace(spec.eval_decode, seed=self._seed("evaluate"))
        tests = {name: [sha256_file(p) for p in paths] for name, paths in spec.test_sets.items()}
        key_parts = {"forward": forward.key, "decode": decode_config.to_dict(), "tests": tests}

        def produce(out: Path) -> Dict:
            checkpoint = ModelCheckpoint.load(self._dir(forward) / "model.npz")
            src_codec, tgt_codec = checkpoint.src_codec, checkpoint.tgt_codec
            limit = checkpoint.config.max_len
            scores, all_hyp, all_ref = {}, [], []
            for name, (src_path, tgt_path) in sorted(spec.test_sets.items()):
                src, tgt = read_parallel(src_path, tgt_path)
                encoded = []
                for line in src:
                    ids = src_codec.encode(line) or [UNK]
                    if len(ids) > limit:
                        logger.warning(f"测试集 {name} 中有长度 {len(ids)} 的句子，截断到 {limit}")
                        ids = ids[:limit]
                    encoded.append(ids)
                hyps = translate_corpus(encoded, checkpoint.params, checkpoint.config, decode_config,
                                        spec.threads, spec.progress)
                hyp_text = [tgt_codec.decode(h.tokens) for h in hyps]
                ref_text = [pretokenize(t) for t in tgt]
                write_lines(out / f"{name}.hyp", hyp_text)
                write_lines(out / f"{name}.ref", ref_text)
                scores[name] = bleu(hyp_text, ref_text).score
                all_hyp.extend(hyp_text)
                all_ref.extend(ref_text)
                logger.info(f"{name}: BLEU = {scores[name]:.2f}")
            if spec.test_sets:
                scores["All"] = bleu(all_hyp, all_ref).score
            return {"bleu": scores}

        return self._run_stage("evaluate", "evaluate", key_parts, produce)

    # -------------------------------------------------------- 主流程

    def run(self) -> ExperimentManifest:
        spec = self.spec
        if self.manifest_path.exists():
            logger.info(f"发现已有 manifest {self.manifest_path}，已完成的阶段将被复用")
        prepare = self._prepare()
        reverse = forward = backgen = None
        synthetic_metrics = {}
        for i in range(1, spec.iterations + 1):
            reverse = self._reverse(i, prepare, backgen, reverse)
            generate = score = None
            if spec.generation != "none":
                generate = self._generate(f"generate_{i}", "generate", i, reverse, spec.target_monolingual,
                                          "reverse")
                synthetic_metrics[f"iteration_{i}"] = dict(generate.metrics)
                if spec.uses_scoring:
                    score = self._score(i, reverse, generate)
                    synthetic_metrics[f"iteration_{i}"].update(score.metrics)
            forward = self._forward(i, prepare, generate, score, forward)
            if i < spec.iterations:
                backgen = self._generate(f"backgen_{i}", "backgen", i, forward, spec.source_monolingual,
                                         "forward")
        self.manifest.metrics = {"synthetic": synthetic_metrics}
        if spec.test_sets:
            evaluate = self._evaluate(forward, prepare)
            self.manifest.metrics["bleu"] = evaluate.metrics["bleu"]
        self.manifest.save(self.manifest_path)
        logger.info(f"流水线完成，manifest 已写入 {self.manifest_path}")
        return self.manifest

    def stage_dir(self, name: str) -> Path:
        return self._dir(self.manifest.stages[name])


def run_back_translation(spec: PipelineSpec) -> ExperimentManifest:
    """执行完整的回译流水线并返回 manifest"""
    return BackTranslationRunner(spec).run()


def corpus_size_sweep(spec: PipelineSpec, sizes: Sequence[int],
                      variants: Optional[Dict[str, Dict]] = None) -> pd.DataFrame:
    """
    合成语料规模实验：固定真实语料，逐个规模运行基线与置信度加权两种变体

    Args:
        sizes: 升序的合成语料规模（0 等价于不使用合成语料）
        variants: 变体名 -> PipelineSpec 字段覆盖，默认为 baseline 与 confidence

    Returns:
        每行一个 (size, variant)，列为各测试集 BLEU 与 All
    """
    sizes = list(sizes)
    if not sizes or any(b < a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 0:
        raise ConfigError(f"sizes 必须是非空的非负升序列表: {sizes}")
    if variants is None:
        variants = {
            "baseline": {"measure": dataclasses.replace(spec.measure, kind=MeasureKind.NONE),
                         "training": dataclasses.replace(spec.training, sentence_confidence=False,
                                                         word_confidence=False)},
            "confidence": {},
        }
    rows = []
    for size in sizes:
        for variant, overrides in variants.items():
            run_spec = dataclasses.replace(spec, mono_limit=size, run_name=f"sweep-{variant}-{size}", **overrides)
            if size == 0:
                run_spec = dataclasses.replace(
                    run_spec, generation="none", iterations=1,
                    measure=dataclasses.replace(run_spec.measure, kind=MeasureKind.NONE),
                    training=dataclasses.replace(run_spec.training, sentence_confidence=False,
                                                 word_confidence=False))
            manifest = run_back_translation(run_spec)
            row = {"size": size, "variant": variant}
            row.update(manifest.metrics.get("bleu", {}))
            rows.append(row)
            logger.info(f"规模 {size} / {variant}: All BLEU = {row.get('All')}")
    return pd.DataFrame(rows)
