"""
置信度度量模块

把不确定性统计量转换为四种置信度：
    PTP: 解码时记录的预测概率
    EXP: MC 样本的期望
    VAR: (1 - 方差)^α
    CEV: (1 - 方差 / 期望)^β
句级与词级使用相同的公式，结果都落在 [0, 1] 内。
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tqdm import tqdm

from .data import EOS, SentencePair, read_jsonl
from .errors import ConfigError, DataError
from .model import ModelCheckpoint, forward_logprobs
from .numerics import RngStream
from .uncertainty import ScoreDumpWriter, UncertaintyStats, mc_forward, score_dump_record, summarize

logger = logging.getLogger(__name__)

FLAG_EMPTY = "empty_prediction"
FLAG_ZERO_EXPECTATION = "zero_expectation"


class MeasureKind(str, Enum):
    NONE = "none"
    PTP = "ptp"
    EXP = "exp"
    VAR = "var"
    CEV = "cev"

    @classmethod
    def parse(cls, value) -> "MeasureKind":
        if value is None:
            return cls.NONE
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"未知的置信度度量 {value!r}（可选 none/ptp/exp/var/cev）") from None

    @property
    def needs_sampling(self) -> bool:
        return self in (MeasureKind.EXP, MeasureKind.VAR, MeasureKind.CEV)


@dataclass
class MeasureConfig:
    """
    置信度度量配置

    Args:
        kind: 度量类型
        alpha: VAR 的指数
        beta: CEV 的指数
        k: MC 前向次数（PTP 忽略）
        dropout: MC 前向的 dropout 比例，None 表示沿用模型训练时的比例
        length_normalize: 句级概率是否取逐词几何平均
    """
    kind: MeasureKind = MeasureKind.CEV
    alpha: float = 2.0
    beta: float = 2.0
    k: int = 20
    dropout: Optional[float] = None
    length_normalize: bool = False

    def __post_init__(self):
        self.kind = MeasureKind.parse(self.kind)
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"α 与 β 必须 > 0，当前为 α={self.alpha}, β={self.beta}")
        if self.k < 1:
            raise ConfigError(f"K 必须 ≥ 1，当前为 {self.k}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"MC dropout 必须在 [0, 1) 内，当前为 {self.dropout}")

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "MeasureConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"MeasureConfig 中有未知字段: {sorted(unknown)}")
        return cls(**d)


class Confidence(NamedTuple):
    sentence: float
    words: np.ndarray
    flags: Tuple[str, ...] = ()


@dataclass
class ConfidenceRecord:
    """一个句对的句级置信度与长度为 I 的词级置信度向量"""
    pair_id: int
    measure: MeasureKind
    sentence_confidence: float
    word_confidences: List[float]
    alpha: float = 2.0
    beta: float = 2.0
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.measure = MeasureKind.parse(self.measure)
        self.word_confidences = [float(v) for v in self.word_confidences]
        values = [self.sentence_confidence] + self.word_confidences
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise DataError(f"句对 {self.pair_id} 的置信度超出 [0, 1]")

    @classmethod
    def unit(cls, pair_id: int, length: int) -> "ConfidenceRecord":
        """真实句对（或关闭置信度时）使用的全 1 记录"""
        return cls(pair_id, MeasureKind.NONE, 1.0, [1.0] * length)

    def to_json(self) -> Dict:
        return {
            "pair_id": int(self.pair_id),
            "measure": self.measure.value,
            "alpha": self.alpha,
            "beta": self.beta,
            "sentence_confidence": float(self.sentence_confidence),
            "word_confidences": self.word_confidences,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, d: Dict) -> "ConfidenceRecord":
        return cls(
            pair_id=int(d["pair_id"]),
            measure=d["measure"],
            sentence_confidence=float(d["sentence_confidence"]),
            word_confidences=d["word_confidences"],
            alpha=float(d.get("alpha", 2.0)),
            beta=float(d.get("beta", 2.0)),
            flags=list(d.get("flags", [])),
        )


# ---------------------------------------------------------------- 四种度量

def ptp(step_logprobs: Sequence[float]) -> Confidence:
    """预测概率：句级为逐步概率之积，词级为逐步概率本身"""
    logprobs = np.asarray(step_logprobs, dtype=np.float64)
    return Confidence(float(np.exp(np.sum(logprobs))), np.exp(logprobs))


def exp_confidence(stats: UncertaintyStats) -> Confidence:
    """期望翻译概率"""
    return Confidence(float(stats.sentence_expectation), np.asarray(stats.token_expectations, dtype=np.float64))


def _var_measure(var, alpha: float):
    return np.power(np.clip(1.0 - np.asarray(var, dtype=np.float64), 0.0, 1.0), alpha)


def var_confidence(stats: UncertaintyStats, alpha: float = 2.0) -> Confidence:
    """(1 - Var)^α"""
    if alpha <= 0:
        raise ConfigError(f"α 必须 > 0，当前为 {alpha}")
    return Confidence(float(_var_measure(stats.sentence_variance, alpha)),
                      _var_measure(stats.token_variances, alpha))


def _cev_measure(e, var, beta: float) -> Tuple[np.ndarray, bool]:
    e = np.asarray(e, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    zero = e <= 0.0
    ratio = np.divide(var, e, out=np.ones_like(e), where=~zero)
    return np.power(np.clip(1.0 - ratio, 0.0, 1.0), beta), bool(np.any(zero))


def cev_confidence(stats: UncertaintyStats, beta: float = 2.0) -> Confidence:
    """
    (1 - Var / E)^β

    期望为 0（即使在对数空间也下溢）时置信度定义为 0，并打上 zero_expectation 标记。
    """
    if beta <= 0:
        raise ConfigError(f"β 必须 > 0，当前为 {beta}")
    sentence, zero_s = _cev_measure(stats.sentence_expectation, stats.sentence_variance, beta)
    words, zero_w = _cev_measure(stats.token_expectations, stats.token_variances, beta)
    flags = (FLAG_ZERO_EXPECTATION,) if zero_s or zero_w else ()
    return Confidence(float(sentence), words, flags)


def apply_measure(config: MeasureConfig, stats: Optional[UncertaintyStats] = None,
                  step_logprobs: Optional[Sequence[float]] = None) -> Confidence:
    if config.kind == MeasureKind.PTP:
        if step_logprobs is None:
            raise ConfigError("PTP 需要解码时记录的逐步概率")
        return ptp(step_logprobs)
    if stats is None:
        raise ConfigError(f"{config.kind.value} 需要 MC Dropout 统计量")
    if config.kind == MeasureKind.EXP:
        return exp_confidence(stats)
    if config.kind == MeasureKind.VAR:
        return var_confidence(stats, config.alpha)
    if config.kind == MeasureKind.CEV:
        return cev_confidence(stats, config.beta)
    raise ConfigError("度量为 none 时不需要打分")


# ---------------------------------------------------------------- 语料打分

def scored_sequence(pair: SentencePair) -> List[int]:
    """被打分的预测序列：x̂ 以及（已结束时的）结束符"""
    return list(pair.source) + ([EOS] if pair.finished else [])


def score_corpus(pairs: Sequence[SentencePair], checkpoint: ModelCheckpoint, measure: MeasureConfig,
                 k: Optional[int] = None, rng: Optional[RngStream] = None, skip_ids: Optional[Set[int]] = None,
                 threads: int = 1, uncertainty_sink: Optional[Union[List[Dict], ScoreDumpWriter]] = None,
                 progress: bool = True) -> Iterator[ConfidenceRecord]:
    """
    对合成语料逐句打分，逐条产出 ConfidenceRecord

    Args:
        pairs: 合成句对，source 为反向模型的预测 x̂，target 为单语句 y
        checkpoint: 产生这些预测的反向模型
        measure: 度量配置
        k: MC 前向次数，默认取 measure.k；PTP 模式下忽略
        rng: 主随机流，句对 i 使用子流 rng.substream(pair_id)
        skip_ids: 已完成的句对 id（断点续跑）
        uncertainty_sink: 若给出（list 或 ScoreDumpWriter），追加每个句对的不确定性打分记录

    Yields:
        ConfidenceRecord
    """
    if measure.kind == MeasureKind.NONE:
        raise ConfigError("度量为 none 时不需要打分")
    k = k or measure.k
    rng = rng or RngStream(0)
    skip_ids = skip_ids or set()
    config = checkpoint.config
    dropout = config.dropout if measure.dropout is None else measure.dropout
    params = checkpoint.params

    for pair in tqdm(pairs, desc=f"置信度打分 ({measure.kind.value})", disable=not progress):
        if pair.pair_id in skip_ids:
            continue
        if len(pair.source) == 0:
            logger.warning(f"句对 {pair.pair_id} 的预测为空，置信度记为 0")
            yield ConfidenceRecord(pair.pair_id, measure.kind, 0.0, [], measure.alpha, measure.beta, [FLAG_EMPTY])
            continue
        x_hat = scored_sequence(pair)
        step_logprobs = pair.step_logprobs
        if step_logprobs is None or len(step_logprobs) != len(x_hat):
            step_logprobs = [float(v) for v in forward_logprobs(pair.target, x_hat, params, config).data]

        stats = None
        if measure.kind.needs_sampling:
            samples = mc_forward(pair.target, x_hat, params, config, dropout, k, rng.substream(pair.pair_id),
                                 threads=threads, length_normalize=measure.length_normalize)
            stats = summarize(samples)
            if uncertainty_sink is not None:
                uncertainty_sink.append(score_dump_record(pair.pair_id, stats, ptp(step_logprobs).sentence))
        conf = apply_measure(measure, stats, step_logprobs)
        if conf.flags:
            logger.warning(f"句对 {pair.pair_id} 打分标记: {', '.join(conf.flags)}")
        words = [float(v) for v in conf.words[:len(pair.source)]]
        yield ConfidenceRecord(pair.pair_id, measure.kind, conf.sentence, words, measure.alpha, measure.beta,
                               list(conf.flags))


def write_confidence_file(path: Union[str, Path], records: Iterable[ConfidenceRecord], append: bool = False) -> int:
    """写出 JSON-lines 置信度文件（打分与训练之间的约定格式），每写一条立即落盘"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
            f.flush()
            count += 1
    return count


def read_confidence_file(path: Union[str, Path], repair: bool = False) -> Dict[int, ConfidenceRecord]:
    """读取置信度文件；被中断写了一半的末行会被丢弃（repair=True 时同时从文件中截掉）"""
    records = {}
    for obj in read_jsonl(path, repair=repair):
        record = ConfidenceRecord.from_json(obj)
        records[record.pair_id] = record
    return records


def score_corpus_to_file(path: Union[str, Path], pairs: Sequence[SentencePair], checkpoint: ModelCheckpoint,
                         measure: MeasureConfig, rng: Optional[RngStream] = None, threads: int = 1,
                         uncertainty_path: Optional[Union[str, Path]] = None,
                         progress: bool = True) -> Dict[int, ConfidenceRecord]:
    """
    打分并写入文件；文件中已有的句对会被跳过，因此中断后可以继续

    不确定性打分记录与置信度记录一样逐条落盘。续跑时已打分但缺少不确定性记录的句对会重新做 MC 前向补齐
    （每个句对使用自己的子随机流，补齐的记录与一次跑完的结果相同）。

    Returns:
        全部句对的置信度记录（按 pair_id 索引）
    """
    path = Path(path)
    existing = read_confidence_file(path, repair=True) if path.exists() else {}
    if existing:
        logger.info(f"从 {path} 恢复了 {len(existing)} 条置信度记录")

    def stream(todo: Sequence[SentencePair], skip: Set[int], sink) -> Iterator[ConfidenceRecord]:
        return score_corpus(todo, checkpoint, measure, rng=rng, skip_ids=skip, threads=threads,
                            uncertainty_sink=sink, progress=progress)

    if uncertainty_path is None:
        written = write_confidence_file(path, stream(pairs, set(existing), None), append=bool(existing))
    else:
        with ScoreDumpWriter(uncertainty_path, resume=bool(existing)) as dump:
            backfill = [p for p in pairs if p.pair_id in existing and p.pair_id not in dump.pair_ids and p.source]
            if backfill and measure.kind.needs_sampling:
                logger.warning(f"{len(backfill)} 个已打分的句对缺少不确定性记录，重新计算")
                for _ in stream(backfill, set(), dump):
                    pass
            written = write_confidence_file(path, stream(pairs, set(existing), dump), append=bool(existing))
    logger.info(f"置信度打分完成: 新增 {written} 条, 共 {len(existing) + written} 条 -> {path}")
    return read_confidence_file(path)


def attach_confidences(pairs: Sequence[SentencePair], records: Dict[int, ConfidenceRecord]) -> List[SentencePair]:
    """把置信度记录挂到对应的合成句对上"""
    out = []
    for pair in pairs:
        record = records.get(pair.pair_id)
        out.append(dataclasses.replace(pair, confidence=record))
    return out


if __name__ == "__main__":
    stats = UncertaintyStats(k=20, sentence_expectation=0.5, sentence_variance=0.1,
                             token_expectations=np.array([0.9, 0.5]), token_variances=np.array([0.01, 0.1]))
    print("VAR:", var_confidence(stats, 2.0))
    print("CEV:", cev_confidence(stats, 2.0))
