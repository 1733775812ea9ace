"""
不确定性估计模块（MC Dropout）

对固定的 (y, x̂) 在保持 dropout 开启的情况下做 K 次前向，
得到词级与句级翻译概率的 K 个样本，再聚合为期望与方差（模型不确定性）。
"""

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .data import read_jsonl
from .errors import ConfigError, DataError, DimensionError
from .model import ModelConfig, TransformerParams, forward_logprobs
from .numerics import RngStream

logger = logging.getLogger(__name__)


@dataclass
class McSampleSet:
    """
    K 次随机前向的概率样本

    word_logprobs 为 K×I 矩阵，sentence_logprobs 为 K 个句级对数概率（以对数值为准，
    概率由取指数得到）。未做长度归一化时，每行之和等于对应的句级对数概率。
    """
    word_logprobs: np.ndarray
    sentence_logprobs: np.ndarray
    length_normalized: bool = False

    def __post_init__(self):
        self.word_logprobs = np.asarray(self.word_logprobs, dtype=np.float64)
        self.sentence_logprobs = np.asarray(self.sentence_logprobs, dtype=np.float64)
        if self.word_logprobs.ndim != 2 or self.word_logprobs.shape[0] < 1:
            raise DimensionError(f"word_logprobs 必须是 K×I 矩阵且 K ≥ 1，当前形状 {self.word_logprobs.shape}")
        if self.sentence_logprobs.shape != (self.word_logprobs.shape[0],):
            raise DimensionError(f"sentence_logprobs 形状 {self.sentence_logprobs.shape} 与 K 不一致")
        if np.any(self.word_logprobs > 0.0) or np.any(self.sentence_logprobs > 0.0):
            raise DataError("对数概率必须 ≤ 0")

    @classmethod
    def from_word_probabilities(cls, word_probs: np.ndarray) -> "McSampleSet":
        """由 K×I 的词级概率构造（句级概率为逐行乘积）"""
        word_logprobs = np.log(np.asarray(word_probs, dtype=np.float64))
        return cls(word_logprobs, word_logprobs.sum(axis=1))

    @property
    def k(self) -> int:
        return self.word_logprobs.shape[0]

    @property
    def length(self) -> int:
        return self.word_logprobs.shape[1]

    @property
    def word_probs(self) -> np.ndarray:
        return np.exp(self.word_logprobs)

    @property
    def sentence_probs(self) -> np.ndarray:
        return np.exp(self.sentence_logprobs)


@dataclass
class UncertaintyStats:
    """句级与逐词的期望 / 方差，满足 0 ≤ 方差 ≤ 期望 ≤ 1"""
    k: int
    sentence_expectation: float
    sentence_variance: float
    token_expectations: np.ndarray
    token_variances: np.ndarray

    def to_dict(self) -> Dict:
        return {
            "K": self.k,
            "sentence_expectation": self.sentence_expectation,
            "sentence_variance": self.sentence_variance,
            "token_expectations": [float(v) for v in self.token_expectations],
            "token_variances": [float(v) for v in self.token_variances],
        }


def mc_forward(y: Sequence[int], x_hat: Sequence[int], params: TransformerParams, config: ModelConfig,
               dropout_rate: float, k: int, rng: RngStream, threads: int = 1,
               length_normalize: bool = False) -> McSampleSet:
    """
    MC Dropout 前向

    第 k 次前向使用子流 rng.substream(k)，因此结果与执行顺序和线程数无关。
    x̂ 是已经解码好的固定序列，这里只做 teacher forcing，不做解码。

    Args:
        y: 反向模型的输入（单语目标句）
        x_hat: 需要打分的预测序列（已结束的预测应包含结束符）
        dropout_rate: MC 前向使用的 dropout 比例
        k: 前向次数 K
        length_normalize: 句级概率是否取逐词几何平均（默认否）

    Raises:
        DataError: x̂ 为空
        ConfigError: K < 1
    """
    if len(x_hat) == 0:
        raise DataError("无法对空预测计算不确定性")
    if k < 1:
        raise ConfigError(f"K 必须 ≥ 1，当前为 {k}")
    mc_config = dataclasses.replace(config, dropout=dropout_rate)

    def one_pass(i: int) -> np.ndarray:
        out = forward_logprobs(y, x_hat, params, mc_config, rng=rng.substream(i), training=True)
        return out.data.astype(np.float64)

    if threads > 1 and k > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one_pass, range(k)))
    else:
        rows = [one_pass(i) for i in range(k)]
    word_logprobs = np.stack(rows)
    sentence_logprobs = np.array([np.sum(row) for row in rows])
    if length_normalize:
        sentence_logprobs = sentence_logprobs / word_logprobs.shape[1]
    return McSampleSet(word_logprobs, sentence_logprobs, length_normalized=length_normalize)


def _mean(values: Sequence[float]) -> float:
    first = values[0]
    if all(v == first for v in values):
        return float(first)
    return math.fsum(values) / len(values)


def _variance(values: Sequence[float], mean: float) -> float:
    first = values[0]
    if all(v == first for v in values):
        return 0.0
    second = math.fsum(v * v for v in values) / len(values)
    return max(second - mean * mean, 0.0)


def expectation(samples: McSampleSet) -> Tuple[float, np.ndarray]:
    """
    概率样本的算术平均（先取指数再平均，而不是对数的平均再取指数）

    Returns:
        (句级期望, 逐词期望向量)
    """
    sentence = _mean(list(samples.sentence_probs))
    word = samples.word_probs
    tokens = np.array([_mean(list(word[:, i])) for i in range(samples.length)])
    return sentence, tokens


def variance(samples: McSampleSet) -> Tuple[float, np.ndarray]:
    """
    总体方差 (1/K)·Σp² − E²，浮点抵消产生的微小负值截断为 0

    Returns:
        (句级方差, 逐词方差向量)
    """
    sentence_probs = list(samples.sentence_probs)
    sentence = _variance(sentence_probs, _mean(sentence_probs))
    word = samples.word_probs
    tokens = []
    for i in range(samples.length):
        column = list(word[:, i])
        tokens.append(_variance(column, _mean(column)))
    return sentence, np.array(tokens)


def summarize(samples: McSampleSet) -> UncertaintyStats:
    e_sent, e_tok = expectation(samples)
    v_sent, v_tok = variance(samples)
    return UncertaintyStats(samples.k, e_sent, v_sent, e_tok, v_tok)


def score_dump_record(pair_id: int, stats: UncertaintyStats, ptp: float) -> Dict:
    """一条不确定性打分记录（JSON-lines 的一行）"""
    record = {"pair_id": int(pair_id)}
    record.update(stats.to_dict())
    record["ptp"] = float(ptp)
    return record


def write_score_dump(path: Union[str, Path], records: Iterable[Dict], append: bool = False) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def read_score_dump(path: Union[str, Path], repair: bool = False) -> List[Dict]:
    return read_jsonl(path, repair=repair)


class ScoreDumpWriter:
    """
    逐条追加不确定性打分记录，每条立即落盘

    resume=True 时保留文件中已有的记录（先修正被中断写了一半的末行），已有的 pair_id 不会重复写入；
    否则清空文件重新开始。
    """

    def __init__(self, path: Union[str, Path], resume: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        existing = read_score_dump(self.path, repair=True) if resume and self.path.exists() else []
        self.pair_ids = {int(r["pair_id"]) for r in existing}
        self._file = open(self.path, "a" if resume else "w", encoding="utf-8")

    def append(self, record: Dict):
        pair_id = int(record["pair_id"])
        if pair_id in self.pair_ids:
            return
        self._file.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        self._file.flush()
        self.pair_ids.add(pair_id)

    def close(self):
        self._file.close()

    def __enter__(self) -> "ScoreDumpWriter":
        return self

    def __exit__(self, *exc):
        self.close()


if __name__ == "__main__":
    demo = McSampleSet.from_word_probabilities(np.array([[0.2], [0.4], [0.6]]))
    stats = summarize(demo)
    print(f"E = {stats.sentence_expectation:.4f}, Var = {stats.sentence_variance:.6f}")
