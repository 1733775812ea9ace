"""
评测模块

语料级 BLEU（multi-bleu 语义：4-gram、截断计数、简短惩罚、无平滑）与成对自助重采样显著性检验。
逐句充分统计量存放在 pandas DataFrame 中，重采样时直接按行索引求和。
"""

import collections
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sacrebleu.metrics import BLEU
from scipy.stats import spearmanr

from .errors import DataError
from .numerics import RngStream

logger = logging.getLogger(__name__)

NGRAM_ORDER = 4
STAT_COLUMNS = (
    [f"correct_{n}_grams" for n in range(1, NGRAM_ORDER + 1)]
    + [f"total_{n}_grams" for n in range(1, NGRAM_ORDER + 1)]
    + ["translation_length", "reference_length"]
)

TextLines = Sequence[Union[str, Sequence[str]]]


@dataclass
class BleuReport:
    """BLEU 分数（0-100）、1~4 阶 n-gram 精确率、简短惩罚与长度"""
    score: float
    precisions: List[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    @property
    def ratio(self) -> float:
        return self.hyp_len / self.ref_len if self.ref_len else 0.0

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def __str__(self) -> str:
        precisions = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f}, {precisions} (BP={self.brevity_penalty:.3f}, ratio={self.ratio:.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


@dataclass
class SignificanceReport:
    """成对自助重采样的结果：p 为名义上更好的系统没有胜出的比例（平局各记半次）"""
    bleu_a: float
    bleu_b: float
    mean_a: float
    mean_b: float
    wins_a: int
    wins_b: int
    ties: int
    resamples: int
    seed: int
    better: str = "a"
    p_value: float = field(init=False)

    def __post_init__(self):
        wins = self.wins_a if self.better == "a" else self.wins_b
        self.p_value = float((self.resamples - wins - 0.5 * self.ties) / self.resamples)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def _as_line(line: Union[str, Sequence[str]]) -> str:
    return line if isinstance(line, str) else " ".join(line)


class BleuEvaluator:
    """按空白切分后的文本上计算 BLEU（不再做任何分词或大小写处理）"""

    def __init__(self):
        self.metric = BLEU(tokenize="none", smooth_method="none", force=True)

    def sentence_stats(self, candidates: TextLines, references: TextLines) -> pd.DataFrame:
        """
        逐句的截断 n-gram 匹配数、n-gram 总数与长度

        Raises:
            DataError: 候选与参考的行数不一致
        """
        if len(candidates) != len(references):
            raise DataError(f"候选译文有 {len(candidates)} 行，参考译文有 {len(references)} 行")
        rows = []
        for cand, ref in zip(candidates, references):
            result = self.metric.corpus_score([_as_line(cand)], [[_as_line(ref)]])
            rows.append(list(result.counts) + list(result.totals) + [result.sys_len, result.ref_len])
        return pd.DataFrame(rows, columns=STAT_COLUMNS, dtype=np.int64)

    @staticmethod
    def report_from_totals(totals: np.ndarray) -> BleuReport:
        """由语料级充分统计量（STAT_COLUMNS 顺序）计算 BLEU"""
        totals = [int(v) for v in totals]
        correct = totals[:NGRAM_ORDER]
        total = totals[NGRAM_ORDER:2 * NGRAM_ORDER]
        hyp_len, ref_len = totals[-2], totals[-1]
        precisions = [c / t if t else 0.0 for c, t in zip(correct, total)]
        if hyp_len == 0:
            return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
        result = BLEU.compute_bleu(correct, total, hyp_len, ref_len, smooth_method="none")
        return BleuReport(float(result.score), precisions, float(result.bp), hyp_len, ref_len)

    def corpus_bleu(self, candidates: TextLines, references: TextLines) -> BleuReport:
        stats = self.sentence_stats(candidates, references)
        if stats.empty:
            return BleuReport(0.0, [0.0] * NGRAM_ORDER, 0.0, 0, 0)
        return self.report_from_totals(stats.sum(axis=0).to_numpy())


def sentence_stats(candidates: TextLines, references: TextLines) -> pd.DataFrame:
    return BleuEvaluator().sentence_stats(candidates, references)


def bleu(candidates: TextLines, references: TextLines) -> BleuReport:
    """
    语料级 BLEU

    任一阶精确率为 0 时分数为 0（与 multi-bleu 一致，不做平滑）。

    Raises:
        DataError: 行数不一致
    """
    return BleuEvaluator().corpus_bleu(candidates, references)


def paired_bootstrap(cand_a: TextLines, cand_b: TextLines, references: TextLines, resamples: int = 1000,
                     seed: int = 0) -> SignificanceReport:
    """
    成对自助重采样显著性检验

    每次有放回地抽取句子下标，在同一组下标上分别计算两个系统的 BLEU 并统计胜负。

    Args:
        resamples: 重采样次数
        seed: 随机种子，相同种子得到相同报告

    Returns:
        SignificanceReport
    """
    if not len(cand_a) == len(cand_b) == len(references):
        raise DataError(f"系统 A {len(cand_a)} 行、系统 B {len(cand_b)} 行、参考 {len(references)} 行，无法对齐")
    if resamples < 1:
        raise DataError(f"重采样次数必须 ≥ 1，当前为 {resamples}")
    if len(references) == 0:
        raise DataError("无法在空测试集上做重采样")
    evaluator = BleuEvaluator()
    stats_a = evaluator.sentence_stats(cand_a, references).to_numpy()
    stats_b = evaluator.sentence_stats(cand_b, references).to_numpy()
    n = len(references)
    indices = RngStream(seed).integers(0, n, size=(resamples, n))

    scores_a = np.empty(resamples)
    scores_b = np.empty(resamples)
    for r, index in enumerate(indices):
        scores_a[r] = evaluator.report_from_totals(stats_a[index].sum(axis=0)).score
        scores_b[r] = evaluator.report_from_totals(stats_b[index].sum(axis=0)).score

    bleu_a = evaluator.report_from_totals(stats_a.sum(axis=0)).score
    bleu_b = evaluator.report_from_totals(stats_b.sum(axis=0)).score
    report = SignificanceReport(
        bleu_a=bleu_a, bleu_b=bleu_b,
        mean_a=float(scores_a.mean()), mean_b=float(scores_b.mean()),
        wins_a=int(np.sum(scores_a > scores_b)), wins_b=int(np.sum(scores_b > scores_a)),
        ties=int(np.sum(scores_a == scores_b)), resamples=resamples, seed=seed,
        better="a" if bleu_a >= bleu_b else "b",
    )
    logger.info(f"自助重采样: A={bleu_a:.2f}, B={bleu_b:.2f}, p={report.p_value:.4f} ({resamples} 次)")
    return report


def significance_marker(p_value: Optional[float]) -> str:
    if p_value is None or np.isnan(p_value):
        return ""
    if p_value < 0.01:
        return "++"
    if p_value < 0.05:
        return "+"
    return ""


def results_table(scores: pd.DataFrame, p_values: Optional[pd.DataFrame] = None, digits: int = 2) -> str:
    """
    对齐的纯文本结果表：行为数据条件，列为各测试集与 All

    p_values 与 scores 形状相同，相对基线显著时在分数后标记 +（p<0.05）或 ++（p<0.01）。
    """
    cells = {}
    for column in scores.columns:
        formatted = []
        for row in scores.index:
            value = scores.at[row, column]
            p = None
            if p_values is not None and row in p_values.index and column in p_values.columns:
                p = p_values.at[row, column]
            formatted.append(f"{value:.{digits}f}{significance_marker(p)}")
        cells[column] = formatted
    table = pd.DataFrame(cells, index=scores.index)
    return table.to_string()


def unigram_f1(candidate: Union[str, Sequence[str]], reference: Union[str, Sequence[str]]) -> float:
    cand = _as_line(candidate).split()
    ref = _as_line(reference).split()
    if not cand or not ref:
        return 0.0
    overlap = sum((collections.Counter(cand) & collections.Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(cand)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def confidence_quality_correlation(confidences: Sequence[float], candidates: TextLines,
                                   references: TextLines) -> Tuple[float, float]:
    """
    句级置信度与合成源句质量（对参考的 unigram F1）之间的 Spearman 秩相关

    Returns:
        (相关系数, p 值)；任一侧为常数时返回 (nan, nan)
    """
    if not len(confidences) == len(candidates) == len(references):
        raise DataError("置信度、候选与参考的数量必须一致")
    quality = np.array([unigram_f1(c, r) for c, r in zip(candidates, references)])
    conf = np.asarray(confidences, dtype=np.float64)
    if len(conf) < 2 or np.all(conf == conf[0]) or np.all(quality == quality[0]):
        return float("nan"), float("nan")
    rho, p = spearmanr(conf, quality)
    return float(rho), float(p)


if __name__ == "__main__":
    report = bleu(["the the the the the the the"], ["the cat is on the mat"])
    print(report)
    print(bleu(["a b c d e"], ["a b c d e"]))
