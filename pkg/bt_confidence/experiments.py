"""
方向性复现实验

compare_measures: 不加权回译 vs PTP / EXP / VAR / CEV（多种子，取中位数）
compare_levels:   CEV 下句级 / 词级置信度的四种组合
condition_table:  None、Search(−/U)、Sample(−/U) × 各测试集，并做相对 Search− 的显著性检验

所有变体写入同一个输出目录，BPE、反向模型与合成语料等共享阶段通过阶段缓存只计算一次。
"""

import dataclasses
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .confidence import MeasureKind
from .data import read_lines
from .evaluation import paired_bootstrap, results_table
from .pipeline import BackTranslationRunner, PipelineSpec

logger = logging.getLogger(__name__)

MEASURE_ROWS = ("none", "ptp", "exp", "var", "cev")
LEVEL_ROWS = {
    "none": (False, False),
    "sentence": (True, False),
    "word": (False, True),
    "word+sentence": (True, True),
}
BASELINE_CONDITION = "Search −"


def _variant(spec: PipelineSpec, run_name: str, seed: int, kind: MeasureKind, sentence: bool,
             word: bool, generation: str = None) -> PipelineSpec:
    return dataclasses.replace(
        spec,
        run_name=run_name,
        seed=seed,
        generation=generation or spec.generation,
        measure=dataclasses.replace(spec.measure, kind=kind),
        training=dataclasses.replace(spec.training, sentence_confidence=sentence, word_confidence=word),
    )


def _seed_table(results: Dict[str, Dict[int, float]], seeds: Sequence[int], baseline: str) -> pd.DataFrame:
    table = pd.DataFrame({f"seed_{s}": {row: scores[s] for row, scores in results.items()} for s in seeds})
    table = table.loc[list(results)]
    table["median"] = table[[f"seed_{s}" for s in seeds]].median(axis=1)
    table["delta"] = table["median"] - table.at[baseline, "median"]
    return table


def compare_measures(spec: PipelineSpec, seeds: Sequence[int], metric: str = "All") -> pd.DataFrame:
    """
    对每个种子运行五个条件：不加权回译（none）与四种置信度度量（句级 + 词级均开启）

    Returns:
        行为条件，列为 seed_<s>、median、delta（相对 none 的中位数差）
    """
    results: Dict[str, Dict[int, float]] = {row: {} for row in MEASURE_ROWS}
    for seed in seeds:
        for row in MEASURE_ROWS:
            kind = MeasureKind.parse(row)
            use = kind != MeasureKind.NONE
            variant = _variant(spec, f"measure-{row}-s{seed}", seed, kind, use, use)
            manifest = BackTranslationRunner(variant).run()
            results[row][seed] = manifest.metrics["bleu"][metric]
            logger.info(f"种子 {seed} / {row}: BLEU = {results[row][seed]:.2f}")
    return _seed_table(results, seeds, "none")


def compare_levels(spec: PipelineSpec, seeds: Sequence[int], metric: str = "All") -> pd.DataFrame:
    """CEV 度量下句级、词级置信度开关的四种组合"""
    results: Dict[str, Dict[int, float]] = {row: {} for row in LEVEL_ROWS}
    for seed in seeds:
        for row, (sentence, word) in LEVEL_ROWS.items():
            kind = MeasureKind.CEV if (sentence or word) else MeasureKind.NONE
            variant = _variant(spec, f"level-{row}-s{seed}", seed, kind, sentence, word)
            manifest = BackTranslationRunner(variant).run()
            results[row][seed] = manifest.metrics["bleu"][metric]
            logger.info(f"种子 {seed} / {row}: BLEU = {results[row][seed]:.2f}")
    return _seed_table(results, seeds, "none")


def _conditions(spec: PipelineSpec) -> Dict[str, PipelineSpec]:
    kind = spec.measure.kind if spec.measure.kind != MeasureKind.NONE else MeasureKind.CEV
    return {
        "None": _variant(spec, "cond-none", spec.seed, MeasureKind.NONE, False, False, "none"),
        "Search −": _variant(spec, "cond-search", spec.seed, MeasureKind.NONE, False, False, "search"),
        "Search U": _variant(spec, "cond-search-u", spec.seed, kind, True, True, "search"),
        "Sample −": _variant(spec, "cond-sample", spec.seed, MeasureKind.NONE, False, False, "sample"),
        "Sample U": _variant(spec, "cond-sample-u", spec.seed, kind, True, True, "sample"),
    }


def condition_table(spec: PipelineSpec, resamples: int = 1000) -> Tuple[pd.DataFrame, pd.DataFrame, str]:
    """
    数据条件 × 测试集 的结果表

    Args:
        spec: 基础配置（test_sets 必须非空）
        resamples: 自助重采样次数

    Returns:
        (BLEU 表, 相对 Search − 的 p 值表, 带显著性标记的纯文本表)
    """
    names = sorted(spec.test_sets)
    scores: Dict[str, Dict[str, float]] = {}
    hyps: Dict[str, Dict[str, List[str]]] = {}
    refs: Dict[str, List[str]] = {}
    for condition, variant in _conditions(spec).items():
        runner = BackTranslationRunner(variant)
        manifest = runner.run()
        scores[condition] = dict(manifest.metrics["bleu"])
        out = runner.stage_dir("evaluate")
        hyps[condition] = {name: read_lines(out / f"{name}.hyp") for name in names}
        for name in names:
            refs.setdefault(name, read_lines(out / f"{name}.ref"))

    columns = names + ["All"]
    score_frame = pd.DataFrame(scores).T[columns]
    p_frame = pd.DataFrame(np.nan, index=score_frame.index, columns=columns)
    baseline = hyps[BASELINE_CONDITION]
    for condition in score_frame.index:
        if condition == BASELINE_CONDITION:
            continue
        for column in columns:
            sets = names if column == "All" else [column]
            cand = [h for n in sets for h in hyps[condition][n]]
            base = [h for n in sets for h in baseline[n]]
            ref = [r for n in sets for r in refs[n]]
            report = paired_bootstrap(cand, base, ref, resamples=resamples, seed=spec.seed)
            # 只标记比基线更好的条件
            p_frame.at[condition, column] = report.p_value if report.better == "a" else np.nan
    text = results_table(score_frame, p_frame)
    logger.info(f"\n{text}")
    return score_frame, p_frame, text
