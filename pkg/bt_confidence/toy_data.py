"""
桌面规模的玩具语料

make_copy_task: 目标句等于源句，用于过拟合自检
make_mapping_task: 确定性的词映射语言对（源词 i ↔ 目标词 π(i)，相邻词两两交换语序），
    提供真实平行语料、目标端单语语料、源端单语语料（迭代回译用）以及若干测试集
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import write_lines
from .numerics import RngStream

logger = logging.getLogger(__name__)

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
TARGET_CONSONANTS = "chjqwxy"


def _word(index: int, consonants: str, syllables: int = 2) -> str:
    parts = []
    for _ in range(syllables):
        index, c = divmod(index, len(consonants))
        index, v = divmod(index, len(VOWELS))
        parts.append(consonants[c] + VOWELS[v])
    return "".join(parts)


def source_lexicon(size: int) -> List[str]:
    return [_word(i, CONSONANTS) for i in range(size)]


def target_lexicon(size: int) -> List[str]:
    return [_word(i, TARGET_CONSONANTS, syllables=3) for i in range(size)]


def _zipf_weights(size: int, exponent: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, size + 1) ** exponent
    return w / w.sum()


def _sample_sentences(n: int, lexicon: Sequence[str], lengths: Tuple[int, int], rng: RngStream) -> List[str]:
    weights = np.cumsum(_zipf_weights(len(lexicon)))
    sentences = []
    for _ in range(n):
        length = int(rng.integers(lengths[0], lengths[1] + 1))
        ids = np.searchsorted(weights, rng.random(length), side="right")
        ids = np.minimum(ids, len(lexicon) - 1)
        sentences.append(" ".join(lexicon[i] for i in ids))
    return sentences


def make_copy_task(n: int = 50, vocab_size: int = 12, lengths: Tuple[int, int] = (3, 6),
                   seed: int = 0) -> Tuple[List[str], List[str]]:
    """
    复制任务：目标句与源句相同

    Returns:
        (源端句子, 目标端句子)
    """
    rng = RngStream(seed, 11)
    lexicon = source_lexicon(vocab_size)
    source = _sample_sentences(n, lexicon, lengths, rng)
    return source, list(source)


@dataclass
class ToyTask:
    """一个玩具翻译任务的全部语料（纯文本，每行一句）"""
    train_source: List[str]
    train_target: List[str]
    target_monolingual: List[str]
    source_monolingual: List[str]
    test_sets: Dict[str, Tuple[List[str], List[str]]] = field(default_factory=dict)
    mapping: Dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Union[str, Path]) -> Dict[str, object]:
        """
        写出为 UTF-8 文件

        Returns:
            可直接放进流水线配置的路径字典
        """
        out = Path(out_dir)
        write_lines(out / "train.src", self.train_source)
        write_lines(out / "train.tgt", self.train_target)
        write_lines(out / "mono.tgt", self.target_monolingual)
        write_lines(out / "mono.src", self.source_monolingual)
        tests = {}
        for name, (src, tgt) in self.test_sets.items():
            write_lines(out / f"{name}.src", src)
            write_lines(out / f"{name}.tgt", tgt)
            tests[name] = [str(out / f"{name}.src"), str(out / f"{name}.tgt")]
        logger.info(f"玩具语料已写入 {out}: 训练 {len(self.train_source)} 句, 单语 {len(self.target_monolingual)} 句")
        return {
            "train_source": str(out / "train.src"),
            "train_target": str(out / "train.tgt"),
            "target_monolingual": str(out / "mono.tgt"),
            "source_monolingual": str(out / "mono.src"),
            "test_sets": tests,
        }


def translate_mapping(sentence: str, mapping: Dict[str, str]) -> str:
    """逐词映射后把相邻词两两交换（长度为奇数时最后一个词保持原位）"""
    words = [mapping[w] for w in sentence.split()]
    for i in range(0, len(words) - 1, 2):
        words[i], words[i + 1] = words[i + 1], words[i]
    return " ".join(words)


def make_mapping_task(n_authentic: int = 200, n_mono: int = 200, n_test: int = 50, vocab_size: int = 40,
                      lengths: Tuple[int, int] = (4, 9), test_names: Sequence[str] = ("tst1", "tst2"),
                      n_source_mono: Optional[int] = None, seed: int = 0) -> ToyTask:
    """
    词映射语言对

    源端词表按 Zipf 分布采样，目标端由固定的随机置换 π 与局部换序规则确定性地生成。
    """
    rng = RngStream(seed, 13)
    src_lex = source_lexicon(vocab_size)
    tgt_lex = target_lexicon(vocab_size)
    perm = rng.permutation(vocab_size)
    mapping = {src_lex[i]: tgt_lex[int(perm[i])] for i in range(vocab_size)}

    def parallel(n: int, stream: int) -> Tuple[List[str], List[str]]:
        src = _sample_sentences(n, src_lex, lengths, rng.substream(stream))
        return src, [translate_mapping(s, mapping) for s in src]

    train_src, train_tgt = parallel(n_authentic, 1)
    _, mono_tgt = parallel(n_mono, 2)
    mono_src, _ = parallel(n_source_mono if n_source_mono is not None else n_mono, 3)
    tests = {name: parallel(n_test, 10 + i) for i, name in enumerate(test_names)}
    return ToyTask(train_src, train_tgt, mono_tgt, mono_src, tests, mapping)


TOY_MODEL = {"d_model": 32, "d_ff": 64, "n_layers": 1, "n_heads": 2, "max_len": 24, "dropout": 0.1}
GOLDEN_SETTINGS = {"max_steps": 30, "k": 3, "n_mono": 40}


def toy_pipeline_spec(work_dir: Union[str, Path], measure: str = "cev", generation: str = "search",
                      max_steps: int = 150, k: int = 5, seed: int = 0, n_mono: int = 200, **overrides):
    """
    玩具回译实验的完整配置：生成词映射语料并返回 PipelineSpec

    Args:
        work_dir: 语料写入 work_dir/data，输出写入 work_dir/runs
        measure: 置信度度量，none 时同时关闭训练中的置信度
        n_mono: 目标端单语句子数
        overrides: 直接传给 PipelineSpec 的其他字段
    """
    from .confidence import MeasureConfig
    from .decode import DecodeConfig
    from .pipeline import PipelineSpec
    from .training import TrainingConfig

    work_dir = Path(work_dir)
    task = make_mapping_task(n_authentic=200, n_mono=n_mono, n_test=30, vocab_size=30, lengths=(4, 8), seed=seed)
    paths = task.write(work_dir / "data")
    use = measure != "none"
    training = TrainingConfig(max_steps=max_steps, batch_tokens=256, warmup_steps=50, log_every=0, seed=seed,
                              sentence_confidence=use, word_confidence=use)
    spec = dict(
        paths,
        output_dir=str(work_dir / "runs"),
        generation=generation,
        measure=MeasureConfig(kind=measure, k=k),
        seed=seed,
        bpe_merges=200,
        max_mono_len=20,
        model=dict(TOY_MODEL),
        training=training,
        decode=DecodeConfig(beam_size=3, max_len=24),
        eval_decode=DecodeConfig(beam_size=3, max_len=24),
    )
    spec.update(overrides)
    return PipelineSpec(**spec)


def golden_summary(manifest) -> Dict:
    """用于冻结与比对的摘要：各阶段输出哈希与最终指标"""
    return {"hashes": manifest.hashes(), "metrics": manifest.metrics}


if __name__ == "__main__":
    task = make_mapping_task(n_authentic=3, n_mono=2, n_test=2)
    for s, t in zip(task.train_source, task.train_target):
        print(f"{s}  ->  {t}")
