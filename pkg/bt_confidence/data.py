"""
数据处理模块

分词、BPE 子词切分、词表构建、句对表示以及按 token 预算分批
"""

import collections
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, VocabError

if TYPE_CHECKING:
    from .confidence import ConfidenceRecord

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<s>", "</s>", "<unk>"]
END_OF_WORD = "</w>"
BPE_FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

PathLike = Union[str, Path]


def pretokenize(line: str) -> str:
    """按空白切分并把标点单独切开，返回以单个空格连接的结果"""
    return " ".join(_TOKEN_RE.findall(line))


def read_lines(path: PathLike) -> List[str]:
    """读取 UTF-8 文本，每行一句"""
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def write_lines(path: PathLike, lines: Iterable[str]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def read_jsonl(path: PathLike, repair: bool = False) -> List[Dict]:
    """
    读取 JSON-lines 文件

    进程被中断时最后一行可能只写了一半：没有换行结尾且无法解析的末行会被丢弃并记录警告。
    repair=True 时同时修正文件末尾（截掉半行，或为完整的末行补上换行），之后可以安全地追加。

    Raises:
        DataError: 除末行以外的某一行无法解析
    """
    path = Path(path)
    raw = path.read_bytes()
    complete, _, tail = raw.rpartition(b"\n")
    records = []
    for number, line in enumerate(complete.decode("utf-8").split("\n") if complete else [], 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} 第 {number} 行无法解析: {exc}") from exc
    if not tail.strip():
        return records
    try:
        records.append(json.loads(tail.decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError):
        logger.warning(f"{path} 末尾有一行未写完（{len(tail)} 字节），已丢弃")
        if repair:
            with open(path, "r+b") as f:
                f.truncate(len(raw) - len(tail))
        return records
    if repair:
        with open(path, "ab") as f:
            f.write(b"\n")
    return records


def read_parallel(source_path: PathLike, target_path: PathLike) -> Tuple[List[str], List[str]]:
    """读取两个按行对齐的平行语料文件"""
    src = read_lines(source_path)
    tgt = read_lines(target_path)
    if len(src) != len(tgt):
        raise DataError(f"平行语料行数不一致: {source_path} 有 {len(src)} 行, {target_path} 有 {len(tgt)} 行")
    return src, tgt


# ---------------------------------------------------------------- BPE

@dataclass
class BpeModel:
    """有序的 BPE 合并操作列表"""
    merges: List[Tuple[str, str]] = field(default_factory=list)
    end_marker: str = END_OF_WORD

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise DataError("BPE 合并列表中存在重复项")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: Dict[str, Tuple[str, ...]] = {}

    @property
    def merge_count(self) -> int:
        return len(self.merges)

    def segment_word(self, word: str) -> Tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word[:-1]) + [word[-1] + self.end_marker]
        while len(symbols) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(symbols, symbols[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            pair = self.merges[best]
            symbols = _merge_symbols(symbols, pair)
        result = tuple(symbols)
        self._cache[word] = result
        return result

    def to_lines(self) -> List[str]:
        header = f"#version: {BPE_FORMAT_VERSION} marker: {self.end_marker}"
        return [header] + [f"{a} {b}" for a, b in self.merges]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "BpeModel":
        if not lines or not lines[0].startswith("#version:"):
            raise DataError("BPE 模型文件缺少版本头")
        header = lines[0].split()
        version = int(header[1])
        if version != BPE_FORMAT_VERSION:
            raise DataError(f"不支持的 BPE 模型版本 {version}")
        marker = header[3] if len(header) > 3 else END_OF_WORD
        merges = [tuple(line.split(" ")) for line in lines[1:] if line]
        return cls(merges=merges, end_marker=marker)

    def save(self, path: PathLike):
        write_lines(path, self.to_lines())

    @classmethod
    def load(cls, path: PathLike) -> "BpeModel":
        return cls.from_lines(read_lines(path))


def _merge_symbols(symbols: List[str], pair: Tuple[str, str]) -> List[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_bpe(sentences: Iterable[str], merge_count: int, end_marker: str = END_OF_WORD) -> BpeModel:
    """
    学习 BPE 合并操作

    每轮合并频率最高的相邻符号对，频率相同时取字典序最小的符号对，保证结果确定。

    Args:
        sentences: 已按空白预切分的句子
        merge_count: 合并次数（≥ 0）

    Returns:
        BpeModel

    Raises:
        DataError: 语料为空
    """
    if merge_count < 0:
        raise DataError(f"合并次数必须 ≥ 0，当前为 {merge_count}")
    word_freq = collections.Counter(w for s in sentences for w in s.split())
    if not word_freq:
        raise DataError("无法在空语料上学习 BPE")

    vocab = {word: list(word[:-1]) + [word[-1] + end_marker] for word in word_freq}
    merges: List[Tuple[str, str]] = []
    seen = set()
    for _ in range(merge_count):
        pair_freq: Dict[Tuple[str, str], int] = collections.Counter()
        for word, symbols in vocab.items():
            freq = word_freq[word]
            for pair in zip(symbols, symbols[1:]):
                pair_freq[pair] += freq
        candidates = [(f, p) for p, f in pair_freq.items() if p not in seen]
        if not candidates:
            break
        top = max(f for f, _ in candidates)
        best = min(p for f, p in candidates if f == top)
        merges.append(best)
        seen.add(best)
        for word, symbols in vocab.items():
            if len(symbols) > 1:
                vocab[word] = _merge_symbols(symbols, best)
    logger.info(f"BPE 学习完成: {len(word_freq)} 个词型, {len(merges)} 次合并")
    return BpeModel(merges=merges, end_marker=end_marker)


def apply_bpe(sentence: str, model: BpeModel) -> List[str]:
    """按学习到的优先级切分句子；未见过的字符作为单个符号保留"""
    tokens: List[str] = []
    for word in sentence.split():
        tokens.extend(model.segment_word(word))
    return tokens


def undo_bpe(tokens: Sequence[str], end_marker: str = END_OF_WORD) -> str:
    """apply_bpe 的精确左逆（对空白规范化的文本）"""
    return "".join(tokens).replace(end_marker, " ").strip()


# ---------------------------------------------------------------- 词表

class Vocab:
    """token 与 id 的双射，保留 id: <pad>=0, <s>=1, </s>=2, <unk>=3"""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED_TOKENS)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocab":
        """按频率降序、同频按字典序构建词表"""
        counts = collections.Counter(t for tokens in token_lists for t in tokens)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            if not 0 <= i < len(self.itos):
                raise VocabError(f"id {i} 超出词表大小 {len(self.itos)}")
            out.append(self.itos[i])
        return out

    @property
    def content_tokens(self) -> List[str]:
        return self.itos[len(RESERVED_TOKENS):]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: PathLike):
        write_lines(path, self.content_tokens)

    @classmethod
    def load(cls, path: PathLike) -> "Vocab":
        return cls(read_lines(path))


@dataclass
class TextCodec:
    """一侧语言的文本编解码：预切分 → BPE → 词表 id"""
    vocab: Vocab
    bpe: Optional[BpeModel] = None

    def tokenize(self, line: str) -> List[str]:
        text = pretokenize(line)
        return apply_bpe(text, self.bpe) if self.bpe is not None else text.split()

    def encode(self, line: str) -> List[int]:
        return self.vocab.encode(self.tokenize(line))

    def decode(self, ids: Sequence[int]) -> str:
        tokens = self.vocab.decode(ids)
        if self.bpe is not None:
            return undo_bpe(tokens, self.bpe.end_marker)
        return " ".join(tokens)

    def to_dict(self) -> Dict:
        return {
            "vocab": self.vocab.content_tokens,
            "bpe": self.bpe.to_lines() if self.bpe is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "TextCodec":
        bpe = BpeModel.from_lines(d["bpe"]) if d.get("bpe") else None
        return cls(vocab=Vocab(d["vocab"]), bpe=bpe)

    @classmethod
    def fit(cls, lines: Sequence[str], merge_count: int) -> "TextCodec":
        """在原始文本上学习 BPE 并构建词表"""
        pretok = [pretokenize(line) for line in lines]
        bpe = learn_bpe(pretok, merge_count)
        vocab = Vocab.build(apply_bpe(s, bpe) for s in pretok)
        return cls(vocab=vocab, bpe=bpe)


# ---------------------------------------------------------------- 句对

class Provenance(str, Enum):
    AUTHENTIC = "authentic"
    SYNTHETIC = "synthetic"


@dataclass
class SentencePair:
    """
    对齐的源端/目标端 id 序列

    合成句对的 source 是反向模型的预测 x̂，step_logprobs 为生成时记录的逐步对数概率
    （含结束符，若已结束）；confidence 由打分阶段填入。
    """
    pair_id: int
    source: List[int]
    target: List[int]
    provenance: Provenance = Provenance.AUTHENTIC
    confidence: Optional["ConfidenceRecord"] = None
    step_logprobs: Optional[List[float]] = None
    finished: bool = True

    @property
    def is_synthetic(self) -> bool:
        return self.provenance == Provenance.SYNTHETIC

    @property
    def num_tokens(self) -> int:
        # 解码器逐位置处理 [BOS] + y（金标准 y + [EOS]），比目标句多 1 个位置
        return max(len(self.source), len(self.target) + 1)

    def reversed(self) -> "SentencePair":
        return SentencePair(self.pair_id, list(self.target), list(self.source), self.provenance)


Corpus = List[SentencePair]


def encode_corpus(src_lines: Sequence[str], tgt_lines: Sequence[str], src_codec: TextCodec,
                  tgt_codec: TextCodec, id_offset: int = 0,
                  provenance: Provenance = Provenance.AUTHENTIC) -> Corpus:
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"源端 {len(src_lines)} 行与目标端 {len(tgt_lines)} 行不一致")
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        pairs.append(SentencePair(id_offset + i, src_codec.encode(s), tgt_codec.encode(t), provenance))
    return pairs


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD) -> Tuple[np.ndarray, np.ndarray]:
    """右侧补齐，返回 (id 矩阵, 有效位置掩码)"""
    width = max((len(s) for s in sequences), default=0)
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = seq
    return ids, ids != pad_id


def batch_by_tokens(pairs: Sequence[SentencePair], token_budget: int) -> List[List[SentencePair]]:
    """
    按长度排序后分批

    一个批次的代价为 句对数 × 批内最长的 max(源端长度, 目标端长度 + 1)，即编码器与解码器补齐后较宽一侧的 token 数；
    每个批次的代价不超过预算，每个句对恰好出现在一个批次中。

    Raises:
        DataError: 单个句对就超出预算
    """
    if token_budget <= 0:
        raise DataError(f"token 预算必须为正，当前为 {token_budget}")
    for p in pairs:
        if p.num_tokens > token_budget:
            raise DataError(f"句对 {p.pair_id} 有 {p.num_tokens} 个 token，超出批次预算 {token_budget}")
    ordered = sorted(pairs, key=lambda p: (p.num_tokens, p.pair_id))
    batches: List[List[SentencePair]] = []
    current: List[SentencePair] = []
    width = 0
    for p in ordered:
        new_width = max(width, p.num_tokens)
        if current and (len(current) + 1) * new_width > token_budget:
            batches.append(current)
            current, new_width = [], p.num_tokens
        current.append(p)
        width = new_width
    if current:
        batches.append(current)
    return batches
