"""
解码模块

由模型产生预测 x̂：贪心搜索、束搜索与温度采样。
所有解码器在得到最终假设后都会用一次确定性的 teacher forcing 前向重新计算逐步概率，
因此返回的 step_logprobs 与不确定性模块在 dropout=0 时的计算完全一致。
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from .data import BOS, EOS, PAD, UNK
from .errors import ConfigError
from .model import ModelConfig, TransformerParams, decode, encode, forward_logprobs
from .numerics import RngStream, Tensor

logger = logging.getLogger(__name__)

NEVER_GENERATED = (PAD, BOS, UNK)


class DecodeMode(str, Enum):
    GREEDY = "greedy"
    BEAM = "beam"
    SAMPLE = "sample"

    @classmethod
    def parse(cls, value) -> "DecodeMode":
        if isinstance(value, cls):
            return value
        text = str(value).lower()
        if text == "search":
            return cls.BEAM
        try:
            return cls(text)
        except ValueError:
            raise ConfigError(f"未知的解码模式 {value!r}（可选 greedy / beam|search / sample）") from None


@dataclass
class DecodeConfig:
    """解码超参数；束大小 4、长度惩罚指数 0.6 为默认值"""
    mode: DecodeMode = DecodeMode.BEAM
    beam_size: int = 4
    max_len: int = 64
    length_penalty: float = 0.6
    temperature: float = 1.0
    seed: int = 0
    top_k: int = 0
    top_p: float = 1.0

    def __post_init__(self):
        self.mode = DecodeMode.parse(self.mode)
        if self.beam_size < 1:
            raise ConfigError(f"beam_size 必须 ≥ 1，当前为 {self.beam_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len 必须 ≥ 1，当前为 {self.max_len}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature 必须 > 0，当前为 {self.temperature}")
        if self.top_k < 0 or not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_k={self.top_k} 或 top_p={self.top_p} 不合法")

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "DecodeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"DecodeConfig 中有未知字段: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Hypothesis:
    """
    一条解码结果

    tokens 不含结束符；step_logprobs 覆盖 tokens 以及（已结束时的）结束符。
    """
    tokens: List[int]
    step_logprobs: List[float] = field(default_factory=list)
    finished: bool = True
    score: float = 0.0

    @property
    def truncated(self) -> bool:
        return not self.finished

    @property
    def logprob(self) -> float:
        return float(np.sum(self.step_logprobs)) if self.step_logprobs else 0.0

    @property
    def scored_tokens(self) -> List[int]:
        return self.tokens + [EOS] if self.finished else list(self.tokens)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(np.asarray(self.step_logprobs, dtype=np.float64))


def length_penalty(length: int, alpha: float) -> float:
    """GNMT 长度惩罚 ((5 + n) / 6)^α"""
    return ((5.0 + length) / 6.0) ** alpha


def hypothesis_score(logprob: float, length: int, alpha: float) -> float:
    return logprob / length_penalty(max(length, 1), alpha)


class _Stepper:
    """缓存编码器输出，逐步给出下一个词的对数概率"""

    def __init__(self, src: Sequence[int], params: TransformerParams, config: ModelConfig):
        self.params = params
        self.config = config
        self.src_ids = np.asarray([list(src)], dtype=np.int64)
        self.memory = encode(params, config, self.src_ids)

    def next_logprobs(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        n = len(prefixes)
        tgt_in = np.asarray([[BOS] + list(p) for p in prefixes], dtype=np.int64)
        memory = self.memory if n == 1 else _repeat(self.memory, n)
        src_ids = np.repeat(self.src_ids, n, axis=0)
        out = decode(self.params, self.config, memory, src_ids, tgt_in).data[:, -1, :].astype(np.float64)
        out[:, list(NEVER_GENERATED)] = -np.inf
        return out


def _repeat(memory: Tensor, n: int) -> Tensor:
    return Tensor(np.repeat(memory.data, n, axis=0))


def _step_limit(config: ModelConfig, decode_config: DecodeConfig) -> int:
    return min(decode_config.max_len, config.max_len)


def _rescore(src: Sequence[int], tokens: List[int], finished: bool, params: TransformerParams,
             config: ModelConfig, alpha: float) -> Hypothesis:
    scored = tokens + [EOS] if finished else list(tokens)
    if not scored:
        return Hypothesis(tokens=[], step_logprobs=[], finished=False, score=float("-inf"))
    logprobs = forward_logprobs(src, scored, params, config).data
    step = [float(v) for v in logprobs]
    return Hypothesis(list(tokens), step, finished, hypothesis_score(float(np.sum(step)), len(step), alpha))


def greedy_decode(src: Sequence[int], params: TransformerParams, config: ModelConfig,
                  decode_config: Optional[DecodeConfig] = None) -> Hypothesis:
    """
    贪心解码：每一步取概率最大的词，遇到结束符或达到最大长度时停止

    Returns:
        Hypothesis，finished=False 表示因达到最大长度被截断
    """
    decode_config = decode_config or DecodeConfig(mode=DecodeMode.GREEDY)
    stepper = _Stepper(src, params, config)
    tokens: List[int] = []
    finished = False
    for _ in range(_step_limit(config, decode_config)):
        token = int(np.argmax(stepper.next_logprobs([tokens])[0]))
        if token == EOS:
            finished = True
            break
        tokens.append(token)
    if not finished:
        logger.debug(f"贪心解码在 {len(tokens)} 步处被截断")
    return _rescore(src, tokens, finished, params, config, decode_config.length_penalty)


def beam_decode(src: Sequence[int], params: TransformerParams, config: ModelConfig,
                decode_config: Optional[DecodeConfig] = None) -> Hypothesis:
    """
    束搜索

    每步按累计对数概率保留前 beam_size 个候选，同分时 token 序列字典序较小者优先；
    结束的候选进入完成列表，最终按长度惩罚后的得分选出最优假设。
    若贪心假设的得分更高则返回贪心假设（束搜索不会劣于 beam=1）。
    """
    decode_config = decode_config or DecodeConfig()
    alpha = decode_config.length_penalty
    if decode_config.beam_size == 1:
        return greedy_decode(src, params, config, decode_config)

    stepper = _Stepper(src, params, config)
    beam = decode_config.beam_size
    live: List[Tuple[float, List[int]]] = [(0.0, [])]
    done: List[Tuple[float, List[int], bool]] = []
    limit = _step_limit(config, decode_config)
    for _ in range(limit):
        logprobs = stepper.next_logprobs([tokens for _, tokens in live])
        candidates = []
        for (cum, tokens), row in zip(live, logprobs):
            for token in np.flatnonzero(np.isfinite(row)):
                candidates.append((cum + float(row[token]), tokens + [int(token)]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for cum, tokens in candidates[:beam]:
            if tokens[-1] == EOS:
                done.append((hypothesis_score(cum, len(tokens), alpha), tokens[:-1], True))
            else:
                live.append((cum, tokens))
        if not live or len(done) >= beam:
            break
    if live and len(live[0][1]) >= limit:
        done.extend((hypothesis_score(cum, len(tokens), alpha), tokens, False) for cum, tokens in live)

    if done:
        done.sort(key=lambda d: (-d[0], d[1]))
        _, best_tokens, best_finished = done[0]
        best = _rescore(src, best_tokens, best_finished, params, config, alpha)
    else:
        best = Hypothesis(tokens=[], finished=False, score=float("-inf"))
    greedy = greedy_decode(src, params, config, decode_config)
    if greedy.score > best.score:
        logger.debug("贪心假设得分高于束搜索结果，返回贪心假设")
        return greedy
    return best


def sample_token(logprobs: np.ndarray, temperature: float, rng: RngStream, top_k: int = 0,
                 top_p: float = 1.0) -> int:
    """
    从 softmax(logprobs / temperature) 中采样一个 token

    top_k / top_p 为截断采样开关，默认关闭（完整分布采样）。
    """
    scaled = np.asarray(logprobs, dtype=np.float64) / temperature
    scaled = scaled - logsumexp(scaled)
    if top_k > 0 and top_k < np.isfinite(scaled).sum():
        cutoff = np.sort(scaled)[-top_k]
        scaled = np.where(scaled >= cutoff, scaled, -np.inf)
    if top_p < 1.0:
        order = np.argsort(-scaled, kind="stable")
        cum = np.cumsum(np.exp(scaled[order]))
        keep = order[:int(np.searchsorted(cum, top_p, side="left")) + 1]
        trimmed = np.full_like(scaled, -np.inf)
        trimmed[keep] = scaled[keep]
        scaled = trimmed
    probs = np.exp(scaled - logsumexp(scaled))
    cdf = np.cumsum(probs)
    u = rng.uniform() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def sample_decode(src: Sequence[int], params: TransformerParams, config: ModelConfig,
                  decode_config: Optional[DecodeConfig] = None, rng: Optional[RngStream] = None) -> Hypothesis:
    """
    温度采样解码：每一步从 softmax(logits / T) 中采样

    返回的 step_logprobs 是模型（T=1）下的概率，供 PTP 使用。
    """
    decode_config = decode_config or DecodeConfig(mode=DecodeMode.SAMPLE)
    rng = rng or RngStream(decode_config.seed)
    stepper = _Stepper(src, params, config)
    tokens: List[int] = []
    finished = False
    for _ in range(_step_limit(config, decode_config)):
        row = stepper.next_logprobs([tokens])[0]
        token = sample_token(row, decode_config.temperature, rng, decode_config.top_k, decode_config.top_p)
        if token == EOS:
            finished = True
            break
        tokens.append(token)
    return _rescore(src, tokens, finished, params, config, decode_config.length_penalty)


def decode_one(src: Sequence[int], params: TransformerParams, config: ModelConfig, decode_config: DecodeConfig,
               rng: Optional[RngStream] = None) -> Hypothesis:
    if decode_config.mode == DecodeMode.GREEDY:
        return greedy_decode(src, params, config, decode_config)
    if decode_config.mode == DecodeMode.BEAM:
        return beam_decode(src, params, config, decode_config)
    return sample_decode(src, params, config, decode_config, rng)


def translate_corpus(sources: Sequence[Sequence[int]], params: TransformerParams, config: ModelConfig,
                     decode_config: DecodeConfig, threads: int = 1, progress: bool = True) -> List[Hypothesis]:
    """
    逐句解码整个语料

    第 i 句使用独立的随机流 RngStream(seed, i)，因此结果与线程数和执行顺序无关。
    """
    def run(i: int) -> Hypothesis:
        return decode_one(sources[i], params, config, decode_config, RngStream(decode_config.seed, i))

    indices = range(len(sources))
    desc = f"解码 ({decode_config.mode.value})"
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(tqdm(pool.map(run, indices), total=len(sources), desc=desc, disable=not progress))
    return [run(i) for i in tqdm(indices, desc=desc, disable=not progress)]


if __name__ == "__main__":
    from .model import init_params

    cfg = ModelConfig(src_vocab_size=10, tgt_vocab_size=10, d_model=16, d_ff=32, n_layers=1, n_heads=2, max_len=6)
    params = init_params(cfg, RngStream(3))
    for mode in DecodeMode:
        hyp = decode_one([4, 5, 6], params, cfg, DecodeConfig(mode=mode, max_len=6))
        print(f"{mode.value:>6}: tokens={hyp.tokens} finished={hyp.finished} logP={hyp.logprob:.4f}")
